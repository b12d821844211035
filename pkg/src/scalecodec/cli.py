"""``scalecodec`` command line: training, coding, evaluation and curve tools.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every error is reported as one line on stderr, ``scalecodec: <kind>: <reason>``.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint as ckptio
from .codec import ModelMismatchError, decode_image, encode_image
from .config import ConfigError, ExperimentConfig, parse_config
from .container import ContainerError
from .data import datasets_for, load_png, save_png
from .evaluation import CurveError, RateQualityCurve, bd_rate_detail, break_even, build_curve
from .params import ParameterStore
from .taskproxy import TaskProxy, train_task_proxy
from .training import (Checkpoint, TrainingDiverged, train_base, train_enhancement, train_joint,
                       write_metrics)

log = logging.getLogger("scalecodec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- persistence

def save_proxy(proxy: TaskProxy, path):
    arrays = {n: proxy.params.numpy(n) for n in proxy.params}
    arrays["meta.accuracy"] = np.float32(proxy.accuracy)
    ckptio.save(arrays, path)


def load_proxy(path) -> TaskProxy:
    arrays = ckptio.load(path)
    if "meta.kind" in arrays:
        return Checkpoint.from_arrays(arrays).proxy()
    params = ParameterStore({n: torch.from_numpy(np.array(a, dtype=np.float32))
                             for n, a in arrays.items() if not n.startswith("meta.")})
    if not params.has_role("taskproxy"):
        raise ckptio.CheckpointError(f"{path}: no task proxy parameters")
    acc = float(np.asarray(arrays.get("meta.accuracy", np.nan)).reshape(-1)[0])
    return TaskProxy(params, int(params["taskproxy.fc.weight"].shape[0]),
                     int(params["taskproxy.head.2.weight"].shape[0]), acc)


def _load_config(args) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    if getattr(args, "no_coder", False):
        config = config.replace(coder=False)
    return config


def _echo_config(config: ExperimentConfig, out: str):
    """Write the resolved configuration next to an output artifact."""
    target = out if os.path.isdir(out) else os.path.splitext(out)[0]
    path = os.path.join(target, "config.txt") if os.path.isdir(out) else target + ".config.txt"
    with open(path, "w") as fh:
        fh.write(config.to_text())


def _parent(path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)


def _save_checkpoint(ckpt: Checkpoint, out: str, config: ExperimentConfig):
    _parent(out)
    ckpt.save(out)
    write_metrics(ckpt.metrics, os.path.splitext(out)[0] + ".metrics.csv")
    _echo_config(config, out)


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


# ------------------------------------------------------------------- commands

def cmd_train_task(args):
    _require(args, "out")
    config = _load_config(args)
    train, val = datasets_for(config)
    proxy = train_task_proxy(train, val, config, config.seed)
    _parent(args.out)
    save_proxy(proxy, args.out)
    _echo_config(config, args.out)
    print(json.dumps({"accuracy": proxy.accuracy, "hash": f"{proxy.hash():08x}"}))


def cmd_train_base(args):
    _require(args, "checkpoint", "out")
    config = _load_config(args)
    train, _ = datasets_for(config)
    ckpt = train_base(train, load_proxy(args.checkpoint), config, args.lambda_base)
    _save_checkpoint(ckpt, args.out, config)


def cmd_train_enh(args):
    _require(args, "base_checkpoint", "out")
    config = _load_config(args)
    train, _ = datasets_for(config)
    init = Checkpoint.load(config.residual_init) if config.residual_init else None
    ckpt = train_enhancement(train, Checkpoint.load(args.base_checkpoint), config,
                             args.lambda_enh, residual_init=init)
    _save_checkpoint(ckpt, args.out, config)


def cmd_train_joint(args):
    _require(args, "checkpoint", "out")
    config = _load_config(args)
    train, _ = datasets_for(config)
    ckpt = train_joint(train, load_proxy(args.checkpoint), config, args.lambda_base, args.lambda_enh)
    _save_checkpoint(ckpt, args.out, config)


def _read_image(path) -> torch.Tensor:
    if path.endswith(".npy"):
        return torch.from_numpy(np.load(path).astype(np.float32))
    return load_png(path)


def cmd_encode(args):
    _require(args, "checkpoint", "out")
    ckpt = Checkpoint.load(args.checkpoint)
    x = _read_image(args.input)
    if x.shape[-1] % 8 or x.shape[-2] % 8:
        raise UsageError(f"image size {tuple(x.shape[-2:])} must be a multiple of 8")
    data = encode_image(x, ckpt, args.layers)
    _parent(args.out)
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(json.dumps({"bytes": len(data), "bpp": 8 * len(data) / (x.shape[-1] * x.shape[-2])}))


def cmd_decode(args):
    _require(args, "checkpoint", "out")
    ckpt = Checkpoint.load(args.checkpoint)
    with open(args.input, "rb") as fh:
        out = decode_image(fh.read(), ckpt)
    _parent(args.out)
    if args.layers == "base":
        f = out["features"]
        summary = {"label": out["label"], "probabilities": [round(float(v), 6) for v in out["probs"]],
                   "features": {"shape": list(f.shape), "mean": float(f.mean()), "std": float(f.std()),
                                "min": float(f.min()), "max": float(f.max())}}
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(json.dumps({"label": out["label"]}))
        return
    if "reconstruction" not in out:
        raise UsageError("checkpoint has no reconstruction path; use --layers base")
    if out["layers"] < 2:
        log.warning("bitstream has no enhancement layer; writing the preview")
    rec = out["reconstruction"]
    if args.out.endswith(".npy"):
        np.save(args.out, rec.numpy())  # float output, no 8-bit rounding
    else:
        save_png(rec, args.out)


def _checkpoints(args) -> List[Checkpoint]:
    return [Checkpoint.load(p) for p in args.checkpoint]


def _eval(args, metric):
    _require(args, "checkpoint", "out")
    config = _load_config(args)
    _, val = datasets_for(config)
    label = args.label or os.path.splitext(os.path.basename(args.out))[0]
    curve = build_curve(_checkpoints(args), val, metric, label, coder=config.coder)
    _parent(args.out)
    curve.to_csv(args.out)
    _echo_config(config, args.out)
    for i, drop in curve.violations():
        log.warning("%s: quality drops by %.4g between points %d and %d", label, drop, i, i + 1)
    print(json.dumps({"label": label, "points": len(curve)}))


def cmd_eval_task(args):
    _eval(args, "accuracy")


def cmd_eval_recon(args):
    _eval(args, "psnr")


def cmd_sweep(args):
    """Train one checkpoint per λ of the configured grid, then write the curve."""
    _require(args, "out")
    config = _load_config(args)
    kind = args.kind
    if kind == "enh":
        _require(args, "base_checkpoint")
    else:
        _require(args, "checkpoint")
    os.makedirs(args.out, exist_ok=True)
    train, val = datasets_for(config)
    if kind == "enh":
        base = Checkpoint.load(args.base_checkpoint)
        grid = config.lambda_enh_grid
        run = lambda lam: train_enhancement(train, base, config, lam)
    else:
        proxy = load_proxy(args.checkpoint)
        grid = config.lambda_base_grid
        if kind == "base":
            run = lambda lam: train_base(train, proxy, config, lam)
        else:
            run = lambda lam: train_joint(train, proxy, config, lam, config.lambda_enh)
    ckpts = []
    for lam in grid:
        ckpt = run(lam)
        path = os.path.join(args.out, f"{kind}_lambda{lam:g}.ckpt")
        ckpt.save(path)
        write_metrics(ckpt.metrics, os.path.splitext(path)[0] + ".metrics.csv")
        ckpts.append(ckpt)
    _echo_config(config, args.out)
    metric = "psnr" if kind == "enh" else "accuracy"
    curve = build_curve(ckpts, val, metric, kind, coder=config.coder)
    curve.to_csv(os.path.join(args.out, f"{kind}_curve.csv"))
    print(json.dumps({"curve": os.path.join(args.out, f"{kind}_curve.csv"), "points": len(curve),
                      "violations": curve.violations()}))


def cmd_bdrate(args):
    ref, test = RateQualityCurve.from_csv(args.reference), RateQualityCurve.from_csv(args.test)
    if args.pareto:
        ref, test = ref.pareto(), test.pareto()
    res = bd_rate_detail(ref, test)
    out = {"bd_rate_percent": round(res.percent, 12) + 0.0}
    if res.warning:
        out["warning"] = res.warning
    print(json.dumps(out))


def cmd_breakeven(args):
    print(json.dumps({"f_threshold": break_even(args.rb, args.rt)}))


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scalecodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        if config:
            p.add_argument("--config", help="key = value configuration file")
            p.add_argument("--seed", type=int, help="override the configured seed")
        return p

    p = add("train-task", cmd_train_task, "train and freeze the task proxy")
    p.add_argument("--out", help="proxy checkpoint to write")

    p = add("train-base", cmd_train_base, "train the base layer against a frozen task proxy")
    p.add_argument("--checkpoint", help="task proxy checkpoint")
    p.add_argument("--lambda-base", type=float)
    p.add_argument("--out")

    p = add("train-enh", cmd_train_enh, "train preview and residual layers on a frozen base")
    p.add_argument("--base-checkpoint")
    p.add_argument("--lambda-enh", type=float)
    p.add_argument("--out")

    p = add("train-joint", cmd_train_joint, "train the parallel (joint) baseline")
    p.add_argument("--checkpoint", help="task proxy checkpoint")
    p.add_argument("--lambda-base", type=float)
    p.add_argument("--lambda-enh", type=float)
    p.add_argument("--out")

    for name, fn, text in (("encode", cmd_encode, "encode an image into a .shmc container"),
                           ("decode", cmd_decode, "decode a .shmc container")):
        p = add(name, fn, text, config=False)
        p.add_argument("input")
        p.add_argument("--checkpoint")
        p.add_argument("--layers", choices=("base", "base+enh"), default="base")
        p.add_argument("--out")

    for name, fn, text in (("eval-task", cmd_eval_task, "base-layer rate-accuracy curve"),
                           ("eval-recon", cmd_eval_recon, "total-rate PSNR curve")):
        p = add(name, fn, text)
        p.add_argument("--checkpoint", action="append", help="repeat once per operating point")
        p.add_argument("--label")
        p.add_argument("--no-coder", action="store_true",
                       help="estimate rates from the entropy model instead of coding")
        p.add_argument("--out", help="curve CSV to write")

    p = add("sweep", cmd_sweep, "train over the configured lambda grid and write the curve")
    p.add_argument("--kind", choices=("base", "enh", "joint"), default="base")
    p.add_argument("--checkpoint", help="task proxy checkpoint (base and joint sweeps)")
    p.add_argument("--base-checkpoint", help="frozen base checkpoint (enh sweep)")
    p.add_argument("--no-coder", action="store_true")
    p.add_argument("--out", help="output directory")

    p = add("bdrate", cmd_bdrate, "BD-Rate of a test curve against a reference curve", config=False)
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--pareto", action="store_true", help="drop dominated points first")

    p = add("breakeven", cmd_breakeven, "viewing fraction below which scalable coding wins",
            config=False)
    p.add_argument("--rb", type=float, required=True, help="base rate / single-layer rate")
    p.add_argument("--rt", type=float, required=True, help="base+enh rate / single-layer rate")
    return parser


def _fail(kind: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"scalecodec: {kind}: {text}", file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as err:
        return _fail("usage-error", err, EXIT_USAGE)
    except ConfigError as err:
        where = f"line {err.line}: " if err.line else ""
        return _fail("config-error", f"{where}{err}", EXIT_USAGE)
    except ModelMismatchError as err:
        return _fail("model-mismatch", err, EXIT_RUNTIME)
    except (ContainerError, ckptio.CheckpointError) as err:
        return _fail("format-error", err, EXIT_RUNTIME)
    except CurveError as err:
        return _fail("curve-error", err, EXIT_RUNTIME)
    except TrainingDiverged as err:
        return _fail("diverged", err, EXIT_RUNTIME)
    except FileNotFoundError as err:
        return _fail("file-not-found", f"{err.filename}", EXIT_RUNTIME)
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        return _fail("runtime-error", f"{type(err).__name__}: {err}", EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
