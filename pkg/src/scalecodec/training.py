"""Losses and training loops.

Three systems are trained here:

* base layer alone: rate of the base latent plus ``lambda_base`` times the
  task-feature MSE (the information-bottleneck objective with the feature
  distortion standing in for task relevance);
* enhancement layer on top of a frozen base: a preview synthesized from the
  base latent, then a residual codec trained on ``x - preview``;
* the parallel baseline: one analysis transform whose latent is split into
  base and enhancement slices, trained on both rates and both distortions at
  once.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckptio
from . import transforms as T
from .config import ExperimentConfig
from .entropy import EntropyModel, estimate_rate_bits, quantize
from .params import ROLES, ParameterStore, generator, init_params, role_of
from .taskproxy import TaskProxy, feature_distortion, reference_features

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
KINDS = {"base": 0.0, "enh": 1.0, "joint": 2.0}


class TrainingDiverged(RuntimeError):
    pass


def entropy_model(p: ParameterStore, prefix: str, s_max: int, escape: float, layer: str) -> EntropyModel:
    return EntropyModel(p[f"{prefix}.loc"], p[f"{prefix}.log_scale"], s_max, escape, layer)


def _pixels(x: torch.Tensor) -> int:
    return x.shape[0] * x.shape[-2] * x.shape[-1]


def _noise_like(y: torch.Tensor, noise) -> torch.Tensor:
    if isinstance(noise, torch.Generator):
        return torch.rand(y.shape, generator=noise, dtype=y.dtype) - 0.5
    if noise is None:
        return torch.zeros_like(y)
    if noise.shape != y.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} does not match latent {tuple(y.shape)}")
    return noise.to(y.dtype)


def _check_finite(loss: torch.Tensor, what: str):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{what}: non-finite loss {loss.item()}")


def base_loss(x, f_ref, p: ParameterStore, lambda_base: float, noise=None,
              s_max: int = 64, escape: float = 2.0 ** -16):
    """``(loss, rate_bpp, d_base)`` with ``loss = rate_bpp + lambda_base * d_base``.

    ``noise`` is a generator, an explicit U(-0.5, 0.5) tensor, or ``None``
    (no perturbation, used by gradient checks).
    """
    y = T.analyze_base(x, p)
    y_tilde = quantize(y, "noise", s_max, noise=_noise_like(y, noise))
    em = entropy_model(p, "base.em", s_max, escape, "base")
    rate = estimate_rate_bits(y_tilde, em) / _pixels(x)
    dist = feature_distortion(T.lst_apply(y_tilde, p), f_ref)
    loss = rate + lambda_base * dist
    _check_finite(loss, "base_loss")
    return loss, rate, dist


def _frozen_base_latent(x, p: ParameterStore, s_max: int):
    with torch.no_grad():
        return quantize(T.analyze_base(x, p), "round", s_max)


def enhancement_loss(x, p: ParameterStore, lambda_enh: float, noise=None,
                     s_max: int = 64, escape: float = 2.0 ** -16):
    """``(loss, rate_bpp, d_enh)``: residual rate plus ``lambda_enh`` times image MSE.

    The base latent is computed without gradient tracking, so base-role
    parameters never receive gradient.
    """
    y_base = _frozen_base_latent(x, p, s_max)
    preview = T.synthesize_preview(y_base, p)
    x_res = T.residual_image(x, preview).to(x.dtype)
    y = T.analyze_residual(x_res, p)
    y_tilde = quantize(y, "noise", s_max, noise=_noise_like(y, noise))
    em = entropy_model(p, "residual.em", s_max, escape, "enh")
    rate = estimate_rate_bits(y_tilde, em) / _pixels(x)
    x_hat = T.reconstruct(preview, T.synthesize_residual(y_tilde, p))
    dist = F.mse_loss(x_hat, x)
    loss = rate + lambda_enh * dist
    _check_finite(loss, "enhancement_loss")
    return loss, rate, dist


def preview_loss(x, p: ParameterStore, s_max: int = 64):
    preview = T.synthesize_preview(_frozen_base_latent(x, p, s_max), p)
    return F.mse_loss(preview, x)


def joint_loss(x, f_ref, p: ParameterStore, lambda_base: float, lambda_enh: float, l_base: int,
               noise=None, s_max: int = 64, escape: float = 2.0 ** -16):
    """``(loss, r_base, r_enh, d_base, d_enh)`` for the parallel-trained baseline.

    ``d_base`` sees only the base slice (through the baseline's LST);
    ``d_enh`` is the image MSE of the synthesis from the whole latent.
    """
    y = T.analyze_joint(x, p)
    y_tilde = quantize(y, "noise", s_max, noise=_noise_like(y, noise))
    yb, ye = T.split_latent(y_tilde, l_base)
    em = entropy_model(p, "joint.em", s_max, escape, "joint")
    total = y.shape[-3]
    pixels = _pixels(x)
    r_base = estimate_rate_bits(yb, em.channel_slice(0, l_base, "base")) / pixels
    r_enh = estimate_rate_bits(ye, em.channel_slice(l_base, total, "enh")) / pixels
    d_base = feature_distortion(T.lst_apply(yb, p, prefix="joint.lst"), f_ref)
    d_enh = F.mse_loss(T.synthesize_joint(y_tilde, p), x)
    loss = r_base + r_enh + lambda_base * d_base + lambda_enh * d_enh
    _check_finite(loss, "joint_loss")
    return loss, r_base, r_enh, d_base, d_enh


@dataclass
class Checkpoint:
    """Parameters plus the bookkeeping needed to evaluate or resume a run."""

    params: ParameterStore
    kind: str
    lambda_base: float
    lambda_enh: float
    epoch: int = 0
    s_max: int = 64
    escape: float = 2.0 ** -16
    l_base: int = 16
    seed: int = 0
    metrics: List[Dict[str, float]] = field(default_factory=list)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)

    def model_hash(self) -> int:
        return self.params.hash()

    def proxy(self) -> TaskProxy:
        sub = self.params.subset(["taskproxy"])
        return TaskProxy(sub, int(sub["taskproxy.fc.weight"].shape[0]),
                         int(sub["taskproxy.head.2.weight"].shape[0]))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {n: self.params.numpy(n) for n in self.params}
        meta = {"kind": KINDS[self.kind], "lambda_base": self.lambda_base,
                "lambda_enh": self.lambda_enh, "epoch": self.epoch, "s_max": self.s_max,
                "escape_log2": math.log2(self.escape), "l_base": self.l_base,
                **{f"seed{i}": (self.seed >> (16 * i)) & 0xFFFF for i in range(4)}}
        for k, v in meta.items():
            arrays[f"meta.{k}"] = np.asarray(v, dtype="<f4")
        for k, v in self.optimizer.items():
            arrays[f"adam.{k}"] = np.asarray(v, dtype="<f4")
        return arrays

    @classmethod
    def from_arrays(cls, arrays) -> "Checkpoint":
        params, meta, opt = ParameterStore(), {}, {}
        for name, arr in arrays.items():
            role = role_of(name)
            if role == "meta":
                meta[name[5:]] = float(np.asarray(arr).reshape(-1)[0])
            elif role == "adam":
                opt[name[5:]] = arr
            elif role in ROLES:
                params[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
            else:
                raise ckptio.CheckpointError(f"unknown entry {name!r}")
        kind = {v: k for k, v in KINDS.items()}[meta["kind"]]
        return cls(params, kind, meta["lambda_base"], meta["lambda_enh"], int(meta["epoch"]),
                   int(meta["s_max"]), 2.0 ** meta["escape_log2"], int(meta["l_base"]),
                   sum(int(meta[f"seed{i}"]) << (16 * i) for i in range(4)), [], opt)

    def save(self, path):
        ckptio.save(self.to_arrays(), path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_arrays(ckptio.load(path))


def write_metrics(metrics: Sequence[Dict[str, float]], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "rate_bpp", "distortion", "lr"])
        for m in metrics:
            writer.writerow([m["epoch"], f"{m['loss']:.9g}", f"{m['rate_bpp']:.9g}",
                             f"{m['distortion']:.9g}", f"{m['lr']:.9g}"])


def learning_rate(epoch: int, config: ExperimentConfig) -> float:
    """Fixed rate for stage 1, then a polynomial decay stepped every ``decay_interval`` epochs."""
    if epoch < config.stage1_epochs:
        return config.stage1_lr
    e = epoch - config.stage1_epochs
    span = max(1, config.stage2_epochs)
    stepped = (e // config.decay_interval) * config.decay_interval
    frac = max(0.0, 1.0 - stepped / span)
    return max(config.lr_floor, config.stage1_lr * frac ** config.decay_power)


def _run(p: ParameterStore, trainable: List[str], step: Callable, data, f_ref, config: ExperimentConfig,
         seed: int, epochs: int, tag: str, start_epoch: int = 0, metrics=None, opt_state=None,
         lr_fn: Callable[[int], float] = None):
    """Shared Adam loop. ``step(x, f, noise_gen) -> (loss, rate, distortion)``."""
    lr_fn = lr_fn or (lambda e: learning_rate(e, config))
    net = [n for n in trainable if ".em." not in n]
    ent = [n for n in trainable if ".em." in n]
    for n in trainable:
        p[n] = p[n].detach().clone().requires_grad_(True)
    groups = [{"params": [p[n] for n in net], "lr": config.stage1_lr, "base_lr": config.stage1_lr}]
    if ent:
        groups.append({"params": [p[n] for n in ent], "lr": config.entropy_lr,
                       "base_lr": config.entropy_lr})
    opt = torch.optim.Adam(groups)
    if opt_state:
        _load_adam(opt, [n for n in net] + ent, opt_state)
    metrics = list(metrics or [])
    n_items = len(data)
    for epoch in range(start_epoch, epochs):
        lr = lr_fn(epoch)
        for g in opt.param_groups:
            g["lr"] = g["base_lr"] * lr / config.stage1_lr
        shuffle = generator(seed, f"{tag}-shuffle-{epoch}")
        noise = generator(seed, f"{tag}-noise-{epoch}")
        sums = np.zeros(3)
        for idx, x, _ in data.batches(config.batch_size, shuffle):
            f = f_ref[idx] if f_ref is not None else None
            opt.zero_grad(set_to_none=True)
            loss, rate, dist = step(x, f, noise)
            if loss.item() > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"{tag}: loss {loss.item():.3g} at epoch {epoch}")
            loss.backward()
            opt.step()
            sums += len(x) * np.array([loss.item(), rate.item(), dist.item()])
        sums /= n_items
        metrics.append({"epoch": epoch, "loss": sums[0], "rate_bpp": sums[1],
                        "distortion": sums[2], "lr": lr})
        log.info("%s epoch %d loss %.5f rate %.4f dist %.5f lr %.2e", tag, epoch, *sums, lr)
    for n in trainable:
        p[n] = p[n].detach()
    return metrics, _dump_adam(opt, net + ent)


def _dump_adam(opt, names) -> Dict[str, np.ndarray]:
    out = {}
    params = [q for g in opt.param_groups for q in g["params"]]
    for name, q in zip(names, params):
        st = opt.state.get(q)
        if not st:
            continue
        out[f"{name}.exp_avg"] = st["exp_avg"].numpy()
        out[f"{name}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
        out[f"{name}.step"] = np.asarray(float(st["step"]))
    return out


def _load_adam(opt, names, state):
    params = [q for g in opt.param_groups for q in g["params"]]
    for name, q in zip(names, params):
        if f"{name}.exp_avg" not in state:
            continue
        opt.state[q] = {"step": torch.tensor(float(state[f"{name}.step"])),
                        "exp_avg": torch.from_numpy(np.array(state[f"{name}.exp_avg"])),
                        "exp_avg_sq": torch.from_numpy(np.array(state[f"{name}.exp_avg_sq"]))}


def total_epochs(config: ExperimentConfig) -> int:
    return config.stage1_epochs + config.stage2_epochs


def _with_proxy(p: ParameterStore, proxy: TaskProxy) -> ParameterStore:
    p.update(proxy.params.subset(["taskproxy"]).clone())
    return p


def train_base(train_set, proxy: TaskProxy, config: ExperimentConfig, lambda_base: Optional[float] = None,
               seed: Optional[int] = None, resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Optimize the base analysis, its entropy model and the LST under :func:`base_loss`."""
    lam = config.lambda_base if lambda_base is None else lambda_base
    seed = config.seed if seed is None else seed
    if resume is not None:
        p = resume.params.clone()
    else:
        p = _with_proxy(init_params(config, seed, roles=("base", "lst")), proxy)
    proxy_hash = proxy.hash()
    f_ref = reference_features(train_set, proxy)
    trainable = p.names("base") + p.names("lst")

    def step(x, f, noise):
        loss, rate, dist = base_loss(x, f, p, lam, noise, config.s_max, config.escape_mass)
        return loss, rate, dist

    metrics, opt = _run(p, trainable, step, train_set, f_ref, config, seed, total_epochs(config),
                        "base", resume.epoch if resume else 0,
                        resume.metrics if resume else None, resume.optimizer if resume else None)
    if p.hash(["taskproxy"]) != proxy_hash:  # pragma: no cover - invariant guard
        raise AssertionError("task proxy parameters changed during base training")
    return Checkpoint(p, "base", lam, 0.0, total_epochs(config), config.s_max, config.escape_mass,
                      config.l_base, seed, metrics, opt)


def train_enhancement(train_set, base: Checkpoint, config: ExperimentConfig,
                      lambda_enh: Optional[float] = None, seed: Optional[int] = None,
                      residual_init: Optional[Checkpoint] = None) -> Checkpoint:
    """Fit the preview, then the residual codec, with every base-role parameter frozen."""
    if base is None or base.kind not in ("base", "enh") or not base.params.has_role("base"):
        raise ValueError("train_enhancement needs a base-layer checkpoint")
    lam = config.lambda_enh if lambda_enh is None else lambda_enh
    seed = config.seed if seed is None else seed
    p = base.params.subset(["base", "lst", "taskproxy"]).clone()
    frozen_hash = p.hash(["base", "taskproxy"])
    p.update(init_params(config.replace(l_base=base.l_base), seed, roles=("preview", "residual")))
    if residual_init is not None:
        for n in residual_init.params.names("residual"):
            if n not in p or p[n].shape != residual_init.params[n].shape:
                raise ValueError(f"residual init checkpoint does not match: {n}")
            p[n] = residual_init.params[n].clone()
    s_max, esc = config.s_max, config.escape_mass

    def preview_step(x, f, noise):
        d = preview_loss(x, p, s_max)
        return d, torch.zeros(()), d

    metrics, _ = _run(p, p.names("preview"), preview_step, train_set, None, config, seed,
                      config.preview_epochs, "preview", lr_fn=lambda e: config.preview_lr)

    def step(x, f, noise):
        return enhancement_loss(x, p, lam, noise, s_max, esc)

    enh_metrics, opt = _run(p, p.names("preview") + p.names("residual"), step, train_set, None,
                            config, seed, total_epochs(config), "enh")
    if p.hash(["base", "taskproxy"]) != frozen_hash:  # pragma: no cover - invariant guard
        raise AssertionError("frozen base parameters changed during enhancement training")
    for m in metrics:
        m["epoch"] -= config.preview_epochs
    return Checkpoint(p, "enh", base.lambda_base, lam, total_epochs(config), s_max, esc,
                      base.l_base, seed, metrics + enh_metrics, opt)


def train_joint(train_set, proxy: TaskProxy, config: ExperimentConfig, lambda_base: Optional[float] = None,
                lambda_enh: Optional[float] = None, seed: Optional[int] = None,
                resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Train the latent-partitioned baseline on both layers' rates and distortions at once."""
    lb = config.lambda_base if lambda_base is None else lambda_base
    le = config.lambda_enh if lambda_enh is None else lambda_enh
    seed = config.seed if seed is None else seed
    if resume is not None:
        p = resume.params.clone()
    else:
        p = _with_proxy(init_params(config, seed, roles=("joint",)), proxy)
    f_ref = reference_features(train_set, proxy)
    l_base = config.l_base

    def step(x, f, noise):
        loss, rb, re, db, de = joint_loss(x, f, p, lb, le, l_base, noise, config.s_max,
                                          config.escape_mass)
        return loss, rb + re, db

    metrics, opt = _run(p, p.names("joint"), step, train_set, f_ref, config, seed,
                        total_epochs(config), "joint", resume.epoch if resume else 0,
                        resume.metrics if resume else None, resume.optimizer if resume else None)
    return Checkpoint(p, "joint", lb, le, total_epochs(config), config.s_max, config.escape_mass,
                      l_base, seed, metrics, opt)
