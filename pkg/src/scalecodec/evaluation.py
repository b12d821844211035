"""Quality metrics, rate-quality curves, BD-Rate, break-even analysis and the discrete IB check."""

import csv
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
BD_SAMPLES = 1000


class CurveError(ValueError):
    pass


def psnr(x, x_hat) -> float:
    """PSNR in dB for images in [0, 1]; 100 dB when the images (almost) match."""
    x = torch.as_tensor(x, dtype=torch.float64)
    x_hat = torch.as_tensor(x_hat, dtype=torch.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    mse = float(torch.mean((x - x_hat) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def bpp(container_bytes: int, height: int, width: int) -> float:
    if height * width <= 0:
        raise ValueError("image has no pixels")
    return 8.0 * container_bytes / (height * width)


@dataclass
class RateQualityCurve:
    """Points ``(bpp, quality)`` sorted by rate.

    ``quality_kind`` is ``"accuracy"`` (percent) or ``"psnr"`` (dB). Points
    whose quality drops as rate grows are kept and reported by
    :meth:`violations`; use :meth:`pareto` to drop them explicitly.
    """

    bpp: np.ndarray
    quality: np.ndarray
    label: str = ""
    quality_kind: str = "accuracy"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rate = np.asarray(self.bpp, dtype=np.float64)
        qual = np.asarray(self.quality, dtype=np.float64)
        if rate.shape != qual.shape or rate.ndim != 1:
            raise CurveError("bpp and quality must be 1-D and the same length")
        if len(rate) < 2:
            raise CurveError(f"curve {self.label!r} needs at least 2 points, got {len(rate)}")
        if np.any(rate <= 0) or not np.all(np.isfinite(rate)) or not np.all(np.isfinite(qual)):
            raise CurveError("bpp must be positive and all values finite")
        order = np.argsort(rate, kind="stable")
        rate, qual = rate[order], qual[order]
        if np.any(np.diff(rate) <= 0):
            raise CurveError(f"curve {self.label!r} has duplicate bpp values")
        self.bpp, self.quality = rate, qual

    def __len__(self):
        return len(self.bpp)

    def violations(self) -> List[Tuple[int, float]]:
        """Adjacent pairs ``(i, drop)`` where quality falls from point i to i+1."""
        diffs = np.diff(self.quality)
        return [(int(i), float(-diffs[i])) for i in np.flatnonzero(diffs < 0)]

    def pareto(self) -> "RateQualityCurve":
        """Keep only points that beat every cheaper point's quality."""
        keep = []
        best = -np.inf
        for i, q in enumerate(self.quality):
            if q > best:
                keep.append(i)
                best = q
        return RateQualityCurve(self.bpp[keep], self.quality[keep], self.label,
                                self.quality_kind, dict(self.meta, pareto_dropped=len(self) - len(keep)))

    def shifted(self, quality_offset=0.0, rate_scale=1.0) -> "RateQualityCurve":
        return RateQualityCurve(self.bpp * rate_scale, self.quality + quality_offset,
                                self.label, self.quality_kind, dict(self.meta))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("bpp,quality\n")
            for r, q in zip(self.bpp, self.quality):
                fh.write(f"{r:.9g},{q:.9g}\n")

    @classmethod
    def from_csv(cls, path, label=None, quality_kind="accuracy") -> "RateQualityCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"bpp", "quality"}:
            raise CurveError(f"{path}: expected header 'bpp,quality'")
        return cls([float(r["bpp"]) for r in rows], [float(r["quality"]) for r in rows],
                   label or os.path.splitext(os.path.basename(path))[0], quality_kind)


@dataclass
class BDResult:
    percent: float
    overlap: Tuple[float, float]
    warning: Optional[str] = None

    def __float__(self):
        return self.percent


def _log_rate_interp(curve: RateQualityCurve):
    if len(curve) < 4:
        raise CurveError(f"curve {curve.label!r} has {len(curve)} points; BD needs at least 4")
    if np.any(np.diff(curve.quality) <= 0):
        raise CurveError(f"curve {curve.label!r} is not strictly increasing in quality; "
                         "call .pareto() first if dropping points is acceptable")
    return PchipInterpolator(curve.quality, np.log10(curve.bpp), extrapolate=False)


def bd_rate_detail(reference: RateQualityCurve, test: RateQualityCurve,
                   samples: int = BD_SAMPLES) -> BDResult:
    ref_f = _log_rate_interp(reference)
    test_f = _log_rate_interp(test)
    lo = max(reference.quality[0], test.quality[0])
    hi = min(reference.quality[-1], test.quality[-1])
    if not hi > lo:
        raise CurveError("curves have no overlapping quality range")
    grid = np.linspace(lo, hi, samples)
    # clip guards the endpoints against round-off outside the knot range
    grid = np.clip(grid, lo, hi)
    diff = test_f(grid) - ref_f(grid)
    mean_diff = trapezoid(diff, grid) / (hi - lo)
    note = None
    spans = [c.quality[-1] - c.quality[0] for c in (reference, test)]
    if (hi - lo) < 0.1 * max(spans):
        note = f"quality overlap {hi - lo:.4g} is under 10% of a curve span"
        warnings.warn(note)
    return BDResult(float((10.0 ** mean_diff - 1.0) * 100.0), (float(lo), float(hi)), note)


def bd_rate(reference: RateQualityCurve, test: RateQualityCurve) -> float:
    """Average rate difference (percent) of ``test`` against ``reference`` at equal quality.

    Log10 rate is interpolated against quality with a shape-preserving
    piecewise cubic and averaged over the common quality interval.
    Negative means ``test`` needs fewer bits.
    """
    return bd_rate_detail(reference, test).percent


def relative_rate(f: float, r_b: float, r_t: float) -> float:
    """Expected scalable rate over single-layer rate when a fraction ``f`` of streams are viewed."""
    return (1.0 - f) * r_b + f * r_t


def break_even(r_b: float, r_t: float) -> float:
    """Largest viewing fraction in [0, 1] at which the scalable codec is not worse.

    ``r_b`` is base rate / single-layer rate, ``r_t`` is (base + enhancement)
    rate / single-layer rate.
    """
    if not (r_b > 0 and r_t > 0) or not (math.isfinite(r_b) and math.isfinite(r_t)):
        raise ValueError(f"rate ratios must be finite and positive, got r_b={r_b}, r_t={r_t}")
    if r_t > r_b:
        return min(1.0, max(0.0, (1.0 - r_b) / (r_t - r_b)))
    return 1.0 if max(r_b, r_t) <= 1.0 else 0.0


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def ib_discrete_check(encoder_table: Union[Mapping, Sequence, np.ndarray], px) -> Tuple[float, float, float]:
    """Exact ``H(Y)``, ``H(Y|X)`` and ``I(X;Y)`` for a finite encoder, by enumeration.

    ``encoder_table`` is either a deterministic map (dict or sequence,
    ``x -> y``) or a row-stochastic matrix ``p(y|x)``. The mutual information
    is computed from the joint directly, not as ``H(Y) - H(Y|X)``.
    """
    px = np.asarray(px, dtype=np.float64)
    if px.ndim != 1 or np.any(px < 0) or abs(px.sum() - 1.0) > 1e-9:
        raise ValueError("px must be a normalized probability vector")
    n = px.size
    deterministic = not (isinstance(encoder_table, np.ndarray) and encoder_table.ndim == 2)
    if not deterministic:
        cond = np.asarray(encoder_table, dtype=np.float64)
        if cond.shape[0] != n or np.any(np.abs(cond.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("conditional table must have one normalized row per input")
    else:
        if isinstance(encoder_table, Mapping):
            outputs = [encoder_table[x] for x in range(n)]
        else:
            outputs = list(encoder_table)
        if len(outputs) != n:
            raise ValueError(f"encoder maps {len(outputs)} inputs, px has {n}")
        codes = {y: i for i, y in enumerate(dict.fromkeys(outputs))}
        cond = np.zeros((n, len(codes)))
        cond[np.arange(n), [codes[y] for y in outputs]] = 1.0
    joint = px[:, None] * cond
    py = joint.sum(axis=0)
    h_y = _entropy_bits(py)
    nz = joint > 0
    h_y_given_x = float(-(joint[nz] * np.log2(cond[nz])).sum()) + 0.0
    outer = px[:, None] * py[None, :]
    i_xy = float((joint[nz] * np.log2(joint[nz] / outer[nz])).sum())
    if deterministic:
        # a deterministic encoder carries no noise: all of H(Y) is information about X
        assert h_y_given_x == 0.0, h_y_given_x
        assert abs(i_xy - h_y) <= 1e-9 * max(1.0, h_y), (i_xy, h_y)
    return h_y, h_y_given_x, i_xy


def emit_report(curves: Sequence[RateQualityCurve], bd_results: Mapping[str, float],
                break_even_results: Mapping[str, float], path,
                config_hashes: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    """Write one ``<label>.csv`` per curve plus ``summary.json`` into directory ``path``."""
    if not curves:
        raise ValueError("emit_report needs at least one curve")
    os.makedirs(path, exist_ok=True)
    written = {}
    for curve in curves:
        name = curve.label or f"curve{len(written)}"
        out = os.path.join(path, f"{name}.csv")
        curve.to_csv(out)
        written[name] = out
    summary = {
        "curves": {c.label: {"quality_kind": c.quality_kind, "points": len(c),
                             "violations": c.violations()} for c in curves},
        "bd_rate_percent": {k: float(v) for k, v in bd_results.items()},
        "break_even": {k: float(v) for k, v in break_even_results.items()},
        "config_hashes": dict(config_hashes or {}),
    }
    out = os.path.join(path, "summary.json")
    with open(out, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written["summary"] = out
    return written


def build_curve(checkpoints, dataset, metric: str = "accuracy", label: str = "",
                coder: bool = True, proxy=None) -> RateQualityCurve:
    """Evaluate a λ-sweep of checkpoints on ``dataset`` and return the sorted curve.

    ``metric="accuracy"`` measures the base layer (percent top-1 through the
    task proxy); ``metric="psnr"`` measures base+enhancement reconstruction
    against the total container rate.
    """
    from . import codec

    if len(checkpoints) < 1:
        raise CurveError("no checkpoints")
    rates, quals = [], []
    for ckpt in checkpoints:
        if metric == "accuracy":
            res = codec.evaluate_base(ckpt, dataset, coder=coder, proxy=proxy)
            rates.append(res["bpp"])
            quals.append(100.0 * res["accuracy"])
        elif metric == "psnr":
            res = codec.evaluate_reconstruction(ckpt, dataset, coder=coder)
            rates.append(res["bpp"])
            quals.append(res["psnr"])
        else:
            raise ValueError(f"unknown metric {metric!r}")
    rates, quals = np.asarray(rates), np.asarray(quals)
    order = np.argsort(rates, kind="stable")
    keep = [order[0]]
    for i in order[1:]:
        if abs(rates[i] - rates[keep[-1]]) < 1e-9:
            warnings.warn(f"collapsing duplicate bpp {rates[i]:.6g} in curve {label!r}")
            continue
        keep.append(i)
    if len(keep) < 2:
        raise CurveError("fewer than 2 distinct operating points; a curve needs at least 2")
    return RateQualityCurve(rates[keep], quals[keep], label,
                            "accuracy" if metric == "accuracy" else "psnr")
