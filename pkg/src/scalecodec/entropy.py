"""Quantization, the per-channel discretized logistic model, rate estimates and layer coding."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from . import rangecoder

DEFAULT_S_MAX = 64
DEFAULT_ESCAPE = 2.0 ** -16


@dataclass
class EntropyModel:
    """Fully factorized model: one discretized logistic per channel.

    ``loc`` and ``log_scale`` are 1-D tensors (one entry per channel) and are
    usually views into a :class:`~scalecodec.params.ParameterStore`, so
    gradients flow back into the store during training.
    """

    loc: torch.Tensor
    log_scale: torch.Tensor
    s_max: int = DEFAULT_S_MAX
    escape: float = DEFAULT_ESCAPE
    layer: str = "base"

    @property
    def channels(self) -> int:
        return int(self.loc.shape[0])

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    def channel_slice(self, start: int, stop: int, layer: Optional[str] = None) -> "EntropyModel":
        return EntropyModel(self.loc[start:stop], self.log_scale[start:stop],
                            self.s_max, self.escape, layer or self.layer)

    def likelihood(self, values: torch.Tensor) -> torch.Tensor:
        """Interval mass of ``[v - 0.5, v + 0.5]`` for every element, with the escape floor.

        ``values`` has channels on dim ``-3``; it may hold integers (evaluation)
        or noise-relaxed reals (training).
        """
        if values.shape[-3] != self.channels:
            raise ValueError(
                f"latent has {values.shape[-3]} channels, model has {self.channels}")
        shape = (-1, 1, 1)
        loc = self.loc.reshape(shape).to(values.dtype)
        scale = torch.exp(self.log_scale.to(values.dtype)).reshape(shape)
        s = self.s_max
        # evaluate on the side of the mean where the sigmoid difference is not cancelling
        sign = -torch.sign(values - loc).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        upper = torch.sigmoid(sign * (values + 0.5 - loc) / scale)
        lower = torch.sigmoid(sign * (values - 0.5 - loc) / scale)
        mass = torch.abs(upper - lower)
        norm = torch.sigmoid((s + 0.5 - loc) / scale) - torch.sigmoid((-s - 0.5 - loc) / scale)
        floor = self.escape / (2 * s + 1)
        return (1.0 - self.escape) * mass / norm + floor

    def pmf_table(self, channel: int) -> np.ndarray:
        """Exact float64 pmf over ``-s_max..s_max`` for one channel."""
        mu = float(self.loc[channel])
        sigma = float(np.exp(float(self.log_scale[channel])))
        s = self.s_max
        q = np.arange(-s, s + 1, dtype=np.float64)
        cdf = _logistic_cdf((np.append(q - 0.5, s + 0.5) - mu) / sigma)
        mass = np.diff(cdf)
        if not np.all(mass >= 0):  # pragma: no cover
            raise AssertionError("non-monotone cdf")
        norm = cdf[-1] - cdf[0]
        floor = self.escape / (2 * s + 1)
        if norm <= 0:
            return np.full(q.shape, 1.0 / (2 * s + 1))
        return (1.0 - self.escape) * mass / norm + floor

    def cdf_tables(self):
        """Quantized cumulative tables for the range coder, one per channel."""
        return [rangecoder.cumulative(rangecoder.quantize_pmf(self.pmf_table(c)))
                for c in range(self.channels)]


def _logistic_cdf(z: np.ndarray) -> np.ndarray:
    # scipy.special.expit is numerically the same; keep numpy-only here
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def pmf(model: EntropyModel, channel: int, q: int) -> float:
    if abs(q) > model.s_max:
        raise ValueError(f"symbol {q} outside support [-{model.s_max}, {model.s_max}]")
    return float(model.pmf_table(channel)[q + model.s_max])


def quantize(y: torch.Tensor, mode: str, s_max: int = DEFAULT_S_MAX,
             generator: Optional[torch.Generator] = None,
             noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``round``: half-to-even and clip to the symbol range. ``noise``: additive U(-0.5, 0.5).

    For ``noise`` either pass a seeded ``generator`` or the noise tensor itself.
    """
    if mode == "round":
        return torch.clamp(torch.round(y), -s_max, s_max)
    if mode == "noise":
        if noise is None:
            if generator is None:
                raise ValueError("noise quantization needs a seeded generator or explicit noise")
            noise = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
        return y + noise
    raise ValueError(f"unknown quantization mode {mode!r}")


def estimate_rate_bits(y_hat: torch.Tensor, model: EntropyModel) -> torch.Tensor:
    """Cross-entropy of the latent under ``model`` in bits (differentiable)."""
    return -torch.log2(model.likelihood(y_hat)).sum()


def _symbols(y_hat, s_max) -> np.ndarray:
    arr = y_hat.detach().cpu().numpy() if isinstance(y_hat, torch.Tensor) else np.asarray(y_hat)
    if arr.size and not np.all(arr == np.round(arr)):
        raise ValueError("latent is not integer-quantized")
    sym = arr.astype(np.int64)
    if sym.size and np.abs(sym).max() > s_max:
        raise ValueError(f"symbol magnitude {np.abs(sym).max()} exceeds s_max={s_max}")
    return sym


def encode_layer(y_hat, model: EntropyModel, tables=None) -> bytes:
    """Range-code a quantized (C, h, w) latent, channel-major then row-major.

    ``tables`` may carry precomputed ``model.cdf_tables()`` when coding many latents.
    """
    sym = _symbols(y_hat, model.s_max)
    if sym.ndim != 3 or sym.shape[0] != model.channels:
        raise ValueError(f"expected ({model.channels}, h, w) latent, got {sym.shape}")
    tables = tables or model.cdf_tables()
    per_channel = sym.shape[1] * sym.shape[2]
    flat = (sym.reshape(-1) + model.s_max).tolist()
    return rangecoder.encode_symbols(
        flat, (tables[i // per_channel] for i in range(len(flat))))


def decode_layer(payload: bytes, model: EntropyModel, shape: Tuple[int, int, int],
                 tables=None) -> torch.Tensor:
    c, h, w = shape
    if c != model.channels:
        raise ValueError(f"shape has {c} channels, model has {model.channels}")
    tables = tables or model.cdf_tables()
    per_channel = h * w
    flat = rangecoder.decode_symbols(
        payload, (tables[i // per_channel] for i in range(c * per_channel)))
    arr = np.asarray(flat, dtype=np.int64).reshape(shape) - model.s_max
    return torch.from_numpy(arr.astype(np.float32))
