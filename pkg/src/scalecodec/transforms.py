"""Forward maps of the codec, as pure functions of (input, ParameterStore).

Images are ``(B, 3, H, W)`` tensors (a single ``(3, H, W)`` image is also
accepted and returned unbatched). Inputs, previews and reconstructions live in
[0, 1]; residuals live in [-1, 1]. Latents have ``H/8 x W/8`` spatial size.
"""

from typing import Tuple

import torch
import torch.nn.functional as F

from .params import ParameterStore


def _batched(x: torch.Tensor):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ValueError(f"expected a (C, H, W) or (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    return x, False


def _unbatch(y, squeeze):
    return y.squeeze(0) if squeeze else y


def _check_image(x: torch.Tensor):
    h, w = x.shape[-2:]
    if x.shape[-3] != 3:
        raise ValueError(f"images have 3 channels, got {x.shape[-3]}")
    if h < 8 or w < 8 or h % 8 or w % 8:
        raise ValueError(f"image dims must be multiples of 8 and >= 8, got {h}x{w}")


def _analysis(x, p: ParameterStore, prefix: str):
    _check_image(x)
    w0 = p[f"{prefix}.0.weight"]
    if w0.shape[1] != x.shape[1]:
        raise ValueError(f"{prefix} expects {w0.shape[1]} input channels, got {x.shape[1]}")
    for i in range(3):
        x = F.conv2d(x, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"], stride=2, padding=2)
        if i < 2:
            x = F.gelu(x)
    return x


def _synthesis(y, p: ParameterStore, prefix: str):
    w0 = p[f"{prefix}.0.weight"]
    if w0.shape[0] != y.shape[1]:
        raise ValueError(f"{prefix} expects {w0.shape[0]} latent channels, got {y.shape[1]}")
    for i in range(3):
        y = F.conv_transpose2d(y, p[f"{prefix}.{i}.weight"], p[f"{prefix}.{i}.bias"],
                               stride=2, padding=2, output_padding=1)
        if i < 2:
            y = F.gelu(y)
    return y


def analyze_base(x: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    """Base analysis: three stride-2 5x5 convolutions to ``(L_base, H/8, W/8)``."""
    x, sq = _batched(x)
    return _unbatch(_analysis(x, p, "base.ga"), sq)


def analyze_joint(x: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    """Single analysis emitting ``L_base + L_enh`` channels (parallel-trained baseline)."""
    x, sq = _batched(x)
    return _unbatch(_analysis(x, p, "joint.ga"), sq)


def split_latent(y: torch.Tensor, l_base: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """First ``l_base`` channels form the base slice, the rest the enhancement slice."""
    channels = y.shape[-3]
    if not 0 < l_base < channels:
        raise ValueError(f"l_base={l_base} must lie strictly between 0 and {channels}")
    return y[..., :l_base, :, :], y[..., l_base:, :, :]


def _lst(y, p, prefix):
    w0 = p[f"{prefix}.0.weight"]
    if w0.shape[1] != y.shape[1]:
        raise ValueError(f"LST expects {w0.shape[1]} latent channels, got {y.shape[1]}")
    h = F.gelu(F.conv2d(y, w0, p[f"{prefix}.0.bias"], padding=1))
    h = F.interpolate(h, scale_factor=2, mode="nearest")
    return F.conv2d(h, p[f"{prefix}.1.weight"], p[f"{prefix}.1.bias"], padding=1)


def lst_apply(y_hat: torch.Tensor, p: ParameterStore, prefix: str = "lst") -> torch.Tensor:
    """Latent Space Transform: base latent ``(L_base, h, w)`` to task features ``(F, 2h, 2w)``.

    ``prefix="joint.lst"`` selects the baseline's own LST.
    """
    y_hat, sq = _batched(y_hat)
    return _unbatch(_lst(y_hat, p, prefix), sq)


def synthesize_preview(y_hat: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    """1x1 channel adapter followed by a three-stage synthesis; clamped to [0, 1]."""
    y_hat, sq = _batched(y_hat)
    w = p["preview.adapt.weight"]
    if w.shape[1] != y_hat.shape[1]:
        raise ValueError(f"preview expects {w.shape[1]} latent channels, got {y_hat.shape[1]}")
    h = F.conv2d(y_hat, w, p["preview.adapt.bias"])
    return _unbatch(torch.clamp(_synthesis(h, p, "preview.gs"), 0.0, 1.0), sq)


def analyze_residual(x_res: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    x_res, sq = _batched(x_res)
    if x_res.numel() and (x_res.min() < -1.0 or x_res.max() > 1.0):
        raise ValueError("residual images must lie in [-1, 1]")
    w = p["residual.ga.0.weight"]
    return _unbatch(_analysis(x_res.to(w.dtype), p, "residual.ga"), sq)


def synthesize_residual(y_hat: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    y_hat, sq = _batched(y_hat)
    return _unbatch(torch.clamp(_synthesis(y_hat, p, "residual.gs"), -1.0, 1.0), sq)


def synthesize_joint(y_hat: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    """Baseline reconstruction from the full (base + enhancement) latent."""
    y_hat, sq = _batched(y_hat)
    return _unbatch(torch.clamp(_synthesis(y_hat, p, "joint.gs"), 0.0, 1.0), sq)


def residual_image(x: torch.Tensor, preview: torch.Tensor) -> torch.Tensor:
    """``x - preview`` in float64, which is exact for float32 pixels above 2**-29."""
    if x.shape != preview.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(preview.shape)}")
    return x.double() - preview.double()


def reconstruct(preview: torch.Tensor, residual_hat: torch.Tensor) -> torch.Tensor:
    """Preview plus decoded residual, clamped to [0, 1]."""
    if preview.shape != residual_hat.shape:
        raise ValueError(f"shape mismatch {tuple(preview.shape)} vs {tuple(residual_hat.shape)}")
    out = torch.clamp(preview.double() + residual_hat.double(), 0.0, 1.0)
    return out.to(preview.dtype)
