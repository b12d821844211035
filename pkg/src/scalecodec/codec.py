"""Image-level encode/decode through the container, and dataset evaluation.

Base layer only: ``analyze -> round -> range code`` and on the decoder
``decode -> LST -> task tail``. With the enhancement layer the decoder also
synthesizes the preview and adds the decoded residual.
"""

from typing import Dict, Optional

import numpy as np
import torch

from . import transforms as T
from .container import (HEADER_SIZE, LAYER_BASE, LAYER_ENH, LAYER_RECORD_SIZE, ContainerError,
                        Layer, pack_container, unpack_container)
from .entropy import decode_layer, encode_layer, quantize
from .evaluation import bpp as bits_per_pixel
from .evaluation import psnr
from .taskproxy import TaskProxy, classify_from_features
from .training import Checkpoint, entropy_model


class ModelMismatchError(ContainerError):
    pass


class _Models:
    """Entropy models and their coder tables for one checkpoint (tables built once)."""

    def __init__(self, ckpt: Checkpoint):
        p, s, e = ckpt.params, ckpt.s_max, ckpt.escape
        self.ckpt = ckpt
        if ckpt.kind == "joint":
            em = entropy_model(p, "joint.em", s, e, "joint")
            self.base = em.channel_slice(0, ckpt.l_base, "base")
            self.enh = em.channel_slice(ckpt.l_base, em.channels, "enh")
        else:
            self.base = entropy_model(p, "base.em", s, e, "base")
            self.enh = entropy_model(p, "residual.em", s, e, "enh") if "residual.em.loc" in p else None
        with torch.no_grad():
            self.base_tables = self.base.cdf_tables()
            self.enh_tables = self.enh.cdf_tables() if self.enh is not None else None


def _models(ckpt, cache: Optional[_Models]) -> _Models:
    return cache if cache is not None and cache.ckpt is ckpt else _Models(ckpt)


def latents(x: torch.Tensor, ckpt: Checkpoint, with_enh: bool):
    """Rounded ``(base, enh or None, preview or None)`` for an image batch."""
    p = ckpt.params
    with torch.no_grad():
        if ckpt.kind == "joint":
            y = quantize(T.analyze_joint(x, p), "round", ckpt.s_max)
            yb, ye = T.split_latent(y, ckpt.l_base)
            return yb, (ye if with_enh else None), None
        yb = quantize(T.analyze_base(x, p), "round", ckpt.s_max)
        if not with_enh:
            return yb, None, None
        if ckpt.kind != "enh":
            raise ValueError("base+enh coding needs an enhancement checkpoint")
        preview = T.synthesize_preview(yb, p)
        ye = quantize(T.analyze_residual(T.residual_image(x, preview), p), "round", ckpt.s_max)
        return yb, ye, preview


def encode_image(x: torch.Tensor, ckpt: Checkpoint, layers: str = "base",
                 models: Optional[_Models] = None) -> bytes:
    """Encode one ``(3, H, W)`` image into a ``.shmc`` byte string."""
    if layers not in ("base", "base+enh"):
        raise ValueError(f"layers must be 'base' or 'base+enh', got {layers!r}")
    m = _models(ckpt, models)
    yb, ye, _ = latents(x.unsqueeze(0), ckpt, layers == "base+enh")
    recs = [Layer(LAYER_BASE, tuple(yb.shape[1:]), encode_layer(yb[0], m.base, m.base_tables))]
    if ye is not None:
        recs.append(Layer(LAYER_ENH, tuple(ye.shape[1:]), encode_layer(ye[0], m.enh, m.enh_tables)))
    return pack_container(recs, tuple(x.shape[-2:]), ckpt.model_hash())


def decode_image(data: bytes, ckpt: Checkpoint, models: Optional[_Models] = None) -> Dict:
    """Decode a container: base latent, task features and class probabilities, plus the
    reconstruction when the checkpoint has an image synthesis path."""
    c = unpack_container(data)
    if c.model_hash != ckpt.model_hash():
        raise ModelMismatchError(
            f"bitstream model hash {c.model_hash:08x} != checkpoint hash {ckpt.model_hash():08x}")
    m = _models(ckpt, models)
    p = ckpt.params
    base = c.layer(LAYER_BASE)
    yb = decode_layer(base.payload, m.base, base.shape, m.base_tables).unsqueeze(0)
    has_enh = any(lay.layer_id == LAYER_ENH for lay in c.layers)
    out = {"height": c.height, "width": c.width, "y_base": yb[0], "layers": len(c.layers)}
    with torch.no_grad():
        prefix = "joint.lst" if ckpt.kind == "joint" else "lst"
        feats = T.lst_apply(yb, p, prefix=prefix)
        probs = classify_from_features(feats, ckpt.proxy())
        out.update(features=feats[0], probs=probs[0], label=int(probs[0].argmax()))
        if ckpt.kind == "enh":
            preview = T.synthesize_preview(yb, p)
            residual = torch.zeros_like(preview)
            if has_enh:
                enh = c.layer(LAYER_ENH)
                ye = decode_layer(enh.payload, m.enh, enh.shape, m.enh_tables).unsqueeze(0)
                residual = T.synthesize_residual(ye, p)
            out.update(preview=preview[0], reconstruction=T.reconstruct(preview, residual)[0])
        elif ckpt.kind == "joint":
            if has_enh:
                enh = c.layer(LAYER_ENH)
                ye = decode_layer(enh.payload, m.enh, enh.shape, m.enh_tables).unsqueeze(0)
            else:
                ye = torch.zeros((1, m.enh.channels) + tuple(base.shape[1:]))
            out["reconstruction"] = T.synthesize_joint(torch.cat([yb, ye], dim=1), p)[0]
    return out


def _overhead_bytes(n_layers: int) -> int:
    return HEADER_SIZE + n_layers * LAYER_RECORD_SIZE


def evaluate_base(ckpt: Checkpoint, dataset, coder: bool = True, proxy: Optional[TaskProxy] = None,
                  batch_size: int = 256) -> Dict[str, float]:
    """Mean base-layer bpp (container bytes) and top-1 accuracy over ``dataset``.

    With ``coder=False`` the range coder is skipped: features come straight
    from the rounded latent and the rate is the model's cross-entropy plus
    the container overhead.
    """
    proxy = proxy or ckpt.proxy()
    m = _Models(ckpt)
    prefix = "joint.lst" if ckpt.kind == "joint" else "lst"
    h, w = dataset.images.shape[-2:]
    bits, correct = [], 0
    for _, x, y in dataset.batches(batch_size):
        yb, _, _ = latents(x, ckpt, False)
        if coder:
            decoded = []
            for i in range(len(x)):
                payload = encode_layer(yb[i], m.base, m.base_tables)
                bits.append(8 * (_overhead_bytes(1) + len(payload)))
                decoded.append(decode_layer(payload, m.base, tuple(yb.shape[1:]), m.base_tables))
            yb = torch.stack(decoded)
        else:
            with torch.no_grad():
                est = -torch.log2(m.base.likelihood(yb.double())).sum(dim=(1, 2, 3))
            bits.extend((8 * _overhead_bytes(1) + est).tolist())
        with torch.no_grad():
            probs = classify_from_features(T.lst_apply(yb, ckpt.params, prefix=prefix), proxy)
        correct += int((probs.argmax(1) == y).sum())
    return {"bpp": float(np.mean(bits)) / (h * w), "accuracy": correct / len(dataset)}


def evaluate_reconstruction(ckpt: Checkpoint, dataset, coder: bool = True,
                            batch_size: int = 256) -> Dict[str, float]:
    """Mean total bpp (base + enhancement container) and mean per-image PSNR."""
    if ckpt.kind not in ("enh", "joint"):
        raise ValueError("reconstruction needs an enhancement or joint checkpoint")
    m = _Models(ckpt)
    h, w = dataset.images.shape[-2:]
    bits, psnrs, preview_psnrs = [], [], []
    for _, x, _ in dataset.batches(batch_size):
        if coder:
            for i in range(len(x)):
                data = encode_image(x[i], ckpt, "base+enh", m)
                bits.append(8 * len(data))
                out = decode_image(data, ckpt, m)
                psnrs.append(psnr(x[i], out["reconstruction"]))
                if "preview" in out:
                    preview_psnrs.append(psnr(x[i], out["preview"]))
            continue
        yb, ye, preview = latents(x, ckpt, True)
        with torch.no_grad():
            est = (-torch.log2(m.base.likelihood(yb.double())).sum(dim=(1, 2, 3))
                   - torch.log2(m.enh.likelihood(ye.double())).sum(dim=(1, 2, 3)))
            bits.extend((8 * _overhead_bytes(2) + est).tolist())
            if ckpt.kind == "joint":
                rec = T.synthesize_joint(torch.cat([yb, ye], dim=1), ckpt.params)
            else:
                rec = T.reconstruct(preview, T.synthesize_residual(ye, ckpt.params))
                preview_psnrs.extend(psnr(a, b) for a, b in zip(x, preview))
        psnrs.extend(psnr(a, b) for a, b in zip(x, rec))
    out = {"bpp": float(np.mean(bits)) / (h * w), "psnr": float(np.mean(psnrs))}
    if preview_psnrs:
        out["preview_psnr"] = float(np.mean(preview_psnrs))
    return out
