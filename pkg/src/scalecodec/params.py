"""Named float32 parameter arrays with role tags, hashing and seeded initialization.

A parameter's role is the prefix of its name before the first dot
(``base.ga.0.weight`` has role ``base``).
"""

import zlib
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np
import torch

ROLES = ("base", "lst", "preview", "residual", "joint", "taskproxy")


def role_of(name: str) -> str:
    return name.split(".", 1)[0]


def substream_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random stream (``init``, ``noise``, ``shuffle``...)."""
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64),
                                spawn_key=(zlib.crc32(stream.encode()),))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 32 | int(lo)) & ((1 << 63) - 1)


def generator(seed: int, stream: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, stream))
    return g


class ParameterStore:
    """Ordered mapping ``name -> tensor``; every array is 32-bit real when persisted."""

    def __init__(self, tensors: Optional[Dict[str, torch.Tensor]] = None):
        self._t: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for k, v in (tensors or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._t[name]

    def __setitem__(self, name: str, value: torch.Tensor):
        if role_of(name) not in ROLES:
            raise KeyError(f"parameter {name!r} has unknown role {role_of(name)!r}")
        self._t[name] = value

    def __contains__(self, name) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def names(self, role: Optional[str] = None):
        return [n for n in self._t if role is None or role_of(n) == role]

    def roles(self):
        return sorted({role_of(n) for n in self._t})

    def subset(self, roles: Iterable[str]) -> "ParameterStore":
        roles = set(roles)
        return ParameterStore({n: t for n, t in self._t.items() if role_of(n) in roles})

    def update(self, other: "ParameterStore"):
        for n, t in other.items():
            self[n] = t

    def clone(self, dtype: Optional[torch.dtype] = None, requires_grad: bool = False) -> "ParameterStore":
        out = ParameterStore()
        for n, t in self._t.items():
            c = t.detach().clone()
            if dtype is not None:
                c = c.to(dtype)
            out[n] = c.requires_grad_(requires_grad)
        return out

    def has_role(self, role: str) -> bool:
        return any(role_of(n) == role for n in self._t)

    def require(self, role: str):
        if not self.has_role(role):
            raise KeyError(f"parameter store has no {role!r} parameters")

    def hash(self, roles: Optional[Iterable[str]] = None) -> int:
        """CRC-32 over names, shapes and float32 little-endian bytes (sorted by name)."""
        roles = set(roles) if roles is not None else None
        crc = 0
        for name in sorted(self._t):
            if roles is not None and role_of(name) not in roles:
                continue
            arr = self.numpy(name)
            crc = zlib.crc32(name.encode("utf-8"), crc)
            crc = zlib.crc32(np.asarray(arr.shape, dtype="<u4").tobytes(), crc)
            crc = zlib.crc32(arr.tobytes(), crc)
        return crc

    def numpy(self, name: str) -> np.ndarray:
        return np.ascontiguousarray(self._t[name].detach().cpu().numpy().astype("<f4"))

    def __repr__(self):
        return f"ParameterStore({len(self)} arrays, roles={self.roles()}, hash={self.hash():08x})"


def _conv_shapes(cin: int, hidden: int, cout: int, k: int = 5):
    return [(hidden, cin, k, k), (hidden, hidden, k, k), (cout, hidden, k, k)]


def _tconv_shapes(cin: int, hidden: int, cout: int, k: int = 5):
    # conv_transpose2d weights are (in, out, k, k)
    return [(cin, hidden, k, k), (hidden, hidden, k, k), (hidden, cout, k, k)]


def param_shapes(config, roles=ROLES) -> Dict[str, Tuple[int, ...]]:
    """Documented parameter layout for the codec roles (the task proxy is separate)."""
    n, lb, le, f = config.hidden, config.l_base, config.l_enh, config.feature_channels
    shapes: Dict[str, Tuple[int, ...]] = OrderedDict()

    def stack(prefix, ws, bias_dim):
        for i, w in enumerate(ws):
            shapes[f"{prefix}.{i}.weight"] = w
            shapes[f"{prefix}.{i}.bias"] = (w[bias_dim],)

    def lst(prefix, cin):
        shapes[f"{prefix}.0.weight"] = (n, cin, 3, 3)
        shapes[f"{prefix}.0.bias"] = (n,)
        shapes[f"{prefix}.1.weight"] = (f, n, 3, 3)
        shapes[f"{prefix}.1.bias"] = (f,)

    if "base" in roles:
        stack("base.ga", _conv_shapes(3, n, lb), 0)
        shapes["base.em.loc"] = (lb,)
        shapes["base.em.log_scale"] = (lb,)
    if "lst" in roles:
        lst("lst", lb)
    if "preview" in roles:
        shapes["preview.adapt.weight"] = (n, lb, 1, 1)
        shapes["preview.adapt.bias"] = (n,)
        stack("preview.gs", _tconv_shapes(n, n, 3), 1)
    if "residual" in roles:
        stack("residual.ga", _conv_shapes(3, n, le), 0)
        stack("residual.gs", _tconv_shapes(le, n, 3), 1)
        shapes["residual.em.loc"] = (le,)
        shapes["residual.em.log_scale"] = (le,)
    if "joint" in roles:
        stack("joint.ga", _conv_shapes(3, n, lb + le), 0)
        stack("joint.gs", _tconv_shapes(lb + le, n, 3), 1)
        lst("joint.lst", lb)
        shapes["joint.em.loc"] = (lb + le,)
        shapes["joint.em.log_scale"] = (lb + le,)
    return shapes


# final synthesis biases start mid-gray so the [0, 1] clamp starts inactive
_MID_GRAY_BIASES = ("preview.gs.2.bias", "joint.gs.2.bias")


def init_params(config, seed: int, roles=("base", "lst", "preview", "residual", "joint")) -> ParameterStore:
    """Uniform fan-in initialization, deterministic in ``seed``; biases and entropy parameters start at zero."""
    for key in ("l_base", "l_enh", "hidden", "feature_channels"):
        if getattr(config, key) <= 0:
            raise ValueError(f"{key} must be positive, got {getattr(config, key)}")
    gen = generator(seed, "init")
    store = ParameterStore()
    for name, shape in param_shapes(config, roles).items():
        if name.endswith(".weight"):
            tconv = ".gs." in name
            fan_in = (shape[0] if tconv else shape[1]) * shape[2] * shape[3]
            if tconv:
                fan_in = max(1, fan_in // 4)  # stride-2 transpose: ~1/4 of taps hit each output
            bound = 1.0 / np.sqrt(fan_in)
            t = (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound
        else:
            t = torch.zeros(shape)
            if name in _MID_GRAY_BIASES:
                t += 0.5
        store[name] = t.float()
    return store
