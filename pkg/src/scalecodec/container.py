"""The ``.shmc`` multi-layer bitstream container.

Layout (all integers little-endian)::

    magic "SHMC" | version u8 | model hash u32 | H u16 | W u16 | layer count u8
    per layer: id u8 | channels u16 | latent h u16 | latent w u16 | payload length u32 | payload

Bitstreams never carry weights; decoding requires the checkpoint whose hash
matches ``model_hash``.
"""

import struct
from dataclasses import dataclass, field
from typing import List

MAGIC = b"SHMC"
VERSION = 1

LAYER_BASE = 0
LAYER_ENH = 1

_HEADER = struct.Struct("<4sBIHHB")
_LAYER = struct.Struct("<BHHHI")

HEADER_SIZE = _HEADER.size
LAYER_RECORD_SIZE = _LAYER.size


class ContainerError(ValueError):
    pass


@dataclass
class Layer:
    layer_id: int
    shape: tuple  # (channels, h, w)
    payload: bytes


@dataclass
class Container:
    height: int
    width: int
    model_hash: int
    layers: List[Layer] = field(default_factory=list)
    version: int = VERSION

    def layer(self, layer_id: int) -> Layer:
        for lay in self.layers:
            if lay.layer_id == layer_id:
                return lay
        raise ContainerError(f"container has no layer {layer_id}")


def pack_container(layers, dims, model_hash: int) -> bytes:
    """Serialize ``layers`` (``Layer`` or ``(id, shape, payload)`` tuples) for an H×W image."""
    height, width = dims
    layers = [lay if isinstance(lay, Layer) else Layer(*lay) for lay in layers]
    if not layers:
        raise ContainerError("a container needs at least one layer")
    if len(layers) > 255:
        raise ContainerError(f"too many layers ({len(layers)} > 255)")
    if not (0 < height < 1 << 16 and 0 < width < 1 << 16):
        raise ContainerError(f"image dims {height}x{width} do not fit u16")
    out = bytearray(_HEADER.pack(MAGIC, VERSION, model_hash & 0xFFFFFFFF,
                                 height, width, len(layers)))
    for lay in layers:
        c, h, w = lay.shape
        if len(lay.payload) > 0xFFFFFFFF:
            raise ContainerError("payload longer than 2**32 - 1 bytes")
        out += _LAYER.pack(lay.layer_id, c, h, w, len(lay.payload))
        out += lay.payload
    return bytes(out)


def unpack_container(data: bytes) -> Container:
    if len(data) < HEADER_SIZE:
        raise ContainerError("truncated header")
    magic, version, model_hash, height, width, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = HEADER_SIZE
    layers = []
    for _ in range(count):
        if pos + LAYER_RECORD_SIZE > len(data):
            raise ContainerError("truncated layer record")
        layer_id, c, h, w, length = _LAYER.unpack_from(data, pos)
        pos += LAYER_RECORD_SIZE
        if pos + length > len(data):
            raise ContainerError(f"layer {layer_id} payload truncated")
        layers.append(Layer(layer_id, (c, h, w), bytes(data[pos:pos + length])))
        pos += length
    if pos != len(data):
        raise ContainerError(f"{len(data) - pos} trailing bytes after last layer")
    return Container(height, width, model_hash, layers, version)
