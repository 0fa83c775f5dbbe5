"""Binary weight files (``.twm``).

Layout, all little-endian::

    b"TWNN" | version u32 | layer count u32
    per layer: kind tag u8 | array count u32
        per array: ndim u32 | dims u32 * ndim | float64 data, row-major

Loading never builds a model: it fills an already constructed stack of layers
and refuses files whose kinds or shapes disagree with it.
"""

import struct

import numpy as np

from twinforge.exceptions import ValidationError

MAGIC = b"TWNN"
VERSION = 1
KIND_TAGS = {"dense": 1, "layernorm": 2, "dropout": 3, "bigru": 4}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


def dump_layers(layers):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(layers))
    for layer in layers:
        arrays = list(layer.params.values())
        buf += struct.pack("<BI", KIND_TAGS[layer.kind], len(arrays))
        for a in arrays:
            buf += struct.pack("<I", a.ndim)
            buf += struct.pack(f"<{a.ndim}I", *a.shape)
            buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    return bytes(buf)


def save_weights(path, layers):
    with open(path, "wb") as fh:
        fh.write(dump_layers(layers))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ValidationError("weight file truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out


def load_layers(data, layers):
    """Copy parameters from ``data`` into ``layers`` in place."""
    if data[:4] != MAGIC:
        raise ValidationError("not a TWNN weight file (bad magic)")
    r = _Reader(data)
    r.pos = 4
    version, count = r.take("<II")
    if version != VERSION:
        raise ValidationError(f"unsupported weight file version {version}")
    if count != len(layers):
        raise ValidationError(f"weight file has {count} layers, architecture has {len(layers)}")
    staged = []
    for i, layer in enumerate(layers):
        tag, n_arrays = r.take("<BI")
        kind = TAG_KINDS.get(tag)
        if kind != layer.kind:
            raise ValidationError(f"layer {i}: file has kind {kind!r}, architecture has {layer.kind!r}")
        targets = list(layer.params.values())
        if n_arrays != len(targets):
            raise ValidationError(f"layer {i}: expected {len(targets)} arrays, file has {n_arrays}")
        for target in targets:
            (ndim,) = r.take("<I")
            shape = r.take(f"<{ndim}I")
            if tuple(shape) != target.shape:
                raise ValidationError(
                    f"layer {i}: shape {tuple(shape)} does not match architecture {target.shape}"
                )
            n = int(np.prod(shape)) if ndim else 1
            raw = r.take(f"<{n}d")
            staged.append((target, np.asarray(raw, dtype=np.float64).reshape(shape)))
    if r.pos != len(data):
        raise ValidationError("trailing bytes after last layer")
    for target, values in staged:
        target[...] = values
    return layers


def load_weights(path, layers):
    with open(path, "rb") as fh:
        return load_layers(fh.read(), layers)
