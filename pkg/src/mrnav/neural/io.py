"""Binary weights file.

Layout (little-endian): 8-byte magic, u32 version, u32 prediction horizon,
u32 array count, then per array a table entry (u16 name length, UTF-8
"layer.field" name, u8 ndim, u32 dims), then the arrays' float64 data in
row-major order, in table order.
"""
from __future__ import annotations

import struct

import numpy as np

from .layers import DenseWeights, LstmLayerWeights
from .model import ModelContractError, ModelWeights

MAGIC = b"MRNVWGTS"
VERSION = 1

_LAYER_TYPES = dict(query_encoder=LstmLayerWeights, neighbor_encoder=LstmLayerWeights,
                    obstacle_encoder=DenseWeights, recurrent_decoder=LstmLayerWeights,
                    dense_decoder=DenseWeights, output_layer=DenseWeights)


class WeightsFormatError(ValueError):
    pass


def to_bytes(w: ModelWeights) -> bytes:
    arrays = w.named_arrays()
    out = [MAGIC, struct.pack("<III", VERSION, w.pred_horizon, len(arrays))]
    for layer, name, a in arrays:
        key = f"{layer}.{name}".encode()
        out.append(struct.pack("<H", len(key)) + key + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
    for _, _, a in arrays:
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def from_bytes(raw: bytes) -> ModelWeights:
    if raw[:8] != MAGIC:
        raise WeightsFormatError("not a weights file")
    try:
        version, horizon, count = struct.unpack_from("<III", raw, 8)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        off = 20
        table = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            key = raw[off + 2:off + 2 + n].decode()
            off += 2 + n
            (ndim,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
            off += 1 + 4 * ndim
            table.append((key, shape))
        parts = {}
        for key, shape in table:
            size = int(np.prod(shape)) * 8
            if off + size > len(raw):
                raise WeightsFormatError(f"truncated at {key}")
            parts[key] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=off).reshape(shape).astype(float)
            off += size
    except struct.error as e:
        raise WeightsFormatError(f"corrupt table: {e}") from e
    if off != len(raw):
        raise WeightsFormatError(f"{len(raw) - off} trailing bytes")
    layers = {}
    for layer, cls in _LAYER_TYPES.items():
        names = ("Wx", "Wh", "b") if cls is LstmLayerWeights else ("W", "b")
        try:
            layers[layer] = cls(*[parts[f"{layer}.{n}"] for n in names])
        except KeyError as e:
            raise WeightsFormatError(f"missing array {e.args[0]}") from None
    w = ModelWeights(**layers, pred_horizon=horizon)
    try:
        w.check_consistent()
    except ModelContractError as e:
        raise WeightsFormatError(str(e)) from e
    return w


def save_weights(path, w: ModelWeights):
    with open(path, "wb") as f:
        f.write(to_bytes(w))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as f:
        return from_bytes(f.read())
