"""Binary parameter checkpoints.

Layout: magic ``AEDA1``, then per layer in stack order a kind byte
(0 conv, 1 dense), the weight shape as u32 rank followed by u32 dims, the
weights and then the bias as little-endian float64, and a frozen flag byte.
The bias length is the first weight dimension.
"""
import io
import struct

import numpy as np

from .tensor import LayerParams, Tensor

MAGIC = b"AEDA1"
_KINDS = {"conv": 0, "dense": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


class CheckpointError(ValueError):
    pass


def dumps(layers):
    buf = io.BytesIO()
    buf.write(MAGIC)
    for layer in layers:
        w = layer.weights.data
        buf.write(struct.pack("<B", _KINDS[layer.kind]))
        buf.write(struct.pack(f"<I{w.ndim}I", w.ndim, *w.shape))
        buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias.data, dtype="<f8").tobytes())
        buf.write(struct.pack("<B", 1 if layer.frozen else 0))
    return buf.getvalue()


def loads(blob):
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an AEDA1 checkpoint")
    pos = len(MAGIC)
    layers = []
    try:
        while pos < len(blob):
            (kind,) = struct.unpack_from("<B", blob, pos)
            (rank,) = struct.unpack_from("<I", blob, pos + 1)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 5)
            pos += 5 + 4 * rank
            count = int(np.prod(dims))
            w = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            b = np.frombuffer(blob, dtype="<f8", count=dims[0], offset=pos)
            pos += 8 * dims[0]
            (frozen,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            layers.append(
                LayerParams(_KIND_NAMES[kind], Tensor(w.astype(np.float64)), Tensor(b.astype(np.float64)), bool(frozen))
            )
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint at byte {pos}") from exc
    return layers


def save(path, layers):
    with open(path, "wb") as fh:
        fh.write(dumps(layers))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
