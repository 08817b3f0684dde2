"""IVT binary volumes and IVTW network-weight blobs (little-endian, first dim fastest)."""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"IVT1"
WEIGHTS_MAGIC = b"IVTW"


class FormatError(ValueError):
    pass


def encode(arr):
    arr = np.asarray(arr)
    if arr.ndim not in (3, 4):
        raise FormatError(f"IVT stores rank 3 or 4 arrays, got rank {arr.ndim}")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.asarray(arr, dtype="<f4").tobytes(order="F")
    return head + payload


def decode(buf):
    if buf[:4] != MAGIC:
        raise FormatError("bad IVT magic")
    rank = buf[4]
    if rank not in (3, 4):
        raise FormatError(f"bad IVT rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    off = 5 + 4 * rank
    count = int(np.prod(dims))
    if len(buf) != off + 4 * count:
        raise FormatError(f"IVT payload length mismatch for dims {dims}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return data.reshape(dims, order="F").astype(np.float32)


def write_ivt(path, arr):
    Path(path).write_bytes(encode(arr))


def read_ivt(path):
    return decode(Path(path).read_bytes())


def encode_weights(layers):
    """``layers`` is a list of (W, b) with W of shape (rows, cols)."""
    out = [WEIGHTS_MAGIC, struct.pack("<I", len(layers))]
    for W, b in layers:
        W = np.asarray(W)
        out.append(struct.pack("<II", *W.shape))
        out.append(np.asarray(W, dtype="<f4").tobytes(order="C"))
        out.append(np.asarray(b, dtype="<f4").tobytes())
    return b"".join(out)


def decode_weights(buf):
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("bad IVTW magic")
    (n,) = struct.unpack_from("<I", buf, 4)
    off = 8
    layers = []
    for _ in range(n):
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        W = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(buf, dtype="<f4", count=cols, offset=off)
        off += 4 * cols
        layers.append((W.astype(np.float64), b.astype(np.float64)))
    if off != len(buf):
        raise FormatError("trailing bytes in IVTW blob")
    return layers
