"""Dense (N, C, H, W) arrays and the RT01 raw tensor format.

Tensors are plain ``numpy.ndarray`` objects with four axes laid out row-major
as (batch, channel, height, width).  The helpers here validate that contract
and provide the handful of operations the rest of the package relies on.
"""

import struct

import numpy as np

MAGIC = b"RT01"
_HEADER = struct.Struct("<4sB3x4Q")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
# extents above this cannot be addressed as a byte count on any 64-bit host
_MAX_ELEMENTS = 2**61


class TensorFormatError(ValueError):
    """Base class for malformed RT01 payloads."""


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ExtentOverflowError(TensorFormatError):
    pass


def as_tensor(x, dtype=np.float64):
    """Return `x` as a contiguous 4-axis array, raising if it has another rank."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-axis (N, C, H, W) tensor, got shape {arr.shape}")
    return arr


def zeros(shape, dtype=np.float64):
    if len(shape) != 4 or any(int(s) < 0 for s in shape):
        raise ValueError(f"invalid tensor shape {shape}")
    return np.zeros(tuple(int(s) for s in shape), dtype=dtype)


_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op, a, b):
    """Combine `a` with a same-shaped tensor or a scalar `b`.

    `op` is one of ``"add"``, ``"sub"``, ``"mul"``, ``"max"``.  Broadcasting
    beyond the scalar case is deliberately rejected.
    """
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_OPS)}") from None
    a = np.asarray(a)
    if np.ndim(b) == 0:
        return fn(a, b)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def concat_channels(a, b):
    """Stack `b`'s channels after `a`'s.  Batch and spatial extents must agree."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError(f"concat_channels needs 4-axis tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(t, c_first):
    """Inverse of :func:`concat_channels`: split after `c_first` channels."""
    return t[:, :c_first], t[:, c_first:]


def serialize(t):
    """Encode a tensor as RT01 bytes (f32 or f64, little endian)."""
    t = np.asarray(t)
    if t.ndim != 4:
        raise ValueError(f"only 4-axis tensors can be serialized, got shape {t.shape}")
    tag = _TAGS.get(t.dtype)
    if tag is None:
        t = t.astype(np.float64)
        tag = 2
    header = _HEADER.pack(MAGIC, tag, *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[tag]).tobytes()
    return header + payload


def deserialize(buf):
    """Decode RT01 bytes produced by :func:`serialize`."""
    buf = memoryview(buf)
    if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
        raise BadMagicError(f"bad magic: expected {MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, got {len(buf)}")
    _, tag, *shape = _HEADER.unpack_from(buf)
    if tag not in _DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    count = 1
    for s in shape:
        count *= s
    if count > _MAX_ELEMENTS:
        raise ExtentOverflowError(f"extents {tuple(shape)} overflow the addressable size")
    dtype = _DTYPES[tag]
    need = count * dtype.itemsize
    have = len(buf) - _HEADER.size
    if have < need:
        raise TruncatedPayloadError(
            f"payload truncated: header declares {tuple(shape)} ({count} values), "
            f"found {have // dtype.itemsize}"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=_HEADER.size)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True)


def save(t, path):
    with open(path, "wb") as fh:
        fh.write(serialize(t))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
