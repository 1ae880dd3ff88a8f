"""FNV-1a 64-bit content hashing."""

from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _fnv1a64_py(buf: np.ndarray, h: int) -> int:
    for b in buf.tobytes():
        h ^= b
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


if njit is not None:

    @njit(cache=True)
    def _fnv1a64_jit(buf, h):
        prime = np.uint64(FNV_PRIME)
        for i in range(buf.shape[0]):
            h = (h ^ np.uint64(buf[i])) * prime
        return h

    def _fnv1a64(buf: np.ndarray, h: int) -> int:
        return int(_fnv1a64_jit(buf, np.uint64(h)))

else:  # pragma: no cover
    _fnv1a64 = _fnv1a64_py


def fnv1a64(data, h: int = FNV_OFFSET) -> int:
    """Hash ``data`` (bytes-like or ndarray); ``h`` allows chaining."""
    if isinstance(data, np.ndarray):
        buf = np.frombuffer(np.ascontiguousarray(data).tobytes(), dtype=np.uint8)
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    return _fnv1a64(buf, h)
