"""Hilbert curve indexing in any dimension (Skilling's transpose method).

Convention: coordinates are given as (x, y[, z]); the first axis is the most
significant when interleaving the transposed bits.  The curve starts at the
origin and, for 2-D order 1, visits (0,0), (0,1), (1,1), (1,0).  The
exhaustive bijectivity/adjacency tests are the normative definition.
"""

from __future__ import annotations

import numpy as np


def _check(coords: np.ndarray, order: int) -> None:
    if order < 1:
        raise ValueError(f"hilbert order must be >= 1, got {order}")
    if coords.shape[-1] * order > 62:
        raise ValueError("hilbert index would overflow 62 bits")
    if coords.size and (coords.min() < 0 or coords.max() >= (1 << order)):
        raise ValueError(f"coordinate outside [0, 2**{order}) for hilbert order {order}")


def _axes_to_transpose(x: np.ndarray, order: int) -> np.ndarray:
    x = x.copy()
    n = x.shape[1]
    q = 1 << (order - 1)
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (x[:, i] & q) != 0
            x[hit, 0] ^= p
            t = (x[~hit, 0] ^ x[~hit, i]) & p
            x[~hit, 0] ^= t
            x[~hit, i] ^= t
        q >>= 1
    for i in range(1, n):
        x[:, i] ^= x[:, i - 1]
    t = np.zeros(len(x), dtype=np.int64)
    q = 1 << (order - 1)
    while q > 1:
        hit = (x[:, n - 1] & q) != 0
        t[hit] ^= q - 1
        q >>= 1
    x ^= t[:, None]
    return x


def _transpose_to_axes(x: np.ndarray, order: int) -> np.ndarray:
    x = x.copy()
    n = x.shape[1]
    t = x[:, n - 1] >> 1
    for i in range(n - 1, 0, -1):
        x[:, i] ^= x[:, i - 1]
    x[:, 0] ^= t
    q = 2
    top = 2 << (order - 1)
    while q != top:
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (x[:, i] & q) != 0
            x[hit, 0] ^= p
            t = (x[~hit, 0] ^ x[~hit, i]) & p
            x[~hit, 0] ^= t
            x[~hit, i] ^= t
        q <<= 1
    return x


def hilbert_encode(coords, order: int) -> np.ndarray:
    """Hilbert indices for an (N, d) integer array; each component < 2**order."""
    c = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    _check(c, order)
    n = c.shape[1]
    tr = _axes_to_transpose(c, order)
    h = np.zeros(len(c), dtype=np.int64)
    for bit in range(order - 1, -1, -1):
        for i in range(n):
            h = (h << 1) | ((tr[:, i] >> bit) & 1)
    return h


def hilbert_decode(index, order: int, dims: int) -> np.ndarray:
    """Inverse of :func:`hilbert_encode`; returns an (N, dims) array."""
    h = np.atleast_1d(np.asarray(index, dtype=np.int64))
    if h.size and (h.min() < 0 or h.max() >= (1 << (dims * order))):
        raise ValueError(f"index outside [0, 2**{dims * order})")
    tr = np.zeros((len(h), dims), dtype=np.int64)
    pos = dims * order - 1
    for bit in range(order - 1, -1, -1):
        for i in range(dims):
            tr[:, i] |= ((h >> pos) & 1) << bit
            pos -= 1
    return _transpose_to_axes(tr, order)


def hilbert_index(coord, order: int) -> int:
    """Hilbert index of a single (x, y) or (x, y, z) cell."""
    return int(hilbert_encode(np.asarray(coord, dtype=np.int64)[None, :], order)[0])


def order_for_extent(*extents: int) -> int:
    """Smallest order whose 2**order side covers every extent (grids are padded virtually)."""
    side = max(max(extents), 2)
    return int(np.ceil(np.log2(side)))
