"""Point-cloud voxelization, sparse voxel sets, BEV scatter/gather and Hilbert sorting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .autograd import CheckError, Tensor, as_tensor, index_add, is_checked
from .hilbert import hilbert_encode, order_for_extent


@dataclass(frozen=True)
class VoxelizationConfig:
    voxel_size_m: tuple[float, float, float]
    range_m: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        for size, (lo, hi) in zip(self.voxel_size_m, self.range_m):
            if size <= 0 or hi <= lo:
                raise ValueError(f"invalid voxel size {size} or range ({lo}, {hi})")
            n = (hi - lo) / size
            if abs(n - round(n)) > 1e-9:
                raise ValueError(f"range ({lo}, {hi}) is not a whole number of {size} m voxels")

    @property
    def grid_extent(self) -> tuple[int, int, int]:
        return tuple(int(round((hi - lo) / s)) for s, (lo, hi) in zip(self.voxel_size_m, self.range_m))

    @property
    def mins(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.range_m])


@dataclass
class SparseVoxelSet:
    """N voxel feature rows with unique integer (x, y, z) grid coordinates."""

    features: Tensor
    coords: np.ndarray
    grid_extent: tuple[int, int, int]

    def __post_init__(self):
        self.features = as_tensor(self.features)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if is_checked():
            self.validate()

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != len(self.coords):
            raise CheckError(f"features {self.features.shape} do not match {len(self.coords)} coords")
        if len(self.coords):
            if self.coords.min() < 0 or np.any(self.coords.max(axis=0) >= np.array(self.grid_extent)):
                raise CheckError("voxel coordinate outside grid extent")
            if len(np.unique(self.coords, axis=0)) != len(self.coords):
                raise CheckError("duplicate voxel coordinates")


@dataclass
class BEVGeometry:
    """Metric layout of an X×Y bird's-eye-view grid."""

    nx: int
    ny: int
    cell_size_m: tuple[float, float]
    origin_m: tuple[float, float]

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0:
            raise ValueError("grid extents must be positive")

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every cell center, each shaped Y×X."""
        xs = self.origin_m[0] + (np.arange(self.nx) + 0.5) * self.cell_size_m[0]
        ys = self.origin_m[1] + (np.arange(self.ny) + 0.5) * self.cell_size_m[1]
        return np.meshgrid(xs, ys)

    def to_cell(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cell indices for metric points plus an in-grid mask."""
        ix = np.floor((np.asarray(x) - self.origin_m[0]) / self.cell_size_m[0]).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin_m[1]) / self.cell_size_m[1]).astype(np.int64)
        ok = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return ix, iy, ok

    def downsampled(self, factor: int) -> "BEVGeometry":
        if self.nx % factor or self.ny % factor:
            raise ValueError(f"factor {factor} does not divide grid {self.nx}x{self.ny}")
        return BEVGeometry(
            self.nx // factor,
            self.ny // factor,
            (self.cell_size_m[0] * factor, self.cell_size_m[1] * factor),
            self.origin_m,
        )

    @classmethod
    def from_voxel_config(cls, cfg: VoxelizationConfig) -> "BEVGeometry":
        nx, ny, _ = cfg.grid_extent
        return cls(nx, ny, (cfg.voxel_size_m[0], cfg.voxel_size_m[1]), (cfg.range_m[0][0], cfg.range_m[1][0]))


@dataclass
class DenseBEVGrid:
    """Channel-major C×Y×X feature map with its metric geometry."""

    features: Tensor
    geometry: BEVGeometry = field(default=None)

    def __post_init__(self):
        self.features = as_tensor(self.features)
        if self.geometry is None:
            _, ny, nx = self.features.shape
            self.geometry = BEVGeometry(nx, ny, (1.0, 1.0), (0.0, 0.0))
        if is_checked() and self.features.shape[1:] != (self.geometry.ny, self.geometry.nx):
            raise CheckError(f"features {self.features.shape} do not match geometry {self.geometry}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.features.shape


def voxelize(points: np.ndarray, cfg: VoxelizationConfig) -> SparseVoxelSet:
    """Bin points (x, y, z, feat...) into voxels.

    Each voxel's feature row is the mean of its member point features followed
    by the mean (x, y, z) offset from the voxel center.  Rows are ordered by
    linear voxel key; member sums are taken in a canonical point order so the
    result does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise ValueError("points must be an (P, 3 + F) array")
    n_feat = pts.shape[1] - 3
    extent = np.array(cfg.grid_extent)
    size = np.array(cfg.voxel_size_m)
    idx = np.floor((pts[:, :3] - cfg.mins) / size).astype(np.int64)
    keep = np.all((idx >= 0) & (idx < extent), axis=1)
    pts, idx = pts[keep], idx[keep]
    if len(pts) == 0:
        return SparseVoxelSet(np.zeros((0, n_feat + 3)), np.zeros((0, 3), np.int64), tuple(extent))
    key = (idx[:, 0] * extent[1] + idx[:, 1]) * extent[2] + idx[:, 2]
    # canonical order: by key, then by the point values themselves
    order = np.lexsort(tuple(pts[:, c] for c in range(pts.shape[1] - 1, -1, -1)) + (key,))
    pts, idx, key = pts[order], idx[order], key[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    counts = np.diff(np.r_[starts, len(key)])
    center = cfg.mins + (idx + 0.5) * size
    rows = np.concatenate([pts[:, 3:], pts[:, :3] - center], axis=1)
    sums = np.add.reduceat(rows, starts, axis=0)
    feats = sums / counts[:, None]
    return SparseVoxelSet(feats, idx[starts], tuple(int(e) for e in extent))


def collapse_z(voxels: SparseVoxelSet) -> SparseVoxelSet:
    """Max-pool voxel features over z at each (x, y); output coords have z = 0."""
    nx, ny, _ = voxels.grid_extent
    if len(voxels) == 0:
        return SparseVoxelSet(voxels.features, voxels.coords, (nx, ny, 1))
    key = voxels.coords[:, 0] * ny + voxels.coords[:, 1]
    uniq, inverse = np.unique(key, return_inverse=True)
    pooled = F.segment_max(voxels.features, inverse.reshape(-1), len(uniq))
    coords = np.stack([uniq // ny, uniq % ny, np.zeros_like(uniq)], axis=1)
    return SparseVoxelSet(pooled, coords, (nx, ny, 1))


def scatter_to_bev(voxels: SparseVoxelSet, geometry: BEVGeometry | None = None) -> DenseBEVGrid:
    """Scatter BEV-collapsed voxel rows into a zero-initialized C×Y×X grid."""
    nx, ny = voxels.grid_extent[0], voxels.grid_extent[1]
    if geometry is None:
        geometry = BEVGeometry(nx, ny, (1.0, 1.0), (0.0, 0.0))
    c = voxels.num_channels
    xs, ys = voxels.coords[:, 0], voxels.coords[:, 1]
    if is_checked() and len(xs) and (xs.max() >= geometry.nx or ys.max() >= geometry.ny or min(xs.min(), ys.min()) < 0):
        raise CheckError("voxel coordinate outside the BEV grid")
    flat = index_add((geometry.ny * geometry.nx, c), ys * geometry.nx + xs, voxels.features)
    grid = flat.T.reshape(c, geometry.ny, geometry.nx)
    return DenseBEVGrid(grid, geometry)


def gather_from_bev(grid: DenseBEVGrid, coords: np.ndarray) -> Tensor:
    """Rows of grid features at (x, y) coords; inverse of :func:`scatter_to_bev` on occupied cells."""
    c, ny, nx = grid.shape
    coords = np.asarray(coords, dtype=np.int64)
    flat = grid.features.reshape(c, ny * nx).T
    return flat[coords[:, 1] * nx + coords[:, 0]]


def sort_by_hilbert(voxels: SparseVoxelSet) -> tuple[np.ndarray, SparseVoxelSet]:
    """Reorder voxels along the 2-D Hilbert curve over the (x, y) plane.

    Returns ``perm`` with ``sorted = voxels[perm]``; ``np.argsort(perm)`` undoes it.
    """
    if len(voxels) == 0:
        return np.zeros(0, dtype=np.int64), voxels
    order = order_for_extent(voxels.grid_extent[0], voxels.grid_extent[1])
    h = hilbert_encode(voxels.coords[:, :2], order)
    perm = np.argsort(h, kind="stable")
    return perm, SparseVoxelSet(voxels.features[perm], voxels.coords[perm], voxels.grid_extent)


def read_point_stream(raw: bytes) -> np.ndarray:
    """Decode a flat little-endian float32 stream of (x, y, z, intensity) records."""
    if len(raw) % 16:
        raise ValueError(f"point stream length {len(raw)} is not a multiple of 16 bytes")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)


def write_point_stream(points: np.ndarray) -> bytes:
    return np.ascontiguousarray(np.asarray(points)[:, :4], dtype="<f4").tobytes()
