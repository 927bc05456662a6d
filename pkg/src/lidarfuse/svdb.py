"""Sparse voxel dilation: foreground mask prediction, embedding padding and scan refinement."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import CheckError, Tensor, concat
from .geometry import BEVGeometry, DenseBEVGrid, SparseVoxelSet, sort_by_hilbert
from .nn import Module, conv_weight, param
from .ssm import ScanParams, mamba_layer

DEFAULT_TAU = 0.4


@dataclass
class ForegroundField:
    prob: Tensor  # Y×X
    mask: np.ndarray  # Y×X bool, prob > tau
    tau: float


class MaskPredictor(Module):
    """Two 3×3 convolutions with a relu between, on concat(image BEV, LiDAR BEV)."""

    def __init__(self, image_channels: int, lidar_channels: int, hidden: int = 8, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w1 = conv_weight(rng, hidden, image_channels + lidar_channels, 3)
        self.b1 = param(np.zeros(hidden))
        self.w2 = conv_weight(rng, 1, hidden, 3, gain=0.5)
        self.b2 = param(np.zeros(1))


def foreground_prob(image_bev: DenseBEVGrid, lidar_bev: DenseBEVGrid, weights: MaskPredictor) -> Tensor:
    if image_bev.shape[1:] != lidar_bev.shape[1:]:
        raise CheckError(f"image BEV {image_bev.shape} and LiDAR BEV {lidar_bev.shape} extents differ")
    x = concat([image_bev.features, lidar_bev.features], axis=0)
    h = F.relu(F.conv2d(x, weights.w1, weights.b1, padding=1))
    logits = F.conv2d(h, weights.w2, weights.b2, padding=1)
    _, ny, nx = logits.shape
    return F.sigmoid(logits).reshape(ny, nx)


def threshold_mask(prob: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    # strict: a cell exactly at tau is background
    return np.asarray(prob) > tau


def predict_foreground(
    image_bev: DenseBEVGrid, lidar_bev: DenseBEVGrid, weights: MaskPredictor, tau: float = DEFAULT_TAU
) -> ForegroundField:
    prob = foreground_prob(image_bev, lidar_bev, weights)
    return ForegroundField(prob, threshold_mask(prob.data, tau), tau)


def points_in_boxes(px: np.ndarray, py: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Boolean mask of points lying inside at least one (cx, cy, w, l, yaw) box.

    ``l`` runs along the heading ``yaw`` and ``w`` across it; edges are inclusive.
    """
    inside = np.zeros(np.shape(px), dtype=bool)
    for cx, cy, w, l, yaw in np.asarray(boxes, dtype=np.float64).reshape(-1, 5):
        c, s = np.cos(yaw), np.sin(yaw)
        dx, dy = px - cx, py - cy
        along = dx * c + dy * s
        across = -dx * s + dy * c
        inside |= (np.abs(along) <= l / 2) & (np.abs(across) <= w / 2)
    return inside


def mask_ground_truth(boxes: np.ndarray, geometry: BEVGeometry) -> np.ndarray:
    """Y×X {0,1} target: 1 where the cell center falls inside any box."""
    xs, ys = geometry.cell_centers()
    return points_in_boxes(xs, ys, boxes).astype(np.float64)


class DilationEmbedding(Module):
    """One learnable feature vector shared by every padded cell."""

    def __init__(self, channels: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.embedding = param(rng.standard_normal(channels) * 0.1)


@dataclass
class DilationResult:
    merged: SparseVoxelSet  # original rows first, then padded rows; before sorting/refinement
    perm: np.ndarray  # Hilbert order of ``merged``
    refined: SparseVoxelSet  # Hilbert-sorted, features after the scan layer
    is_dilated: np.ndarray  # per row of ``refined``


def dilate_and_refine(
    voxels: SparseVoxelSet, field: ForegroundField, emb: DilationEmbedding, scan: ScanParams
) -> DilationResult:
    """Pad mask-positive empty cells with the embedding, Hilbert-sort, refine with one scan layer."""
    nx, ny = voxels.grid_extent[0], voxels.grid_extent[1]
    if field.mask.shape != (ny, nx):
        raise CheckError(f"mask {field.mask.shape} does not match voxel grid {ny}x{nx}")
    occupied = np.zeros((ny, nx), dtype=bool)
    occupied[voxels.coords[:, 1], voxels.coords[:, 0]] = True
    new_y, new_x = np.nonzero(field.mask & ~occupied)
    n_new = len(new_x)
    c = voxels.num_channels
    if n_new:
        pad = emb.embedding.reshape(1, c) * Tensor(np.ones((n_new, 1)))
        feats = concat([voxels.features, pad], axis=0)
        coords = np.concatenate([voxels.coords, np.stack([new_x, new_y, np.zeros(n_new, np.int64)], axis=1)])
    else:
        feats, coords = voxels.features, voxels.coords
    merged = SparseVoxelSet(feats, coords, (nx, ny, 1))
    perm, ordered = sort_by_hilbert(merged)
    refined = SparseVoxelSet(mamba_layer(ordered.features, scan), ordered.coords, (nx, ny, 1))
    is_dilated = perm >= len(voxels)
    return DilationResult(merged, perm, refined, is_dilated)


def write_occupancy_csv(path: str | Path, result: DilationResult) -> None:
    """Rows (x, y, status) with status 'original' or 'dilated', in Hilbert order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "status"])
        for (x, y, _), dil in zip(result.refined.coords, result.is_dilated):
            w.writerow([int(x), int(y), "dilated" if dil else "original"])
