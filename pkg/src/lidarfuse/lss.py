"""Lift-splat view transform from a perspective feature map to a BEV grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autograd import CheckError, Tensor, index_add, mul
from .geometry import BEVGeometry, DenseBEVGrid
from .nn import Module, conv_weight, param


@dataclass
class CameraModel:
    intrinsics: np.ndarray  # 3×3
    extrinsics: np.ndarray  # 4×4 camera-to-ego
    height: int
    width: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        if abs(np.linalg.det(self.intrinsics)) < 1e-12:
            raise ValueError("camera intrinsics are singular")
        rot = self.extrinsics[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("camera extrinsic rotation is not orthonormal")

    @classmethod
    def forward_looking(cls, height: int, width: int, hfov_deg: float, position=(0.0, 0.0, 1.5)) -> "CameraModel":
        """Pinhole camera at ``position`` looking along ego +x (camera z), image y down."""
        fx = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
        K = np.array([[fx, 0.0, width / 2], [0.0, fx, height / 2], [0.0, 0.0, 1.0]])
        ext = np.eye(4)
        # camera axes (right, down, forward) -> ego (x fwd, y left, z up)
        ext[:3, :3] = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        ext[:3, 3] = position
        return cls(K, ext, height, width)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame rays with unit z through every pixel center, shaped H×W×3."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        pix = np.stack([u, v, np.ones_like(u)], axis=-1)
        return pix @ np.linalg.inv(self.intrinsics).T

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(np.array(d["intrinsics"]), np.array(d["extrinsics"]), int(d["height"]), int(d["width"]))


@dataclass(frozen=True)
class DepthBins:
    d_min: float = 1.0
    d_max: float = 40.0
    num_bins: int = 32

    def __post_init__(self):
        if self.d_min <= 0 or self.num_bins < 1 or self.d_max < self.d_min:
            raise ValueError(f"invalid depth bins {self}")

    def centers(self) -> np.ndarray:
        if self.num_bins == 1:
            return np.array([self.d_min])
        return np.linspace(self.d_min, self.d_max, self.num_bins)


class DepthNet(Module):
    """1×1 convolutions giving per-pixel depth logits and the lifted context features."""

    def __init__(self, image_channels: int, context_channels: int, num_bins: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.depth_w = conv_weight(rng, num_bins, image_channels, 1, gain=0.1)
        self.depth_b = param(np.zeros(num_bins))
        self.ctx_w = conv_weight(rng, context_channels, image_channels, 1)
        self.ctx_b = param(np.zeros(context_channels))


def depth_logits(image_feat: Tensor, weights: DepthNet) -> Tensor:
    return F.conv2d(image_feat, weights.depth_w, weights.depth_b)


def predict_depth_distribution(image_feat: Tensor, weights: DepthNet) -> Tensor:
    """Softmax over D depth bins per pixel: D×H×W, each pixel column sums to 1."""
    return F.softmax(depth_logits(image_feat, weights), axis=0)


def frustum_cells(cam: CameraModel, bins: DepthBins, geometry: BEVGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Flat BEV cell index for every (bin, row, col) frustum point, plus an in-grid mask.

    Depth is measured along the camera axis; cells use nearest (floor) assignment.
    """
    rays = cam.pixel_rays()  # H×W×3
    pts = bins.centers()[:, None, None, None] * rays[None]  # D×H×W×3
    ego = pts @ cam.extrinsics[:3, :3].T + cam.extrinsics[:3, 3]
    ix, iy, ok = geometry.to_cell(ego[..., 0], ego[..., 1])
    return np.where(ok, iy * geometry.nx + ix, 0).reshape(-1), ok.reshape(-1)


def lift_splat(
    image_feat: Tensor,
    depth_dist: Tensor,
    cam: CameraModel,
    bins: DepthBins,
    geometry: BEVGeometry,
) -> DenseBEVGrid:
    """Sum feature·probability of every (pixel, bin) into its ego-frame BEV cell."""
    C, H, W = image_feat.shape
    D = depth_dist.shape[0]
    if depth_dist.shape != (D, H, W) or (H, W) != (cam.height, cam.width) or D != bins.num_bins:
        raise CheckError(
            f"lift_splat: features {image_feat.shape}, depth {depth_dist.shape}, camera {cam.height}x{cam.width}"
        )
    cells, ok = frustum_cells(cam, bins, geometry)
    lifted = mul(image_feat.reshape(C, 1, H, W), depth_dist.reshape(1, D, H, W)).reshape(C, D * H * W)
    keep = np.flatnonzero(ok)
    vals = lifted[:, keep]
    flat = index_add((C, geometry.ny * geometry.nx), (slice(None), cells[keep]), vals)
    return DenseBEVGrid(flat.reshape(C, geometry.ny, geometry.nx), geometry)


def image_to_bev(
    image_feat: Tensor,
    weights: DepthNet,
    cam: CameraModel,
    bins: DepthBins,
    geometry: BEVGeometry,
    depth_override: Tensor | None = None,
) -> tuple[DenseBEVGrid, Tensor]:
    """Depth prediction + context projection + lift-splat; returns (BEV grid, depth distribution)."""
    depth = predict_depth_distribution(image_feat, weights) if depth_override is None else depth_override
    ctx = F.conv2d(image_feat, weights.ctx_w, weights.ctx_b)
    return lift_splat(ctx, depth, cam, bins, geometry), depth


def lift_splat_cameras(
    image_feats: list[Tensor],
    depth_dists: list[Tensor],
    cams: list[CameraModel],
    bins: DepthBins,
    geometry: BEVGeometry,
) -> DenseBEVGrid:
    """Sum of per-camera splats into one shared BEV grid."""
    if not (len(image_feats) == len(depth_dists) == len(cams)) or not cams:
        raise CheckError(f"lift_splat_cameras: {len(image_feats)} features, {len(depth_dists)} depths, {len(cams)} cameras")
    grids = [lift_splat(f, d, c, bins, geometry).features for f, d, c in zip(image_feats, depth_dists, cams)]
    total = grids[0]
    for g in grids[1:]:
        total = total + g
    return DenseBEVGrid(total, geometry)
