"""Semantic-guided BEV dilation: multi-modal deformable convolution and its residual block.

Offsets and modulation scalars are predicted from the concatenated LiDAR and
image BEV maps, but the deformable convolution itself only ever samples the
LiDAR map.  Channels are split into ``groups`` that each get their own offsets
and modulation (one sampling pattern per group); the kernel weights span all
input channels, so zero offsets with unit modulation is exactly ``conv2d``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import CheckError, Tensor, as_tensor, concat, make_result
from .geometry import DenseBEVGrid
from .nn import Module, conv_weight, param


def kernel_grid(kh: int, kw: int) -> np.ndarray:
    """Regular sampling offsets (dy, dx) of a kh×kw kernel centered at 0, row-major."""
    ky, kx = np.meshgrid(np.arange(kh) - kh // 2, np.arange(kw) - kw // 2, indexing="ij")
    return np.stack([ky.ravel(), kx.ravel()], axis=1).astype(np.float64)


def _bilinear_corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    ly, lx = py - y0, px - x0
    corners = []
    for dy, dx, wy, wx in ((0, 0, 1 - ly, 1 - lx), (0, 1, 1 - ly, lx), (1, 0, ly, 1 - lx), (1, 1, ly, lx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        flat = np.where(valid, np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1), 0)
        corners.append((flat, valid, wy * wx, dy, dx))
    return corners, ly, lx


def deform_conv2d(
    feat: Tensor,
    offsets: Tensor,
    modulation: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
) -> Tensor:
    """Modulated deformable convolution, stride 1, 'same' padding.

    feat C×H×W; offsets G×M×2×H×W holding (dy, dx); modulation G×M×H×W;
    weight C_out×C×kh×kw with M = kh·kw.  Out-of-bounds samples read zero.
    """
    feat, offsets, modulation, weight = map(as_tensor, (feat, offsets, modulation, weight))
    C, H, W = feat.shape
    c_out, wc, kh, kw = weight.shape
    M = kh * kw
    G = modulation.shape[0]
    if wc != C or C % G:
        raise CheckError(f"deform_conv2d: {C} channels incompatible with weight {weight.shape} / {G} groups")
    if offsets.shape != (G, M, 2, H, W) or modulation.shape != (G, M, H, W):
        raise CheckError(f"deform_conv2d: offsets {offsets.shape} / modulation {modulation.shape} do not match")
    cg = C // G
    HW = H * W
    base = kernel_grid(kh, kw)
    hh, ww = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    py = hh[None, None] + base[None, :, 0, None, None] + offsets.data[:, :, 0]
    px = ww[None, None] + base[None, :, 1, None, None] + offsets.data[:, :, 1]
    corners, ly, lx = _bilinear_corners(py, px, H, W)

    fr = feat.data.reshape(G, cg, HW)
    gi = np.arange(G)[:, None, None]
    ci = np.arange(cg)[None, :, None]
    vals = []
    sample = np.zeros((G, cg, M * HW))
    for flat, valid, wgt, _, _ in corners:
        v = fr[gi, ci, flat.reshape(G, 1, -1)] * valid.reshape(G, 1, -1)
        vals.append(v)
        sample += v * wgt.reshape(G, 1, -1)
    mod = modulation.data.reshape(G, 1, M * HW)
    cols = (sample * mod).reshape(C * M, HW)
    wmat = weight.data.reshape(c_out, C * M)
    out = (wmat @ cols).reshape(c_out, H, W)
    inputs = [feat, offsets, modulation, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(c_out, HW)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(G, cg, M * HW)
        gmod = (gcols * sample).sum(axis=1).reshape(G, M, H, W)
        gsample = gcols * mod
        gfeat = np.zeros(G * cg * HW)
        chan = (np.arange(G)[:, None, None] * cg + np.arange(cg)[None, :, None]) * HW
        for flat, valid, wgt, _, _ in corners:
            contrib = gsample * (wgt * valid).reshape(G, 1, -1)
            idx = chan + flat.reshape(G, 1, -1)
            gfeat += np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=G * cg * HW)
        # derivative of the bilinear weights w.r.t. the sampling position
        v00, v01, v10, v11 = vals
        lyr = ly.reshape(G, 1, -1)
        lxr = lx.reshape(G, 1, -1)
        dval_dy = -(1 - lxr) * v00 - lxr * v01 + (1 - lxr) * v10 + lxr * v11
        dval_dx = -(1 - lyr) * v00 + (1 - lyr) * v01 - lyr * v10 + lyr * v11
        goff = np.stack(
            [(gsample * dval_dy).sum(axis=1).reshape(G, M, H, W), (gsample * dval_dx).sum(axis=1).reshape(G, M, H, W)],
            axis=2,
        )
        grads = [gfeat.reshape(C, H, W), goff, gmod, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return make_result(out, inputs, backward, "deform_conv2d")


@dataclass
class DeformationField:
    offsets: Tensor  # G×M×2×H×W, (dy, dx) in cells
    modulation: Tensor  # G×M×H×W in [0, 1]

    @property
    def groups(self) -> int:
        return self.modulation.shape[0]


class DeformableConvParams(Module):
    """Kernel weights plus the predictor producing offsets and modulation."""

    def __init__(self, channels: int, guide_channels: int, groups: int = 4, kernel: int = 3,
                 seed: int = 0, predictor_std: float = 0.0):
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        if kernel % 2 == 0:
            raise ValueError(f"kernel {kernel} must be odd so the sampling grid centers on the query cell")
        rng = np.random.default_rng(seed)
        self.groups = groups
        self.kernel = kernel
        self.num_points = kernel * kernel
        self.weight = conv_weight(rng, channels, channels, kernel)
        self.bias = param(np.zeros(channels))
        n_pred = 3 * self.num_points * groups
        self.pred_w = param(rng.standard_normal((n_pred, channels + guide_channels, 3, 3)) * predictor_std)
        self.pred_b = param(np.zeros(n_pred))

    @property
    def base_offsets(self) -> np.ndarray:
        return kernel_grid(self.kernel, self.kernel)


def predict_deformation(lidar_bev: DenseBEVGrid, image_bev: DenseBEVGrid, params: DeformableConvParams) -> DeformationField:
    """Offsets (unbounded) and sigmoid modulation from concat(LiDAR, image) BEV features."""
    lf, imf = lidar_bev.features, image_bev.features
    if lf.shape[1:] != imf.shape[1:]:
        raise CheckError(f"predict_deformation: LiDAR {lf.shape} and image {imf.shape} extents differ")
    _, H, W = lf.shape
    G, M = params.groups, params.num_points
    raw = F.conv2d(concat([lf, imf], axis=0), params.pred_w, params.pred_b, padding=1)
    offsets = raw[: 2 * M * G].reshape(G, M, 2, H, W)
    modulation = F.sigmoid(raw[2 * M * G :]).reshape(G, M, H, W)
    return DeformationField(offsets, modulation)


def mm_dcn(lidar_bev: DenseBEVGrid, field: DeformationField, params: DeformableConvParams) -> DenseBEVGrid:
    """Deformable convolution over LiDAR features only, steered by ``field``."""
    out = deform_conv2d(lidar_bev.features, field.offsets, field.modulation, params.weight, params.bias)
    return DenseBEVGrid(out, lidar_bev.geometry)


class SBDBBlock(Module):
    """LN(MM-DCN) residual followed by an LN(MLP) residual; remembers its last deformation field."""

    def __init__(self, channels: int, guide_channels: int, groups: int = 4, mlp_ratio: int = 2,
                 seed: int = 0, predictor_std: float = 0.0):
        rng = np.random.default_rng(seed + 7919)
        self.dcn = DeformableConvParams(channels, guide_channels, groups, seed=seed, predictor_std=predictor_std)
        self.ln1_g = param(np.ones(channels))
        self.ln1_b = param(np.zeros(channels))
        hidden = mlp_ratio * channels
        self.mlp_w1 = conv_weight(rng, hidden, channels, 1)
        self.mlp_b1 = param(np.zeros(hidden))
        self.mlp_w2 = conv_weight(rng, channels, hidden, 1)
        self.mlp_b2 = param(np.zeros(channels))
        self.ln2_g = param(np.ones(channels))
        self.ln2_b = param(np.zeros(channels))
        self.last_field: DeformationField | None = None

    def __call__(self, lidar_bev: DenseBEVGrid, image_bev: DenseBEVGrid) -> DenseBEVGrid:
        return sbdb_block(lidar_bev, image_bev, self)


def sbdb_block(lidar_bev: DenseBEVGrid, image_bev: DenseBEVGrid, block: SBDBBlock) -> DenseBEVGrid:
    if lidar_bev.shape[1:] != image_bev.shape[1:]:
        raise CheckError("sbdb_block: LiDAR and image BEV extents differ")
    x = lidar_bev.features
    field = predict_deformation(lidar_bev, image_bev, block.dcn)
    block.last_field = DeformationField(field.offsets.detach(), field.modulation.detach())
    y = mm_dcn(lidar_bev, field, block.dcn).features
    x = F.layer_norm(y, block.ln1_g, block.ln1_b, axis=0) + x
    h = F.silu(F.conv2d(x, block.mlp_w1, block.mlp_b1))
    h = F.conv2d(h, block.mlp_w2, block.mlp_b2)
    x = F.layer_norm(h, block.ln2_g, block.ln2_b, axis=0) + x
    return DenseBEVGrid(x, lidar_bev.geometry)


class ImageBEVEncoder(Module):
    """Lightweight encoder halving image BEV resolution once per stage (2×2, stride 2)."""

    def __init__(self, channels: int, out_channels: int, num_halvings: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.stem_w = conv_weight(rng, out_channels, channels, 3)
        self.stem_b = param(np.zeros(out_channels))
        self.down_w = [conv_weight(rng, out_channels, out_channels, 2) for _ in range(num_halvings)]
        self.down_b = [param(np.zeros(out_channels)) for _ in range(num_halvings)]

    def pyramid(self, image_bev: DenseBEVGrid) -> dict[int, DenseBEVGrid]:
        """Encoded image BEV at every factor 1, 2, 4, ... (shared by all stages)."""
        x = F.relu(F.conv2d(image_bev.features, self.stem_w, self.stem_b, padding=1))
        geom = image_bev.geometry
        out = {1: DenseBEVGrid(x, geom)}
        factor = 1
        for w, b in zip(self.down_w, self.down_b):
            _, h, wd = x.shape
            if h % 2 or wd % 2:
                raise CheckError(f"image BEV extent {h}x{wd} is not divisible by 2")
            x = F.relu(F.conv2d(x, w, b, stride=2))
            factor *= 2
            geom = geom.downsampled(2)
            out[factor] = DenseBEVGrid(x, geom)
        return out


def downsample_image_bev(image_bev: DenseBEVGrid, factor: int, encoder: ImageBEVEncoder) -> DenseBEVGrid:
    _, h, w = image_bev.shape
    if factor < 1 or factor & (factor - 1):
        raise CheckError(f"downsample factor must be a power of two, got {factor}")
    if h % factor or w % factor:
        raise CheckError(f"factor {factor} does not divide image BEV extent {h}x{w}")
    levels = encoder.pyramid(image_bev)
    if factor not in levels:
        raise CheckError(f"encoder has no level for factor {factor}")
    return levels[factor]


def export_sampling_locations(block: SBDBBlock, query_cell: tuple[int, int], threshold: float = 0.01):
    """Absolute (x, y, modulation, group, k) sampling points of ``query_cell`` in the last forward pass."""
    field = block.last_field
    if field is None:
        raise RuntimeError("block has not been run forward yet")
    G, M, H, W = field.modulation.shape
    x, y = query_cell
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"query cell {query_cell} outside {W}x{H} grid")
    base = block.dcn.base_offsets
    rows = []
    for g in range(G):
        for k in range(M):
            m = float(field.modulation.data[g, k, y, x])
            if m < threshold:
                continue
            dy, dx = field.offsets.data[g, k, :, y, x]
            rows.append((x + base[k, 1] + dx, y + base[k, 0] + dy, m, g, k))
    return rows


def write_sampling_csv(path: str | Path, records) -> None:
    """records: iterable of (stage, block, group, k, x, y, modulation)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stage", "block", "group", "k", "x", "y", "modulation"])
        for stage, blk, g, k, x, y, m in records:
            w.writerow([stage, blk, g, k, f"{x:.6f}", f"{y:.6f}", f"{m:.6f}"])
