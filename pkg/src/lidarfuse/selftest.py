"""Built-in oracle and finite-difference checks runnable from an installed package."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .autograd import Tensor, checked
from .geometry import BEVGeometry, DenseBEVGrid, SparseVoxelSet, VoxelizationConfig, voxelize
from .gradcheck import check_gradients
from .hilbert import hilbert_decode, hilbert_encode
from .lss import CameraModel, DepthBins, DepthNet, lift_splat, predict_depth_distribution
from .sbdb import DeformableConvParams, DeformationField, SBDBBlock, deform_conv2d, mm_dcn, predict_deformation
from .snapshot import read_snapshot, write_snapshot
from .ssm import ScanParams, mamba_layer, selective_scan_core
from .svdb import DilationEmbedding, ForegroundField, MaskPredictor, dilate_and_refine, foreground_prob, threshold_mask

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} err={self.value:.3e} tol={self.tol:.0e}"


def _conv_naive(x, w, b, stride, pad):
    C, H, W = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride : i * stride + kh, j * stride : j * stride + kw] * w[o]) + b[o]
    return out


def check_conv2d(rng) -> float:
    err = 0.0
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        x, w, b = rng.standard_normal((3, 7, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        err = max(err, np.abs(got - _conv_naive(x, w, b, stride, pad)).max())
    return err


def check_dcn_degeneracy(rng) -> float:
    err = 0.0
    for _ in range(20):
        c, h, w, g = 4, int(rng.integers(3, 8)), int(rng.integers(3, 8)), int(rng.choice([1, 2, 4]))
        x, wt, b = rng.standard_normal((c, h, w)), rng.standard_normal((c, c, 3, 3)), rng.standard_normal(c)
        off = Tensor(np.zeros((g, 9, 2, h, w)))
        mod = Tensor(np.ones((g, 9, h, w)))
        got = deform_conv2d(Tensor(x), off, mod, Tensor(wt), Tensor(b)).data
        err = max(err, np.abs(got - _conv_naive(x, wt, b, 1, 1)).max())
    return err


def check_frozen_field(rng) -> float:
    params = DeformableConvParams(8, 4, groups=4, seed=1, predictor_std=0.3)
    lidar = DenseBEVGrid(Tensor(rng.standard_normal((8, 6, 6))))
    field = predict_deformation(lidar, DenseBEVGrid(Tensor(rng.standard_normal((4, 6, 6)))), params)
    frozen = DeformationField(field.offsets.detach(), field.modulation.detach())
    base = mm_dcn(lidar, frozen, params).features.data
    diff = 0.0
    for _ in range(5):
        predict_deformation(lidar, DenseBEVGrid(Tensor(rng.standard_normal((4, 6, 6)) * 10)), params)
        diff = max(diff, float(np.abs(mm_dcn(lidar, frozen, params).features.data - base).max()))
    return diff


def _scan_oracle(x, delta, A, B, C, D):
    L, E = x.shape
    h = np.zeros(A.shape)
    y = np.zeros((L, E))
    for t in range(L):
        for e in range(E):
            for n in range(A.shape[1]):
                h[e, n] = np.exp(delta[t, e] * A[e, n]) * h[e, n] + delta[t, e] * B[t, n] * x[t, e]
            y[t, e] = np.dot(C[t], h[e]) + D[e] * x[t, e]
    return y


def check_scan(rng) -> float:
    err = 0.0
    for L in (1, 7, 64):
        E, N = 3, 4
        args = (
            rng.standard_normal((L, E)), rng.uniform(0.01, 0.5, (L, E)), -rng.uniform(0.5, 2, (E, N)),
            rng.standard_normal((L, N)), rng.standard_normal((L, N)), rng.standard_normal(E),
        )
        got = selective_scan_core(*map(Tensor, args)).data
        err = max(err, np.abs(got - _scan_oracle(*args)).max())
    return err


def check_causality(rng) -> float:
    params = ScanParams(4, seed=3)
    x = rng.standard_normal((64, 4))
    base = mamba_layer(Tensor(x), params).data
    leak = 0.0
    for t in range(0, 64, 7):
        xp = x.copy()
        xp[t] += 1.0
        out = mamba_layer(Tensor(xp), params).data
        leak = max(leak, float(np.abs(out[:t] - base[:t]).max()) if t else 0.0)
    return leak


def check_hilbert(rng) -> float:
    bad = 0
    for dims, max_order in ((2, 5), (3, 3)):
        for order in range(1, max_order + 1):
            n = 2 ** (order * dims)
            pts = hilbert_decode(np.arange(n), order, dims)
            bad += int(len({tuple(p) for p in pts}) != n)
            bad += int(np.any(np.abs(np.diff(pts, axis=0)).sum(axis=1) != 1))
            bad += int(np.any(hilbert_encode(pts, order) != np.arange(n)))
    return float(bad)


def check_svdb(rng) -> float:
    bad = 0
    for _ in range(20):
        nx, ny, n = 8, 8, int(rng.integers(0, 20))
        flat = rng.choice(nx * ny, size=n, replace=False)
        coords = np.stack([flat % nx, flat // nx, np.zeros(n, np.int64)], axis=1)
        vox = SparseVoxelSet(Tensor(rng.standard_normal((n, 4))), coords, (nx, ny, 1))
        mask = rng.uniform(size=(ny, nx)) > 0.7
        res = dilate_and_refine(vox, ForegroundField(Tensor(mask * 1.0), mask, 0.4), DilationEmbedding(4), ScanParams(4))
        want = {(int(c[0]), int(c[1])) for c in coords} | {(int(x), int(y)) for y, x in zip(*np.nonzero(mask))}
        got = [(int(c[0]), int(c[1])) for c in res.refined.coords]
        bad += int(set(got) != want or len(got) != len(want))
        bad += int(not np.array_equal(res.merged.features.data[:n], vox.features.data))
    bad += int(threshold_mask(np.full((2, 2), 0.4), 0.4).any())
    return float(bad)


def check_lss(rng) -> float:
    cam = CameraModel.forward_looking(6, 8, 60.0, (0.0, 0.0, 1.5))
    bins = DepthBins(2.0, 10.0, 8)
    geom = BEVGeometry(64, 64, (0.25, 0.25), (0.0, -8.0))
    net = DepthNet(3, 2, 8, seed=1)
    feat = Tensor(rng.standard_normal((3, 6, 8)))
    depth = predict_depth_distribution(feat, net)
    ctx = Tensor(rng.standard_normal((2, 6, 8)))
    bev = lift_splat(ctx, depth, cam, bins, geom).features.data
    lifted = (ctx.data[:, None] * depth.data[None]).sum(axis=(1, 2, 3))
    return max(float(np.abs(bev.sum(axis=(1, 2)) - lifted).max()), float(np.abs(depth.data.sum(axis=0) - 1).max()))


def check_voxel_permutation(rng) -> float:
    cfg = VoxelizationConfig((0.5, 0.5, 1.0), ((0, 4), (0, 4), (0, 2)))
    pts = np.concatenate([rng.uniform(0, 4, (200, 2)), rng.uniform(0, 2, (200, 1)), rng.uniform(size=(200, 1))], axis=1)
    a = voxelize(pts, cfg)
    b = voxelize(pts[rng.permutation(200)], cfg)
    return float(np.abs(a.features.data - b.features.data).max() + np.abs(a.coords - b.coords).max())


def check_snapshot(rng) -> float:
    bad = 0
    for shape in [(), (3,), (2, 0, 4), (2, 3, 4)]:
        arr = rng.standard_normal(shape)
        buf = io.BytesIO()
        write_snapshot(buf, arr)
        buf.seek(0)
        back = read_snapshot(buf)
        bad += int(back.shape != arr.shape or back.tobytes() != arr.tobytes())
    return float(bad)


def _grad_cases(rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    mp = MaskPredictor(2, 3, hidden=4, seed=2)
    mp.b1.data = rng.uniform(0.1, 0.5, mp.b1.shape)
    # bilinear sampling has kinks at integer positions; keep sampled offsets near half-cells
    block = SBDBBlock(4, 2, groups=2, seed=4, predictor_std=0.01)
    block.dcn.pred_b.data[: 2 * 9 * 2] = 0.5
    scan = ScanParams(3, seed=5)
    cam = CameraModel.forward_looking(3, 4, 60.0, (0.0, 0.0, 1.5))
    bins = DepthBins(2.0, 8.0, 4)
    geom = BEVGeometry(32, 32, (0.25, 0.25), (0.0, -4.0))
    g = 2
    target = (rng.uniform(size=(4, 4)) > 0.5) * 1.0
    return [
        ("conv2d", lambda x, w: F.conv2d(x, w, padding=1, stride=2), [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))]),
        ("layer_norm", lambda x, a, b: F.layer_norm(x, a, b, axis=0), [rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(4)]),
        ("softmax", lambda x: F.softmax(x, axis=0), [rng.standard_normal((5, 3))]),
        ("focal_loss", lambda p: F.focal_loss(p, target), [rng.uniform(0.1, 0.9, (4, 4))]),
        ("silu_softplus_sigmoid", lambda x: F.silu(x) * F.softplus(x) + F.sigmoid(x), [rng.standard_normal((3, 4))]),
        ("mask_head", lambda a, b: foreground_prob(DenseBEVGrid(a), DenseBEVGrid(b), mp), [rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 5, 5))]),
        ("mm_dcn", lambda x, o, m, w: deform_conv2d(x, o, F.sigmoid(m), w),
         [rng.standard_normal((4, 5, 5)), rng.choice([-1.0, 1.0], (g, 9, 2, 5, 5)) * rng.uniform(0.2, 0.8, (g, 9, 2, 5, 5)), rng.standard_normal((g, 9, 5, 5)), rng.standard_normal((4, 4, 3, 3))]),
        ("sbdb_block", lambda x, i: block(DenseBEVGrid(x), DenseBEVGrid(i)).features, [rng.standard_normal((4, 4, 4)), rng.standard_normal((2, 4, 4))]),
        ("mamba_layer", lambda s: mamba_layer(s, scan), [rng.standard_normal((9, 3))]),
        ("lift_splat", lambda f, d: lift_splat(f, F.softmax(d, axis=0), cam, bins, geom).features,
         [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 3, 4))]),
    ]


def run_checks(seed: int = 0, grad_instances: int = 5) -> list[CheckResult]:
    results = []
    with checked(True):
        rng = np.random.default_rng(seed)
        for name, fn, tol in [
            ("conv2d_vs_loops", check_conv2d, 1e-10),
            ("dcn_degeneracy_20_draws", check_dcn_degeneracy, 1e-10),
            ("mm_dcn_frozen_field_image_invariance", check_frozen_field, 0.0),
            ("selective_scan_vs_unrolled", check_scan, 1e-10),
            ("mamba_layer_causality_L64", check_causality, 0.0),
            ("hilbert_bijective_adjacent", check_hilbert, 0.0),
            ("svdb_occupancy_union", check_svdb, 0.0),
            ("lss_mass_and_normalization", check_lss, 1e-9),
            ("voxelize_permutation_invariance", check_voxel_permutation, 0.0),
            ("snapshot_round_trip", check_snapshot, 0.0),
        ]:
            v = float(fn(rng))
            results.append(CheckResult(name, v <= tol, v, tol))
        for i in range(grad_instances):
            for name, fn, inputs in _grad_cases(np.random.default_rng([seed, i])):
                errs = check_gradients(fn, [Tensor(x) for x in inputs], h=1e-5, seed=i)
                v = float(max(errs))
                results.append(CheckResult(f"grad_{name}_{i}", v < GRAD_TOL, v, GRAD_TOL))
    return results


def report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
