from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarfuse.autograd import CheckError
from lidarfuse.geometry import (
    BEVGeometry,
    SparseVoxelSet,
    VoxelizationConfig,
    collapse_z,
    gather_from_bev,
    read_point_stream,
    scatter_to_bev,
    sort_by_hilbert,
    voxelize,
    write_point_stream,
)
from lidarfuse.hilbert import hilbert_encode

FULL_SCALE_CFG = VoxelizationConfig((0.075, 0.075, 0.2), ((-54.0, 54.0), (-54.0, 54.0), (-5.0, 3.0)))
TOY_CFG = VoxelizationConfig((0.5, 0.5, 1.0), ((0.0, 8.0), (-4.0, 4.0), (-1.0, 3.0)))


def hashmap_voxelize(points, cfg):
    groups = defaultdict(list)
    mins = [lo for lo, _ in cfg.range_m]
    for p in points:
        idx = tuple(int(np.floor((p[a] - mins[a]) / cfg.voxel_size_m[a])) for a in range(3))
        if all(0 <= idx[a] < cfg.grid_extent[a] for a in range(3)):
            groups[idx].append(p)
    out = {}
    for idx, members in groups.items():
        center = [mins[a] + (idx[a] + 0.5) * cfg.voxel_size_m[a] for a in range(3)]
        feat = [sum(m[3 + f] for m in members) / len(members) for f in range(len(points[0]) - 3)]
        off = [sum(m[a] - center[a] for m in members) / len(members) for a in range(3)]
        out[idx] = feat + off
    return out


class TestVoxelize:
    def test_full_scale_configuration_index(self):
        assert FULL_SCALE_CFG.grid_extent == (1440, 1440, 40)
        vs = voxelize(np.array([[0.0375, 0.0, 0.0, 1.0]]), FULL_SCALE_CFG)
        assert vs.coords[0, 0] == 720

    def test_mean_pooling(self):
        vs = voxelize(np.array([[0.1, 0.1, 0.1, 1.0], [0.2, 0.2, 0.2, 3.0]]), TOY_CFG)
        assert len(vs) == 1 and vs.features.data[0, 0] == 2.0

    def test_matches_hashmap_oracle(self, rng):
        pts = np.concatenate([rng.uniform([-1, -5, -2], [9, 5, 4], (1000, 3)), rng.standard_normal((1000, 2))], axis=1)
        vs = voxelize(pts, TOY_CFG)
        ref = hashmap_voxelize(pts, TOY_CFG)
        assert len(vs) == len(ref)
        for c, f in zip(vs.coords, vs.features.data):
            np.testing.assert_allclose(f, ref[tuple(c)], atol=1e-12)

    def test_empty_is_valid(self):
        vs = voxelize(np.array([[100.0, 0.0, 0.0, 1.0]]), TOY_CFG)
        assert len(vs) == 0 and vs.features.shape == (0, 4)

    def test_permutation_invariant(self, rng):
        pts = np.concatenate([rng.uniform([0, -4, -1], [8, 4, 3], (500, 3)), rng.standard_normal((500, 1))], axis=1)
        a = voxelize(pts, TOY_CFG)
        b = voxelize(pts[rng.permutation(500)], TOY_CFG)
        assert a.coords.tobytes() == b.coords.tobytes()
        assert a.features.data.tobytes() == b.features.data.tobytes()

    def test_bad_config(self):
        with pytest.raises(ValueError):
            VoxelizationConfig((0.3, 0.5, 1.0), ((0.0, 1.0), (0.0, 1.0), (0.0, 1.0)))


class TestScatter:
    geom = BEVGeometry(8, 6, (1.0, 1.0), (0.0, 0.0))

    def test_empty(self):
        grid = scatter_to_bev(SparseVoxelSet(np.zeros((0, 2)), np.zeros((0, 3)), (8, 6, 1)), self.geom)
        assert grid.shape == (2, 6, 8) and not grid.features.data.any()

    def test_single_voxel(self):
        grid = scatter_to_bev(SparseVoxelSet([[7.0]], [[3, 5, 0]], (8, 6, 1)), self.geom)
        assert grid.features.data[0, 5, 3] == 7.0 and grid.features.data.sum() == 7.0

    def test_round_trip(self, rng):
        cells = rng.choice(48, size=20, replace=False)
        coords = np.stack([cells % 8, cells // 8, np.zeros(20, int)], axis=1)
        feats = rng.standard_normal((20, 3))
        vs = SparseVoxelSet(feats, coords, (8, 6, 1))
        back = gather_from_bev(scatter_to_bev(vs, self.geom), coords)
        assert back.data.tobytes() == feats.tobytes()

    def test_out_of_grid(self):
        with pytest.raises(CheckError):
            SparseVoxelSet([[1.0]], [[9, 0, 0]], (8, 6, 1))

    def test_duplicates_rejected(self):
        with pytest.raises(CheckError):
            SparseVoxelSet([[1.0], [2.0]], [[1, 1, 0], [1, 1, 0]], (8, 6, 1))


def test_collapse_z_takes_max(rng):
    vs = SparseVoxelSet([[1.0, 5.0], [3.0, -1.0], [2.0, 2.0]], [[1, 2, 0], [1, 2, 3], [0, 0, 1]], (4, 4, 4))
    bev = collapse_z(vs)
    assert bev.coords.tolist() == [[0, 0, 0], [1, 2, 0]]
    assert bev.features.data.tolist() == [[2.0, 2.0], [3.0, 5.0]]


class TestHilbertSort:
    def test_single(self):
        perm, out = sort_by_hilbert(SparseVoxelSet([[1.0]], [[3, 3, 0]], (8, 8, 1)))
        assert perm.tolist() == [0]

    def test_already_sorted(self, rng):
        cells = rng.choice(64, size=10, replace=False)
        coords = np.stack([cells % 8, cells // 8, np.zeros(10, int)], axis=1)
        coords = coords[np.argsort(hilbert_encode(coords[:, :2], 3))]
        perm, _ = sort_by_hilbert(SparseVoxelSet(np.zeros((10, 1)), coords, (8, 8, 1)))
        assert perm.tolist() == list(range(10))

    def test_permutation_round_trip(self, rng):
        cells = rng.choice(100, size=30, replace=False)
        coords = np.stack([cells % 10, cells // 10, np.zeros(30, int)], axis=1)
        feats = rng.standard_normal((30, 2))
        vs = SparseVoxelSet(feats, coords, (10, 10, 1))
        perm, out = sort_by_hilbert(vs)
        assert np.array_equal(coords[perm], out.coords)
        assert np.array_equal(feats[perm], out.features.data)
        inv = np.argsort(perm)
        assert np.array_equal(out.coords[inv], coords)
        h = hilbert_encode(out.coords[:, :2], 4)
        assert np.all(np.diff(h) > 0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-10, 10, width=32)] * 4), min_size=0, max_size=50))
def test_point_stream_round_trip(records):
    pts = np.array(records, dtype=np.float32).reshape(-1, 4)
    back = read_point_stream(write_point_stream(pts))
    assert np.array_equal(back, pts.astype(np.float64))
    voxelize(back, TOY_CFG)  # any stream voxelizes without error


def test_point_stream_bad_length():
    with pytest.raises(ValueError):
        read_point_stream(b"\x00" * 15)
