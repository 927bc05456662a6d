import numpy as np
import pytest

from lidarfuse.autograd import no_grad
from lidarfuse.harness.degrade import Degradation, inject_degradation, one_hot_noise, random_noise, spatial_misalignment
from lidarfuse.harness.pipeline import PipelineConfig, build_pipeline
from lidarfuse.harness.robustness import (
    CSV_FIELDS, RobustnessRow, drops, mean_drops, read_robustness_csv, relative_drop, write_robustness_csv,
)
from lidarfuse.harness.scene import (
    GROUND, MISS, GenConfig, cast_rays, generate_scene, generate_scenes, lidar_rays, load_scene, save_scene,
    simulate_lidar,
)
from lidarfuse.harness.train import (
    center_mae, decode_centers, evaluate, greedy_match, learning_rate, load_pipeline, mask_iou, predict,
    scene_targets, train,
)

CAR = [10.0, 0.0, 0.8, 1.8, 4.2, 1.6, 0.0, 0]


def tiny_cfg(**kw) -> PipelineConfig:
    base = dict(steps=3, blocks_per_stage=1, stages=1, seed=0)
    base.update(kw)
    return PipelineConfig(**base)


# -- scenes -------------------------------------------------------------------


def test_scene_generation_is_deterministic(tmp_path):
    a, b = generate_scene(11), generate_scene(11)
    assert a.points.tobytes() == b.points.tobytes()
    assert a.image_feat.tobytes() == b.image_feat.tobytes()
    save_scene(tmp_path / "s.json", a)
    back = load_scene(tmp_path / "s.json")
    np.testing.assert_array_equal(back.points, a.points)
    np.testing.assert_array_equal(back.boxes, a.boxes)
    np.testing.assert_array_equal(back.image_feat, a.image_feat)


def test_splits_do_not_share_scenes():
    train_seeds = {s.seed for s in generate_scenes(3, 8, split=0)}
    test_seeds = {s.seed for s in generate_scenes(3, 8, split=1)}
    assert not train_seeds & test_seeds


def test_zero_box_scene_has_only_ground_points():
    s = generate_scene(5, boxes=np.zeros((0, 8)))
    assert len(s.boxes) == 0
    assert len(s.points) > 0
    assert np.all(s.point_source == GROUND)
    assert not scene_targets(s, GenConfig().geometry).mask.any()


def test_ray_box_hit_distance():
    t, hit = cast_rays(np.array([0.0, 0.0, 0.8]), np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
                       np.array([CAR]))
    # near face at x = 10 - 4.2 / 2, t scales with the direction length
    np.testing.assert_allclose(t[:2], [7.9, 3.95], atol=1e-12)
    assert list(hit) == [0, 0, MISS]


def test_noise_free_points_lie_on_surfaces():
    cfg = GenConfig()
    pts, src = simulate_lidar(np.random.default_rng(0), cfg, np.array([CAR]), dropout=False, noise=False)
    ground = pts[src == GROUND]
    assert np.abs(ground[:, 2]).max() < 1e-6
    on_box = pts[src == 0]
    assert len(on_box) > 0
    local = on_box[:, :3] - np.array(CAR[:3])
    half = np.array([CAR[4], CAR[3], CAR[5]]) / 2
    gap = np.min(np.abs(np.abs(local) - half), axis=1)
    assert gap.max() < 1e-6
    assert np.all(np.abs(local) <= half + 1e-6)


def test_occluded_box_loses_most_returns():
    cfg = GenConfig()
    rear = [12.0, 0.0, 0.8, 1.8, 4.2, 1.6, 0.0, 0]
    front = [6.0, 0.0, 1.0, 2.6, 1.0, 2.0, 0.0, 0]
    # oracle: count rays that reach the rear box with and without the blocker
    rays = lidar_rays(cfg)
    origin = np.array([0.0, 0.0, cfg.lidar_height_m])
    _, alone = cast_rays(origin, rays, np.array([rear]), cfg.max_range_m)
    _, both = cast_rays(origin, rays, np.array([rear, front]), cfg.max_range_m)
    n_alone, n_both = int(np.sum(alone == 0)), int(np.sum(both == 0))
    assert n_alone > 20
    assert n_both <= 0.2 * n_alone
    _, src = simulate_lidar(np.random.default_rng(0), cfg, np.array([rear, front]), dropout=False, noise=False)
    assert int(np.sum(src == 0)) == n_both


# -- degradations ---------------------------------------------------------------


@pytest.mark.parametrize("kind", ["one_hot_noise", "random_noise", "spatial_misalignment"])
def test_zero_magnitude_is_identity(kind, rng):
    x = rng.standard_normal((4, 6, 6))
    assert inject_degradation(x, kind, 0, rng) is x


def test_unknown_degradation_rejected():
    with pytest.raises(ValueError):
        Degradation("blur", 1.0)


def test_one_hot_noise_replaces_requested_fraction(rng):
    depth = rng.dirichlet(np.ones(8), size=(5, 7)).transpose(2, 0, 1)
    out = one_hot_noise(depth, 1.0, rng)
    assert np.all(np.sort(out, axis=0)[-1] == 1.0)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)
    half = one_hot_noise(depth, 0.5, np.random.default_rng(1))
    changed = np.any(half != depth, axis=0).mean()
    assert 0.2 < changed < 0.8


def test_random_noise_is_additive(rng):
    x = rng.standard_normal((3, 4, 4))
    out = random_noise(x, 1.0, np.random.default_rng(2))
    r = out - x
    assert abs(r.std() - 1.0) < 0.3


def test_misalignment_peak_at_shift(rng):
    grid = rng.standard_normal((2, 32, 32))
    out = spatial_misalignment(grid, (2, 0))
    # circular cross-correlation peak locates the shift
    f = np.fft.ifft2(np.fft.fft2(out) * np.conj(np.fft.fft2(grid))).real.sum(axis=0)
    dy, dx = np.unravel_index(np.argmax(f), f.shape)
    assert (dx, dy) == (2, 0)
    assert np.all(out[:, :, :2] == 0)
    np.testing.assert_array_equal(spatial_misalignment(grid, 2), out)


# -- pipeline -----------------------------------------------------------------


def test_parameter_counts():
    full = build_pipeline(PipelineConfig())
    base = build_pipeline(PipelineConfig(use_svdb=False, use_sbdb=False))
    naive = build_pipeline(PipelineConfig(mode="naive_concat"))
    assert full.num_parameters() > base.num_parameters()
    assert full.num_parameters() > naive.num_parameters()
    for head in (full.mask_head, full.heat_head):
        assert head.num_parameters() <= 5000


def test_naive_mode_forces_modules_off():
    cfg = PipelineConfig(mode="naive_concat", use_svdb=True, use_sbdb=True)
    assert not cfg.use_svdb and not cfg.use_sbdb


@pytest.mark.parametrize("kw", [{"mode": "late"}, {"tau": 1.5}, {"steps": -1}, {"lr_schedule": "step"}])
def test_invalid_pipeline_config(kw):
    with pytest.raises(ValueError):
        PipelineConfig(**kw).validate()


def test_empty_scene_forward_is_finite():
    pipe = build_pipeline(tiny_cfg())
    scene = generate_scene(2, boxes=np.zeros((0, 8)))
    with no_grad():
        out = pipe(scene)
    for arr in (out.mask_prob.data, out.heat_prob.data):
        assert np.all(np.isfinite(arr))
    assert not scene_targets(scene, pipe.geometry).mask.any()


def test_training_step_gradients_finite():
    cfg = tiny_cfg(steps=1)
    res = train(cfg, [generate_scene(4)])
    assert np.isfinite(res.metrics.loss_curve[0])


def test_zero_learning_rate_keeps_loss_constant():
    res = train(tiny_cfg(steps=4, lr=0.0), [generate_scene(6)])
    curve = np.array(res.metrics.loss_curve)
    assert np.abs(curve - curve[0]).max() < 1e-12


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg(steps=2)
    scene = generate_scene(8)
    res = train(cfg, [scene], checkpoint=str(tmp_path / "ck.bin"))
    back = load_pipeline(cfg, str(tmp_path / "ck.bin"))
    with no_grad():
        a, b = res.pipeline(scene), back(scene)
    assert a.mask_prob.data.tobytes() == b.mask_prob.data.tobytes()
    assert a.heat_prob.data.tobytes() == b.heat_prob.data.tobytes()


def test_one_cycle_schedule_peaks_at_lr():
    cfg = PipelineConfig(lr_schedule="one_cycle", steps=100, lr=1e-2)
    lrs = [learning_rate(cfg, s) for s in range(100)]
    assert max(lrs) == pytest.approx(1e-2)
    assert lrs[0] < 1e-3 and lrs[-1] < 1e-5


# -- metrics ------------------------------------------------------------------


def test_mask_iou_edge_cases():
    m = np.zeros((4, 4), bool)
    m[1:3, 1:3] = True
    assert mask_iou([m], [m]) == 1.0
    assert mask_iou([np.zeros_like(m)], [m]) == 0.0
    assert mask_iou([np.zeros_like(m)], [np.zeros_like(m)]) == 1.0


def test_center_mae_perfect_and_missing():
    gt = [np.array([[1.0, 2.0], [5.0, 5.0]])]
    assert center_mae(gt, gt) == 0.0
    assert center_mae([np.zeros((0, 2))], gt) == 2.0
    assert center_mae([np.array([[1.5, 2.0]])], gt) == pytest.approx((0.5 + 2.0) / 2)


def test_greedy_match_takes_closest_first():
    pairs = greedy_match(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[0.9, 0.0]]))
    assert pairs == [(1, 0, pytest.approx(0.1))]


def test_decode_centers_recovers_peak():
    geom = GenConfig().geometry
    heat = np.zeros((geom.ny, geom.nx))
    heat[20, 30] = 0.9
    heat[20, 31] = 0.45
    heat[20, 29] = 0.45
    c = decode_centers(heat, geom, 0.3)
    xc, yc = geom.cell_centers()
    np.testing.assert_allclose(c, [[xc[20, 30], yc[20, 30]]], atol=1e-12)


def test_evaluate_matches_independent_recount():
    pipe = build_pipeline(tiny_cfg())
    scenes = generate_scenes(0, 10)
    got = evaluate(pipe, scenes)
    inter = union = 0
    for s in scenes:
        pred, _ = predict(pipe, s)
        gt = scene_targets(s, pipe.geometry).mask > 0.5
        cells_p = {tuple(c) for c in np.argwhere(pred)}
        cells_g = {tuple(c) for c in np.argwhere(gt)}
        inter += len(cells_p & cells_g)
        union += len(cells_p | cells_g)
    assert got.mask_iou == pytest.approx(inter / union, abs=1e-12)


# -- robustness report ----------------------------------------------------------


def test_relative_drop():
    assert relative_drop(0.5, 0.4) == pytest.approx(0.2)
    assert relative_drop(0.0, 0.3) == 0.0


def test_robustness_csv_schema(tmp_path):
    rows = [
        RobustnessRow("r0", "lidar_centric", "spatial_misalignment", 0, 0.6, 0.5),
        RobustnessRow("r0", "lidar_centric", "spatial_misalignment", (2, 0), 0.5, 0.7),
    ]
    path = tmp_path / "rob.csv"
    write_robustness_csv(path, rows)
    back = read_robustness_csv(path)
    assert list(back[0]) == CSV_FIELDS
    assert back[1]["magnitude"] == "2 0"
    d = drops(rows)
    assert len(d) == 1 and d[0]["mask_iou_drop"] == pytest.approx(1 / 6)
    assert mean_drops(d) == {("lidar_centric", "spatial_misalignment", "2 0"): pytest.approx(1 / 6)}


def test_robustness_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_robustness_csv(p)
