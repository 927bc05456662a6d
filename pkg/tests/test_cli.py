import json

import numpy as np
import pytest

from lidarfuse.cli import main
from lidarfuse.config import ConfigError, apply_overrides, load_run_config, run_config_from_dict
from lidarfuse.harness.robustness import read_robustness_csv
from lidarfuse.plotting import plot_loss_curve, plot_occupancy, plot_robustness


def write(path, text):
    path.write_text(text)
    return path


# -- config -------------------------------------------------------------------


def test_defaults_without_file():
    cfg = load_run_config(None)
    assert cfg.seed == 0 and cfg.threads == 1
    assert cfg.pipeline.mode == "lidar_centric"


def test_file_values_and_types(tmp_path):
    p = write(tmp_path / "c.toml", 'seed = 4\n[pipeline]\nsteps = 10\nlr = 1\n[scene]\nnum_boxes = [2, 3]\n')
    cfg = load_run_config(p)
    assert cfg.seed == 4 and cfg.pipeline.steps == 10
    assert cfg.pipeline.lr == 1.0 and isinstance(cfg.pipeline.lr, float)
    assert cfg.scene.num_boxes == (2, 3)
    assert cfg.pipeline_config().scene.num_boxes == (2, 3)


@pytest.mark.parametrize("text", [
    "bogus = 1\n",
    "[pipeline]\nfoo = 1\n",
    "[scene]\ngrid_nx = 'wide'\n",
    "[robustness]\nblur = [1]\n",
    "[pipeline]\nuse_svdb = 1\n",
])
def test_bad_config_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path / "c.toml", text))


def test_malformed_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(write(tmp_path / "c.toml", "seed = = 1\n"))


def test_override_precedence():
    cfg = run_config_from_dict({"seed": 1})
    assert apply_overrides(cfg, env={}).seed == 1
    assert apply_overrides(run_config_from_dict({"seed": 1}), env={"RUN_SEED": "7"}).seed == 7
    assert apply_overrides(run_config_from_dict({"seed": 1}), seed=9, env={"RUN_SEED": "7"}).seed == 9
    with pytest.raises(ConfigError):
        apply_overrides(run_config_from_dict({}), env={"RUN_SEED": "x"})
    with pytest.raises(ConfigError):
        apply_overrides(run_config_from_dict({}), threads=0, env={})


def test_sweep_accepts_vector_shift():
    cfg = run_config_from_dict({"robustness": {"spatial_misalignment": [[2, 1], 3]}})
    assert ("spatial_misalignment", (2, 1)) in cfg.sweep()
    assert ("spatial_misalignment", 3) in cfg.sweep()


# -- command line ---------------------------------------------------------------


def test_bad_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--bogus"])
    assert e.value.code == 2
    err = capsys.readouterr().err
    line = [l for l in err.splitlines() if l.startswith("lidarfuse-error: ")][0]
    assert json.loads(line.split(": ", 1)[1])["type"] == "usage"


def test_bad_config_exits_2(tmp_path, capsys):
    p = write(tmp_path / "c.toml", "[pipeline]\nmode = 'late'\n")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "lidarfuse-error" in capsys.readouterr().err


def test_eval_without_checkpoint_exits_2(tmp_path):
    assert main(["eval", "--out", str(tmp_path / "o")]) == 2


def test_gen_scenes_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-scenes", "--seed", "3", "--count", "3", "--out", str(tmp_path / name)]) == 0
    files = sorted((tmp_path / "a" / "scenes").iterdir())
    assert len(files) == 3
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / "scenes" / f.name).read_bytes()
    assert (tmp_path / "a" / "resolved_config.toml").exists()


def test_train_eval_viz_small(tmp_path):
    cfg = write(tmp_path / "c.toml", "[pipeline]\nsteps = 3\nstages = 1\nblocks_per_stage = 1\n"
                "[data]\ntrain_scenes = 2\ntest_scenes = 2\n")
    out = str(tmp_path / "run")
    common = ["--config", str(cfg), "--out", out]
    assert main(["train", *common]) == 0
    for f in ("checkpoint.bin", "train_metrics.json", "loss_curve.csv", "loss_curve.svg"):
        assert (tmp_path / "run" / f).exists()
    assert main(["eval", *common, "--degradation", "one_hot_noise", "--magnitude", "0.5"]) == 0
    lines = (tmp_path / "run" / "eval_metrics.csv").read_text().splitlines()
    assert lines[0] == "run_id,mode,degradation,magnitude,mask_iou,center_mae_m"
    assert main(["viz-sampling", *common]) == 0
    assert (tmp_path / "run" / "sampling.csv").read_text().startswith("stage,block,group,k,x,y,modulation")
    assert main(["viz-occupancy", *common]) == 0
    statuses = {l.split(",")[2] for l in (tmp_path / "run" / "occupancy.csv").read_text().splitlines()[1:]}
    assert statuses <= {"original", "dilated"}


def test_viz_sampling_needs_sbdb(tmp_path):
    cfg = write(tmp_path / "c.toml", "[pipeline]\nsteps = 1\nstages = 1\nblocks_per_stage = 1\nuse_sbdb = false\n"
                "[data]\ntrain_scenes = 1\n")
    common = ["--config", str(cfg), "--out", str(tmp_path / "run")]
    assert main(["train", *common]) == 0
    assert main(["viz-sampling", *common]) == 2


# -- figures ----------------------------------------------------------------------


def test_figures_are_byte_stable(tmp_path):
    rng = np.random.default_rng(0)
    curve = list(np.exp(-np.linspace(0, 3, 50)))
    coords = np.column_stack([rng.integers(0, 16, (30, 2)), np.zeros(30, int)])
    dil = rng.uniform(size=30) > 0.7
    drops = {("lidar_centric", "one_hot_noise", "0.5"): 0.04, ("naive_concat", "one_hot_noise", "0.5"): 0.2}
    for name in ("a", "b"):
        plot_loss_curve(tmp_path / f"loss_{name}.svg", curve, curve)
        plot_occupancy(tmp_path / f"occ_{name}.svg", coords, dil, (16, 16))
        plot_robustness(tmp_path / f"rob_{name}.svg", drops)
    for stem in ("loss", "occ", "rob"):
        a = (tmp_path / f"{stem}_a.svg").read_bytes()
        assert a == (tmp_path / f"{stem}_b.svg").read_bytes()
        assert a.lstrip().startswith(b"<?xml")


def test_robustness_command_schema(tmp_path):
    cfg = write(tmp_path / "c.toml", "[pipeline]\nsteps = 2\nstages = 1\nblocks_per_stage = 1\n"
                "[data]\ntrain_scenes = 1\ntest_scenes = 1\nreplicates = 1\n"
                "[robustness]\none_hot_noise = [0.5]\nrandom_noise = [1.0]\nspatial_misalignment = [1, [2, 0]]\n")
    assert main(["robustness", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    rows = read_robustness_csv(tmp_path / "r" / "robustness.csv")
    # per mode: one clean row per kind plus four corrupted settings
    assert len(rows) == 2 * (3 + 4)
    assert {r["mode"] for r in rows} == {"lidar_centric", "naive_concat"}
    assert {r["magnitude"] for r in rows if r["degradation"] == "spatial_misalignment"} == {"0", "1", "2 0"}
    for name in ("robustness_drops.csv", "robustness_summary.json", "robustness.svg"):
        assert (tmp_path / "r" / name).exists()
