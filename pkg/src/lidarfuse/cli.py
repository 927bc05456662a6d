"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.  On
failure a single ``lidarfuse-error: {json}`` line is written to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, apply_overrides, load_run_config, write_resolved_config

log = logging.getLogger("lidarfuse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _error_line(kind: str, message: str) -> str:
    return "lidarfuse-error: " + json.dumps({"type": kind, "message": message}, sort_keys=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, out / "resolved_config.toml")
    return out


def _scenes(cfg: RunConfig, split: int, count: int | None = None):
    from .harness.scene import generate_scenes

    n = count if count is not None else (cfg.data.train_scenes if split == 0 else cfg.data.test_scenes)
    return generate_scenes(cfg.seed, n, cfg.scene, split=split, workers=cfg.threads)


def _load_pipe(cfg: RunConfig, args, out: Path):
    from .harness.train import load_pipeline

    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found; run 'train' first or pass --checkpoint")
    return load_pipeline(cfg.pipeline_config(seed=cfg.seed), str(ckpt))


# -- subcommands --------------------------------------------------------------


def cmd_gen_scenes(cfg: RunConfig, args) -> int:
    from .harness.scene import save_scene

    out = _prepare_out(cfg)
    split = {"train": 0, "test": 1}[args.split]
    scene_dir = out / "scenes"
    scene_dir.mkdir(exist_ok=True)
    scenes = _scenes(cfg, split, args.count)
    for i, s in enumerate(scenes):
        save_scene(scene_dir / f"{args.split}_{i:04d}.json", s)
    print(f"wrote {len(scenes)} scenes to {scene_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    from .harness.train import train
    from .plotting import plot_loss_curve

    out = _prepare_out(cfg)
    scenes = _scenes(cfg, 0)
    res = train(cfg.pipeline_config(seed=cfg.seed), scenes, checkpoint=str(out / "checkpoint.bin"))
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "total_loss", "mask_loss"])
        for i, (t, m) in enumerate(zip(res.metrics.loss_curve, res.mask_loss_curve)):
            w.writerow([i, f"{t:.10g}", f"{m:.10g}"])
    plot_loss_curve(out / "loss_curve.svg", res.metrics.loss_curve, res.mask_loss_curve)
    summary = {
        "train_mask_iou": res.metrics.mask_iou,
        "train_center_mae_m": res.metrics.center_mae_m,
        "initial_mask_loss": res.initial_mask_loss,
        "final_mask_loss": res.final_mask_loss,
        "num_parameters": res.pipeline.num_parameters(),
        "steps": len(res.metrics.loss_curve),
    }
    _write_json(out / "train_metrics.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    from .harness.degrade import Degradation
    from .harness.robustness import RobustnessRow, write_robustness_csv
    from .harness.train import evaluate

    out = _prepare_out(cfg)
    pipe = _load_pipe(cfg, args, out)
    scenes = _scenes(cfg, 1)
    deg = None
    if args.degradation:
        mag = args.magnitude if args.magnitude is not None else 0.0
        deg = Degradation(args.degradation, mag, cfg.seed)
    m = evaluate(pipe, scenes, deg, workers=cfg.threads)
    row = RobustnessRow(
        "eval", cfg.pipeline.mode, args.degradation or "none", deg.magnitude if deg else 0, m.mask_iou, m.center_mae_m
    )
    write_robustness_csv(out / "eval_metrics.csv", [row])
    result = {"mask_iou": m.mask_iou, "center_mae_m": m.center_mae_m, "scenes": len(scenes)}
    _write_json(out / "eval_metrics.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_robustness(cfg: RunConfig, args) -> int:
    from .harness.robustness import drops, mean_drops, replicate_experiment, write_drops_csv, write_robustness_csv
    from .plotting import plot_robustness

    out = _prepare_out(cfg)
    rows = replicate_experiment(
        cfg.pipeline_config(), cfg.data.replicates, cfg.data.train_scenes, cfg.data.test_scenes,
        cfg.sweep(), cfg.seed, cfg.threads,
    )
    write_robustness_csv(out / "robustness.csv", rows)
    d = drops(rows)
    write_drops_csv(out / "robustness_drops.csv", d)
    iou = mean_drops(d, "mask_iou_drop")
    mae = mean_drops(d, "center_mae_increase")
    plot_robustness(out / "robustness.svg", iou)
    summary = []
    for (mode, kind, mag), v in sorted(iou.items()):
        summary.append({"mode": mode, "degradation": kind, "magnitude": mag,
                        "mean_mask_iou_drop": v, "mean_center_mae_increase": mae[(mode, kind, mag)]})
    _write_json(out / "robustness_summary.json", summary)
    for s in summary:
        print(f"{s['mode']:14s} {s['degradation']:21s} {s['magnitude']:>5s} "
              f"iou_drop={s['mean_mask_iou_drop']:+.4f} mae_increase={s['mean_center_mae_increase']:+.4f}")
    return EXIT_OK


def _scene_for_viz(cfg: RunConfig, index: int):
    scenes = _scenes(cfg, 1, index + 1)
    return scenes[index]


def cmd_viz_sampling(cfg: RunConfig, args) -> int:
    from .autograd import no_grad
    from .plotting import plot_sampling
    from .sbdb import export_sampling_locations, write_sampling_csv

    out = _prepare_out(cfg)
    pipe = _load_pipe(cfg, args, out)
    if not pipe.cfg.use_sbdb:
        raise UsageError("viz-sampling needs a pipeline with use_sbdb = true")
    scene = _scene_for_viz(cfg, args.scene_index)
    with no_grad():
        pipe(scene)
    # query: the first box center, or the grid center for an empty scene
    if len(scene.boxes):
        ix, iy, _ = pipe.geometry.to_cell(scene.boxes[:1, 0], scene.boxes[:1, 1])
        q0 = (int(ix[0]), int(iy[0]))
    else:
        q0 = (pipe.geometry.nx // 2, pipe.geometry.ny // 2)
    records, queries = [], {}
    for s, b, blk in pipe.sbdb_blocks():
        f = 2 ** (s + 1)
        q = (q0[0] // f, q0[1] // f)
        queries[(s, b)] = q
        for x, y, m, g, k in export_sampling_locations(blk, q, args.threshold):
            records.append((s, b, g, k, x, y, m))
    write_sampling_csv(out / "sampling.csv", records)
    plot_sampling(out / "sampling.svg", records, queries)
    print(f"wrote {len(records)} sampling points to {out / 'sampling.csv'}")
    return EXIT_OK


def cmd_viz_occupancy(cfg: RunConfig, args) -> int:
    from .autograd import no_grad
    from .harness.train import scene_targets
    from .plotting import plot_occupancy
    from .svdb import write_occupancy_csv

    out = _prepare_out(cfg)
    pipe = _load_pipe(cfg, args, out)
    if not pipe.cfg.use_svdb:
        raise UsageError("viz-occupancy needs a pipeline with use_svdb = true")
    scene = _scene_for_viz(cfg, args.scene_index)
    with no_grad():
        res = pipe(scene).dilation
    write_occupancy_csv(out / "occupancy.csv", res)
    gt = scene_targets(scene, pipe.geometry).mask
    plot_occupancy(out / "occupancy.svg", res.refined.coords, res.is_dilated, (pipe.geometry.nx, pipe.geometry.ny), gt)
    n_dil = int(np.sum(res.is_dilated))
    print(f"{len(res.is_dilated) - n_dil} original and {n_dil} dilated cells written to {out / 'occupancy.csv'}")
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import report, run_checks

    out = _prepare_out(cfg)
    results = run_checks(seed=cfg.seed)
    text = report(results)
    (out / "selftest.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "generate synthetic scenes as JSON"),
    "train": (cmd_train, "train a pipeline and write a checkpoint"),
    "eval": (cmd_eval, "evaluate a checkpoint on held-out scenes"),
    "robustness": (cmd_robustness, "camera-corruption sweep over both fusion modes"),
    "viz-sampling": (cmd_viz_sampling, "export deformable sampling locations"),
    "viz-occupancy": (cmd_viz_occupancy, "export original and dilated BEV occupancy"),
    "selftest": (cmd_selftest, "run the built-in oracle and gradient checks"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(_error_line("usage", message) + "\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--out", dest="out_dir", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="run seed (overrides RUN_SEED and the config)")
    common.add_argument("--threads", type=int, help="worker processes and BLAS threads; 1 is bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="lidarfuse", description="LiDAR-centric BEV fusion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "gen-scenes":
            p.add_argument("--count", type=int, default=None)
            p.add_argument("--split", choices=["train", "test"], default="train")
        if name in ("eval", "viz-sampling", "viz-occupancy"):
            p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.bin)")
        if name == "eval":
            p.add_argument("--degradation", choices=["one_hot_noise", "random_noise", "spatial_misalignment"])
            p.add_argument("--magnitude", type=float)
        if name in ("viz-sampling", "viz-occupancy"):
            p.add_argument("--scene-index", type=int, default=0)
        if name == "viz-sampling":
            p.add_argument("--threshold", type=float, default=0.01, help="minimum modulation to export")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_run_config(args.config), args.seed, args.out_dir, args.threads)
        if getattr(args, "count", None) is not None and args.count < 0:
            raise UsageError("--count must be non-negative")
    except (ConfigError, UsageError) as e:
        sys.stderr.write(_error_line("config", str(e)) + "\n")
        return EXIT_USAGE
    fn = COMMANDS[args.command][0]
    try:
        with threadpool_limits(limits=cfg.threads):
            return fn(cfg, args)
    except UsageError as e:
        sys.stderr.write(_error_line("usage", str(e)) + "\n")
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        sys.stderr.write(_error_line(type(e).__name__, str(e)) + "\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
