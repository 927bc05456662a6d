"""Clean vs corrupted-camera evaluation of a LiDAR-centric and a naive-concat pipeline."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degrade import DEFAULT_MAGNITUDES, KINDS, Degradation
from .pipeline import Pipeline, PipelineConfig
from .scene import Scene, generate_scenes
from .train import evaluate, train

log = logging.getLogger(__name__)

CSV_FIELDS = ["run_id", "mode", "degradation", "magnitude", "mask_iou", "center_mae_m"]
DROP_FIELDS = [
    "run_id", "mode", "degradation", "magnitude",
    "clean_mask_iou", "mask_iou", "mask_iou_drop", "clean_center_mae_m", "center_mae_m", "center_mae_increase",
]


@dataclass
class RobustnessRow:
    run_id: str
    mode: str
    degradation: str
    magnitude: float | tuple
    mask_iou: float
    center_mae_m: float


def relative_drop(clean: float, degraded: float) -> float:
    """Fractional loss of a higher-is-better metric."""
    return 0.0 if clean == 0 else (clean - degraded) / clean


def relative_increase(clean: float, degraded: float) -> float:
    """Fractional growth of a lower-is-better metric."""
    if clean == 0:
        return 0.0 if degraded == 0 else float("inf")
    return (degraded - clean) / clean


def default_sweep() -> list[tuple[str, object]]:
    return [(k, DEFAULT_MAGNITUDES[k]) for k in KINDS]


def _fmt_mag(m) -> str:
    a = np.atleast_1d(np.asarray(m))
    return " ".join(f"{v:g}" for v in a)


def robustness_experiment(
    pipelines: dict[str, Pipeline],
    scenes: list[Scene],
    degradations: list[tuple[str, object]] | None = None,
    run_id: str = "run0",
    seed: int = 0,
    workers: int = 1,
) -> list[RobustnessRow]:
    """Evaluate every pipeline clean (magnitude 0 per kind) and under each (kind, magnitude)."""
    degradations = degradations if degradations is not None else default_sweep()
    rows = []
    for mode, pipe in pipelines.items():
        clean = evaluate(pipe, scenes, workers=workers)
        kinds_seen = []
        for kind, mag in degradations:
            if kind not in kinds_seen:
                kinds_seen.append(kind)
                rows.append(RobustnessRow(run_id, mode, kind, 0, clean.mask_iou, clean.center_mae_m))
            if not np.any(np.asarray(mag)):
                continue
            m = evaluate(pipe, scenes, Degradation(kind, mag, seed), workers=workers)
            rows.append(RobustnessRow(run_id, mode, kind, mag, m.mask_iou, m.center_mae_m))
    return rows


def replicate_experiment(
    base: PipelineConfig,
    replicates: int = 3,
    train_count: int = 32,
    test_count: int = 16,
    degradations: list[tuple[str, object]] | None = None,
    seed: int = 0,
    workers: int = 1,
) -> list[RobustnessRow]:
    """Train both modes on identical scenes and seeds per replicate, then sweep corruptions."""
    rows: list[RobustnessRow] = []
    for r in range(replicates):
        rs = seed + r
        train_set = generate_scenes(rs, train_count, base.scene, split=0, workers=workers)
        test_set = generate_scenes(rs, test_count, base.scene, split=1, workers=workers)
        pipes = {}
        for mode in ("lidar_centric", "naive_concat"):
            cfg = base.replace(mode=mode, seed=rs)
            log.info("replicate %d: training %s", r, mode)
            pipes[mode] = train(cfg, train_set).pipeline
        rows.extend(robustness_experiment(pipes, test_set, degradations, run_id=f"r{r}", seed=rs, workers=workers))
    return rows


def drops(rows: list[RobustnessRow]) -> list[dict]:
    """Relative degradation of each corrupted row against its (run, mode, kind) clean row."""
    clean = {(r.run_id, r.mode, r.degradation): r for r in rows if not np.any(np.asarray(r.magnitude))}
    out = []
    for r in rows:
        if not np.any(np.asarray(r.magnitude)):
            continue
        c = clean[(r.run_id, r.mode, r.degradation)]
        out.append({
            "run_id": r.run_id, "mode": r.mode, "degradation": r.degradation, "magnitude": _fmt_mag(r.magnitude),
            "clean_mask_iou": c.mask_iou, "mask_iou": r.mask_iou,
            "mask_iou_drop": relative_drop(c.mask_iou, r.mask_iou),
            "clean_center_mae_m": c.center_mae_m, "center_mae_m": r.center_mae_m,
            "center_mae_increase": relative_increase(c.center_mae_m, r.center_mae_m),
        })
    return out


def mean_drops(drop_rows: list[dict], key: str = "mask_iou_drop") -> dict[tuple[str, str, str], float]:
    """Average a drop column over run replicates, keyed by (mode, kind, magnitude)."""
    acc: dict[tuple[str, str, str], list[float]] = {}
    for d in drop_rows:
        acc.setdefault((d["mode"], d["degradation"], d["magnitude"]), []).append(d[key])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_robustness_csv(path: str | Path, rows: list[RobustnessRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.run_id, r.mode, r.degradation, _fmt_mag(r.magnitude), f"{r.mask_iou:.6f}", f"{r.center_mae_m:.6f}"])


def write_drops_csv(path: str | Path, drop_rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, DROP_FIELDS, lineterminator="\n")
        w.writeheader()
        for d in drop_rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in d.items()})


def read_robustness_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"unexpected robustness CSV header {reader.fieldnames}")
        return list(reader)
