"""Targets, losses, the training loop and evaluation metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .. import functional as F
from ..autograd import no_grad
from ..geometry import BEVGeometry
from ..nn import Adam
from ..snapshot import load_checkpoint, save_checkpoint
from ..svdb import mask_ground_truth
from .degrade import Degradation
from .parallel import parallel_map
from .pipeline import Pipeline, PipelineConfig, PipelineOutput, SceneInputs, build_pipeline
from .scene import Scene

log = logging.getLogger(__name__)

MATCH_RADIUS_M = 2.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Targets:
    mask: np.ndarray  # Y×X {0,1}
    heat: np.ndarray  # Y×X {0,1}
    centers: np.ndarray  # K×2 metric box centers


@dataclass
class Metrics:
    mask_iou: float
    center_mae_m: float
    loss_curve: list[float] = field(default_factory=list)


@dataclass
class TrainResult:
    pipeline: Pipeline
    metrics: Metrics
    mask_loss_curve: list[float]
    initial_mask_loss: float
    final_mask_loss: float


def heat_target(centers: np.ndarray, geometry: BEVGeometry, radius: int = 1) -> np.ndarray:
    """1 on the (2r+1)² block of cells around each box-center cell."""
    heat = np.zeros((geometry.ny, geometry.nx))
    if len(centers):
        ix, iy, ok = geometry.to_cell(centers[:, 0], centers[:, 1])
        for x, y in zip(ix[ok], iy[ok]):
            heat[max(0, y - radius) : y + radius + 1, max(0, x - radius) : x + radius + 1] = 1.0
    return heat


def scene_targets(scene: Scene, geometry: BEVGeometry) -> Targets:
    centers = scene.boxes[:, :2].copy() if len(scene.boxes) else np.zeros((0, 2))
    return Targets(mask_ground_truth(scene.bev_boxes(), geometry), heat_target(centers, geometry), centers)


def losses(out: PipelineOutput, tgt: Targets, cfg: PipelineConfig) -> dict:
    parts = {
        "mask": F.focal_loss(out.mask_prob, tgt.mask),
        "heat": F.focal_loss(out.heat_prob, tgt.heat),
    }
    total = parts["mask"] + parts["heat"] * cfg.heat_loss_weight
    if out.svdb_prob is not None:
        parts["svdb"] = F.focal_loss(out.svdb_prob, tgt.mask)
        total = total + parts["svdb"] * cfg.svdb_loss_weight
    parts["total"] = total
    return parts


# -- metrics ------------------------------------------------------------------


def mask_iou(pred: list[np.ndarray], gt: list[np.ndarray]) -> float:
    """Pooled intersection over union of boolean masks; 1.0 when both are empty everywhere."""
    inter = sum(int(np.sum(np.asarray(p, bool) & np.asarray(g, bool))) for p, g in zip(pred, gt))
    union = sum(int(np.sum(np.asarray(p, bool) | np.asarray(g, bool))) for p, g in zip(pred, gt))
    return 1.0 if union == 0 else inter / union


def greedy_match(pred: np.ndarray, gt: np.ndarray, radius: float = MATCH_RADIUS_M) -> list[tuple[int, int, float]]:
    """Repeatedly pair the closest remaining (pred, gt) centers lying within ``radius``."""
    pred, gt = np.asarray(pred).reshape(-1, 2), np.asarray(gt).reshape(-1, 2)
    if not len(pred) or not len(gt):
        return []
    d = np.hypot(pred[:, None, 0] - gt[None, :, 0], pred[:, None, 1] - gt[None, :, 1])
    order = np.argsort(d, axis=None, kind="stable")
    used_p, used_g, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), len(gt))
        if d[i, j] > radius:
            break
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, float(d[i, j])))
    return pairs


def center_mae(pred: list[np.ndarray], gt: list[np.ndarray], radius: float = MATCH_RADIUS_M) -> float:
    """Mean center error over all true boxes; a box left unmatched counts as ``radius``."""
    errors: list[float] = []
    for p, g in zip(pred, gt):
        pairs = greedy_match(p, g, radius)
        errors.extend(e for _, _, e in pairs)
        errors.extend([radius] * (len(np.asarray(g).reshape(-1, 2)) - len(pairs)))
    return float(np.mean(errors)) if errors else 0.0


def decode_centers(heat: np.ndarray, geometry: BEVGeometry, threshold: float) -> np.ndarray:
    """Local maxima (3×3) above ``threshold``, refined by the heat-weighted centroid of the 3×3 patch."""
    ny, nx = heat.shape
    padded = np.pad(heat, 1, constant_values=-np.inf)
    windows = np.stack([padded[dy : dy + ny, dx : dx + nx] for dy in range(3) for dx in range(3)])
    peak = (heat >= windows.max(axis=0)) & (heat > threshold)
    # suppress plateau duplicates: keep the first cell in raster order
    ys, xs = np.nonzero(peak)
    taken = np.zeros_like(peak)
    xc, yc = geometry.cell_centers()
    out = []
    for y, x in zip(ys, xs):
        if taken[max(0, y - 1) : y + 2, max(0, x - 1) : x + 2].any():
            continue
        taken[y, x] = True
        sl = (slice(max(0, y - 1), y + 2), slice(max(0, x - 1), x + 2))
        w = heat[sl]
        out.append([float((w * xc[sl]).sum() / w.sum()), float((w * yc[sl]).sum() / w.sum())])
    return np.array(out).reshape(-1, 2)


# -- training -----------------------------------------------------------------


def learning_rate(cfg: PipelineConfig, step: int) -> float:
    """Constant, or one-cycle: cosine warm-up from lr/25 over the first 30% of steps, cosine decay to lr/25e4."""
    if cfg.lr_schedule == "constant" or cfg.steps <= 1:
        return cfg.lr
    start, end = cfg.lr / 25.0, cfg.lr / 25.0e4
    up = max(1, int(round(0.3 * cfg.steps)))
    if step < up:
        frac = step / up
        return start + (cfg.lr - start) * (1 - np.cos(np.pi * frac)) / 2
    frac = (step - up) / max(1, cfg.steps - 1 - up)
    return end + (cfg.lr - end) * (1 + np.cos(np.pi * frac)) / 2


def _mean_mask_loss(pipe: Pipeline, inputs: list[SceneInputs], targets: list[Targets]) -> float:
    with no_grad():
        return float(np.mean([F.focal_loss(pipe.forward(i).mask_prob, t.mask).item() for i, t in zip(inputs, targets)]))


def train(cfg: PipelineConfig, scenes: list[Scene], checkpoint: str | None = None) -> TrainResult:
    """Adam over single-scene steps in seeded epoch order."""
    if not scenes:
        raise ValueError("training needs at least one scene")
    pipe = build_pipeline(cfg)
    inputs = [pipe.prepare(s) for s in scenes]
    targets = [scene_targets(s, pipe.geometry) for s in scenes]
    opt = Adam(pipe.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    initial = _mean_mask_loss(pipe, inputs, targets)
    curve, mask_curve = [], []
    order: list[int] = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(scenes)))
        k = order.pop(0)
        parts = losses(pipe.forward(inputs[k]), targets[k], cfg)
        total = parts["total"]
        if not np.isfinite(total.item()):
            detail = ", ".join(f"{n}={p.item():.6g}" for n, p in parts.items())
            raise TrainingDiverged(f"non-finite loss at step {step} (scene {k}): {detail}")
        total.backward()
        bad = [n for n, p in pipe.named_parameters() if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            raise TrainingDiverged(f"non-finite gradients at step {step} in {bad[:5]}")
        opt.lr = learning_rate(cfg, step)
        opt.step()
        opt.zero_grad()
        curve.append(total.item())
        mask_curve.append(parts["mask"].item())
        if step % 20 == 0:
            log.info("step %d loss %.5f mask %.5f", step, curve[-1], mask_curve[-1])
    final = _mean_mask_loss(pipe, inputs, targets)
    if checkpoint is not None:
        save_checkpoint(checkpoint, pipe.state_dict())
    metrics = evaluate(pipe, scenes)
    metrics.loss_curve = curve
    return TrainResult(pipe, metrics, mask_curve, initial, final)


def load_pipeline(cfg: PipelineConfig, checkpoint: str) -> Pipeline:
    pipe = build_pipeline(cfg)
    pipe.load_state_dict(load_checkpoint(checkpoint))
    return pipe


def predict(pipe: Pipeline, scene: Scene, degradation: Degradation | None = None, rng=None):
    """(foreground mask, decoded centers) for one scene."""
    with no_grad():
        out = pipe(scene, degradation, rng)
    return out.mask_prob.data > pipe.cfg.tau, decode_centers(out.heat_prob.data, pipe.geometry, pipe.cfg.heat_threshold)


def _predict_indexed(job, pipe: Pipeline, degradation: Degradation | None):
    i, scene = job
    seed = degradation.seed if degradation is not None else 0
    return predict(pipe, scene, degradation, np.random.default_rng([seed, i]))


def evaluate(pipe: Pipeline, scenes: list[Scene], degradation: Degradation | None = None, workers: int = 1) -> Metrics:
    """Pooled mask IoU at tau and center MAE; corruption RNG is seeded per scene index."""
    preds = parallel_map(partial(_predict_indexed, pipe=pipe, degradation=degradation), list(enumerate(scenes)), workers)
    targets = [scene_targets(s, pipe.geometry) for s in scenes]
    return Metrics(
        mask_iou([m for m, _ in preds], [t.mask > 0.5 for t in targets]),
        center_mae([c for _, c in preds], [t.centers for t in targets]),
    )
