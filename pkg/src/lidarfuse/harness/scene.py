"""Synthetic driving scenes: oriented boxes on a ground plane, a ray-cast LiDAR and a toy camera."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from ..geometry import BEVGeometry, VoxelizationConfig
from ..lss import CameraModel, DepthBins

GROUND = -1
MISS = -2

# (length, width, height) ranges per class
CLASS_SIZES = {
    0: ((3.6, 4.8), (1.6, 2.0), (1.4, 1.7)),  # car
    1: ((1.5, 2.0), (0.6, 0.9), (1.6, 1.8)),  # cyclist
}
NUM_CLASSES = len(CLASS_SIZES)
IMAGE_CHANNELS = NUM_CLASSES + 2  # class one-hot, ground, inverse-depth cue


@dataclass
class GenConfig:
    grid_nx: int = 64
    grid_ny: int = 64
    cell_size_m: float = 0.25
    origin_m: tuple[float, float] = (0.0, -8.0)
    z_range_m: tuple[float, float] = (-0.5, 2.5)
    voxel_z_m: float = 1.0
    num_boxes: tuple[int, int] = (1, 4)
    car_fraction: float = 0.7
    lidar_height_m: float = 1.8
    num_beams: int = 16
    beam_elevation_deg: tuple[float, float] = (-24.0, -2.0)
    azimuth_range_deg: tuple[float, float] = (-90.0, 90.0)
    azimuth_step_deg: float = 0.5
    max_range_m: float = 40.0
    dropout_scale_m: float = 10.0  # keep probability exp(-range / scale)
    range_noise_m: float = 0.02
    image_height: int = 12
    image_width: int = 48
    camera_hfov_deg: float = 110.0
    camera_height_m: float = 1.6
    image_noise: float = 0.1
    depth_cue_noise: float = 0.05
    depth_min_m: float = 1.0
    depth_max_m: float = 40.0
    depth_bins: int = 32

    @property
    def geometry(self) -> BEVGeometry:
        return BEVGeometry(self.grid_nx, self.grid_ny, (self.cell_size_m, self.cell_size_m), tuple(self.origin_m))

    @property
    def voxel_config(self) -> VoxelizationConfig:
        x0, y0 = self.origin_m
        return VoxelizationConfig(
            (self.cell_size_m, self.cell_size_m, self.voxel_z_m),
            (
                (x0, x0 + self.grid_nx * self.cell_size_m),
                (y0, y0 + self.grid_ny * self.cell_size_m),
                tuple(self.z_range_m),
            ),
        )

    @property
    def bins(self) -> DepthBins:
        return DepthBins(self.depth_min_m, self.depth_max_m, self.depth_bins)

    def camera(self) -> CameraModel:
        return CameraModel.forward_looking(
            self.image_height, self.image_width, self.camera_hfov_deg, (0.0, 0.0, self.camera_height_m)
        )


@dataclass
class Scene:
    points: np.ndarray  # P×4 (x, y, z, intensity)
    boxes: np.ndarray  # K×8 (cx, cy, cz, w, l, h, yaw, class)
    camera: CameraModel
    image_feat: np.ndarray  # C_i×H×W
    seed: int
    point_source: np.ndarray = field(default=None, repr=False)  # per point: box id or GROUND

    def bev_boxes(self) -> np.ndarray:
        """(cx, cy, w, l, yaw) rows."""
        return self.boxes[:, [0, 1, 3, 4, 6]] if len(self.boxes) else np.zeros((0, 5))

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "boxes": self.boxes.tolist(),
            "camera": self.camera.to_dict(),
            "image_feat": {"shape": list(self.image_feat.shape), "data": self.image_feat.reshape(-1).tolist()},
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        img = d["image_feat"]
        return cls(
            points=np.array(d["points"], dtype=np.float64).reshape(-1, 4),
            boxes=np.array(d["boxes"], dtype=np.float64).reshape(-1, 8),
            camera=CameraModel.from_dict(d["camera"]),
            image_feat=np.array(img["data"], dtype=np.float64).reshape(img["shape"]),
            seed=int(d["seed"]),
        )


def save_scene(path: str | Path, scene: Scene) -> None:
    Path(path).write_text(json.dumps(scene.to_dict()))


def load_scene(path: str | Path) -> Scene:
    return Scene.from_dict(json.loads(Path(path).read_text()))


def cast_rays(origin: np.ndarray, dirs: np.ndarray, boxes: np.ndarray, max_t: float = np.inf):
    """First hit along each ray against oriented boxes and the z = 0 ground plane.

    ``dirs`` need not be unit length; the returned ``t`` is in units of the
    direction vector.  ``hit`` is the box row, ``GROUND`` or ``MISS``.
    """
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    best = np.full(n, np.inf)
    hit = np.full(n, MISS, dtype=np.int64)
    down = dirs[:, 2] < 0
    tg = np.where(down, -origin[2] / np.where(down, dirs[:, 2], -1.0), np.inf)
    take = tg < best
    best[take], hit[take] = tg[take], GROUND
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, (cx, cy, cz, w, l, h, yaw, _) in enumerate(np.asarray(boxes).reshape(-1, 8)):
            c, s = np.cos(yaw), np.sin(yaw)
            rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
            o = rot @ (origin - np.array([cx, cy, cz]))
            d = dirs @ rot.T
            half = np.array([l / 2, w / 2, h / 2])
            t1 = (-half - o) / d
            t2 = (half - o) / d
            # rays parallel to a slab: inside -> unbounded, outside -> miss
            par = d == 0
            inside = np.abs(o) <= half
            lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
            hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
            tmin, tmax = lo.max(axis=1), hi.min(axis=1)
            ok = (tmax >= tmin) & (tmin > 0) & (tmin < best)
            best[ok], hit[ok] = tmin[ok], k
    miss = best > max_t
    best[miss], hit[miss] = np.inf, MISS
    return best, hit


def _sample_boxes(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    lo, hi = cfg.num_boxes
    k = int(rng.integers(lo, hi + 1))
    x0, y0 = cfg.origin_m
    span_x, span_y = cfg.grid_nx * cfg.cell_size_m, cfg.grid_ny * cfg.cell_size_m
    boxes: list[list[float]] = []
    attempts = 0
    while len(boxes) < k and attempts < 100:
        attempts += 1
        cls = 0 if rng.uniform() < cfg.car_fraction else 1
        (l0, l1), (w0, w1), (h0, h1) = CLASS_SIZES[cls]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        margin = 1.5
        cx = rng.uniform(x0 + 2.5, x0 + span_x - margin)
        cy = rng.uniform(y0 + margin, y0 + span_y - margin)
        yaw = rng.uniform(-np.pi, np.pi)
        if any(np.hypot(cx - b[0], cy - b[1]) < (l + b[4]) / 2 + 0.3 for b in boxes):
            continue
        boxes.append([cx, cy, h / 2, w, l, h, yaw, cls])
    return np.array(boxes, dtype=np.float64).reshape(-1, 8)


def lidar_rays(cfg: GenConfig) -> np.ndarray:
    az = np.radians(np.arange(cfg.azimuth_range_deg[0], cfg.azimuth_range_deg[1] + 1e-9, cfg.azimuth_step_deg))
    el = np.radians(np.linspace(cfg.beam_elevation_deg[0], cfg.beam_elevation_deg[1], cfg.num_beams))
    A, E = np.meshgrid(az, el)
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def simulate_lidar(
    rng: np.random.Generator, cfg: GenConfig, boxes: np.ndarray, dropout: bool = True, noise: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast points (x, y, z, intensity) and each point's source (box row or GROUND)."""
    origin = np.array([0.0, 0.0, cfg.lidar_height_m])
    dirs = lidar_rays(cfg)
    t, hit = cast_rays(origin, dirs, boxes, cfg.max_range_m)
    keep = hit != MISS
    u = rng.uniform(size=len(dirs))
    if dropout:
        keep &= u < np.exp(-t / cfg.dropout_scale_m)
    t_noisy = np.where(hit == MISS, 0.0, t) + (rng.standard_normal(len(dirs)) * cfg.range_noise_m if noise else 0.0)
    pts = origin + dirs * t_noisy[:, None]
    intensity = np.where(hit >= 0, 0.6, 0.2) + rng.standard_normal(len(dirs)) * (0.05 if noise else 0.0)
    out = np.concatenate([pts, intensity[:, None]], axis=1)[keep]
    return out, hit[keep]


def render_image(rng: np.random.Generator, cfg: GenConfig, cam: CameraModel, boxes: np.ndarray) -> np.ndarray:
    """Class-coloured box rasterization plus a noisy inverse-depth cue, C_i×H×W.

    The cue is 1 / depth along the optical axis (0 where the ray hits nothing).
    """
    rays = cam.pixel_rays().reshape(-1, 3)  # unit camera-z, so t is depth along the optical axis
    dirs = rays @ cam.extrinsics[:3, :3].T
    depth, hit = cast_rays(cam.extrinsics[:3, 3], dirs, boxes, cfg.max_range_m)
    H, W = cam.height, cam.width
    img = np.zeros((IMAGE_CHANNELS, H * W))
    box_hit = hit >= 0
    cls = boxes[hit[box_hit], 7].astype(int) if box_hit.any() else np.zeros(0, int)
    img[cls, np.flatnonzero(box_hit)] = 1.0
    img[NUM_CLASSES, hit == GROUND] = 1.0
    img[:IMAGE_CHANNELS - 1] += rng.standard_normal((IMAGE_CHANNELS - 1, H * W)) * cfg.image_noise
    cue = np.where(hit == MISS, 0.0, 1.0 / np.where(hit == MISS, 1.0, depth))
    img[-1] = cue * (1.0 + rng.standard_normal(H * W) * cfg.depth_cue_noise)
    return img.reshape(IMAGE_CHANNELS, H, W)


def generate_scene(seed: int, cfg: GenConfig | None = None, boxes: np.ndarray | None = None) -> Scene:
    """Deterministic scene from ``seed``; ``boxes`` (K×8) overrides box sampling."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    if boxes is None:
        boxes = _sample_boxes(rng, cfg)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 8)
    points, source = simulate_lidar(rng, cfg, boxes)
    cam = cfg.camera()
    image = render_image(rng, cfg, cam, boxes)
    return Scene(points, boxes, cam, image, seed, source)


def scene_seeds(seed: int, count: int, split: int = 0) -> list[int]:
    """Per-scene seeds for one split (0 train, 1 held-out) of a run seed."""
    return [int(s) for s in np.random.SeedSequence([seed, split]).generate_state(count, dtype=np.uint32)]


def generate_scenes(seed: int, count: int, cfg: GenConfig | None = None, split: int = 0, workers: int = 1) -> list[Scene]:
    from .parallel import parallel_map

    return parallel_map(partial(generate_scene, cfg=cfg), scene_seeds(seed, count, split), workers)


def gen_config_dict(cfg: GenConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
