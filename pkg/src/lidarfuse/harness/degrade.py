"""Inference-time corruptions of the camera branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("one_hot_noise", "random_noise", "spatial_misalignment")
DEFAULT_MAGNITUDES = {"one_hot_noise": 0.5, "random_noise": 1.0, "spatial_misalignment": 2}


@dataclass(frozen=True)
class Degradation:
    kind: str
    magnitude: float | tuple[int, int]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")

    @property
    def is_null(self) -> bool:
        return not np.any(np.asarray(self.magnitude))


def one_hot_noise(depth: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Replace the D-bin distribution of a ``fraction`` of pixels with a random one-hot bin."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"one-hot fraction must lie in [0, 1], got {fraction}")
    if fraction == 0:
        return depth
    D, H, W = depth.shape
    n = H * W
    picked = rng.permutation(n)[: int(round(fraction * n))]
    bins = rng.integers(0, D, size=len(picked))
    out = depth.reshape(D, n).copy()
    out[:, picked] = 0.0
    out[bins, picked] = 1.0
    return out.reshape(D, H, W)


def random_noise(logits: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return logits
    return logits + rng.standard_normal(logits.shape) * sigma


def _shift(magnitude) -> tuple[int, int]:
    m = np.atleast_1d(np.asarray(magnitude))
    if m.size == 1:
        return int(m[0]), 0
    return int(m[0]), int(m[1])


def spatial_misalignment(grid: np.ndarray, shift) -> np.ndarray:
    """Translate a C×Y×X grid by (dx, dy) cells with zero fill; a scalar shifts along x."""
    dx, dy = _shift(shift)
    if dx == 0 and dy == 0:
        return grid
    _, ny, nx = grid.shape
    out = np.zeros_like(grid)
    if abs(dx) >= nx or abs(dy) >= ny:
        return out
    sy_src = slice(max(0, -dy), ny - max(0, dy))
    sx_src = slice(max(0, -dx), nx - max(0, dx))
    sy_dst = slice(max(0, dy), ny - max(0, -dy))
    sx_dst = slice(max(0, dx), nx - max(0, -dx))
    out[:, sy_dst, sx_dst] = grid[:, sy_src, sx_src]
    return out


def inject_degradation(features: np.ndarray, kind: str, magnitude, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply one corruption to the array it targets.

    one_hot_noise expects a D×H×W depth distribution, random_noise D×H×W depth
    logits, spatial_misalignment a C×Y×X image BEV grid.  Magnitude 0 returns
    the input unchanged.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown degradation kind {kind!r}; expected one of {KINDS}")
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == "one_hot_noise":
        return one_hot_noise(features, float(magnitude), rng)
    if kind == "random_noise":
        return random_noise(features, float(magnitude), rng)
    return spatial_misalignment(features, magnitude)
