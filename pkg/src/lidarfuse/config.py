"""Run configuration: TOML file with strict keys, plus resolution of flag and environment overrides.

Precedence, lowest to highest: built-in defaults, the config file, the
``RUN_SEED`` environment variable (seed only), command-line flags.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

from .harness.degrade import DEFAULT_MAGNITUDES, KINDS
from .harness.pipeline import PipelineConfig
from .harness.scene import GenConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_scenes: int = 32
    test_scenes: int = 16
    replicates: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    threads: int = 1
    scene: GenConfig = field(default_factory=GenConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    robustness: dict[str, list] = field(default_factory=lambda: {k: [DEFAULT_MAGNITUDES[k]] for k in KINDS})

    def pipeline_config(self, **overrides) -> PipelineConfig:
        return self.pipeline.replace(scene=self.scene, **overrides)

    def sweep(self) -> list[tuple[str, object]]:
        return [(kind, tuple(m) if isinstance(m, list) else m) for kind in KINDS for m in self.robustness.get(kind, [])]


_PIPELINE_SKIP = {"scene"}


def _coerce(section: str, key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"[{section}] {key} must be a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != len(default):
            raise ConfigError(f"[{section}] {key} must be a list of {len(default)} values")
        return tuple(type(d)(v) for d, v in zip(default, value))
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string")
        return value
    return value  # optional numbers default to None


def _fill(cls, section: str, table: dict, skip=frozenset()):
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(table) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    base = cls()
    kw = {k: _coerce(section, k, v, getattr(base, k)) for k, v in table.items()}
    return cls(**kw)


def run_config_from_dict(d: dict) -> RunConfig:
    top = {"seed", "out_dir", "threads", "scene", "pipeline", "data", "robustness"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    for key in ("seed", "threads"):
        if key in d:
            cfg.__dict__[key] = _coerce("top", key, d[key], 0)
    if "out_dir" in d:
        cfg.out_dir = _coerce("top", "out_dir", d["out_dir"], "")
    if "scene" in d:
        cfg.scene = _fill(GenConfig, "scene", d["scene"])
    if "pipeline" in d:
        cfg.pipeline = _fill(PipelineConfig, "pipeline", d["pipeline"], _PIPELINE_SKIP)
    if "data" in d:
        cfg.data = _fill(DataConfig, "data", d["data"])
    if "robustness" in d:
        bad = sorted(set(d["robustness"]) - set(KINDS))
        if bad:
            raise ConfigError(f"unknown key(s) in [robustness]: {', '.join(bad)}")
        cfg.robustness = {k: list(v) if isinstance(v, list) else [v] for k, v in d["robustness"].items()}
    return cfg


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as f:
            d = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return run_config_from_dict(d)


def apply_overrides(cfg: RunConfig, seed: int | None = None, out_dir: str | None = None,
                    threads: int | None = None, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    if env.get("RUN_SEED"):
        try:
            cfg.seed = int(env["RUN_SEED"])
        except ValueError as e:
            raise ConfigError(f"RUN_SEED must be an integer, got {env['RUN_SEED']!r}") from e
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    if threads is not None:
        cfg.threads = threads
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    try:
        cfg.pipeline_config().validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def _table(obj, skip=frozenset()) -> dict:
    out = {}
    for f in fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if v is None:
            continue
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def run_config_to_dict(cfg: RunConfig) -> dict:
    return {
        "seed": cfg.seed,
        "out_dir": cfg.out_dir,
        "threads": cfg.threads,
        "scene": _table(cfg.scene),
        "pipeline": _table(cfg.pipeline, _PIPELINE_SKIP),
        "data": _table(cfg.data),
        "robustness": {k: list(v) for k, v in cfg.robustness.items()},
    }


def write_resolved_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(tomli_w.dumps(run_config_to_dict(cfg)))
