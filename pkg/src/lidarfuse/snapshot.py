"""Tensor snapshot files and checkpoints built from them.

A snapshot is little-endian: ``u32`` rank, ``rank`` × ``u64`` extents, then the
``f64`` payload in row-major order.  A checkpoint is ``u32`` entry count
followed by, per entry, ``u32`` name length, the UTF-8 name and a snapshot.
Both have a JSON mirror for inspection.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np



def write_snapshot(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_snapshot(f: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(f, 8 * count)
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated snapshot: wanted {n} bytes, got {len(buf)}")
    return buf


def save_tensor(path: str | Path, arr: np.ndarray, json_mirror: bool = True) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        write_snapshot(f, arr)
    if json_mirror:
        mirror = {"shape": list(np.shape(arr)), "data": np.asarray(arr, dtype=float).reshape(-1).tolist()}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(mirror))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_snapshot(f)


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], json_mirror: bool = True) -> None:
    path = Path(path)
    names = sorted(params)
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_snapshot(f, params[name])
    if json_mirror:
        mirror = {
            name: {"shape": list(np.shape(params[name])), "data": np.asarray(params[name]).reshape(-1).tolist()}
            for name in names
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(mirror, indent=1))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, n).decode("utf-8")
            out[name] = read_snapshot(f)
    return out
