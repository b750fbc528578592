from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any

import numpy as np


# 所有输入图像在入库时统一缩放到论文走查使用的尺寸。
IMAGE_SHAPE = (40, 40, 3)
LABEL_DIRS = {1: "ge80", 0: "lt80"}
SEED_MASK = (1 << 64) - 1


class WeldNetError(RuntimeError):
    """Base class for every error raised by the toolkit."""


class ShapeError(WeldNetError):
    pass


class TensorIndexError(WeldNetError, IndexError):
    pass


class ArgumentError(WeldNetError, ValueError):
    pass


class DecodeError(WeldNetError):
    pass


class ImageFormatError(WeldNetError):
    pass


class LayoutError(WeldNetError):
    pass


class EmptyDatasetError(WeldNetError):
    pass


class SplitError(WeldNetError):
    pass


class TrainingError(WeldNetError):
    pass


class DivergenceError(TrainingError):
    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"non-finite loss at epoch {epoch}: {loss}")
        self.epoch = epoch
        self.loss = loss


class EvaluationError(WeldNetError):
    pass


class ModelFormatError(WeldNetError):
    pass


class ModelVersionError(WeldNetError):
    pass


class WriteError(WeldNetError):
    pass


def log(stage: str, **fields: Any) -> None:
    """Print one `[stage] key=value ...` diagnostics line to stderr."""
    parts = [f"[{stage}]"]
    for key, value in fields.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        parts.append(f"{key}={value}")
    print(" ".join(parts), file=sys.stderr, flush=True)


def make_rng(seed: int | list[int]) -> np.random.Generator:
    """Pinned generator: PCG64 fed through SeedSequence, stable across platforms."""
    if isinstance(seed, list):
        entropy = [int(s) & SEED_MASK for s in seed]
    else:
        entropy = int(seed) & SEED_MASK
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) ^ int(index)) & SEED_MASK


def parse_range(text: str) -> tuple[float, float]:
    """Parse `LO,HI` into an ordered float pair."""
    pieces = [p.strip() for p in str(text).split(",")]
    if len(pieces) != 2 or not all(pieces):
        raise ArgumentError(f"range must look like LO,HI: {text!r}")
    try:
        lo, hi = float(pieces[0]), float(pieces[1])
    except ValueError as exc:
        raise ArgumentError(f"range must be numeric: {text!r}") from exc
    if lo > hi:
        raise ArgumentError(f"range not ordered: {text!r}")
    return lo, hi


def ensure_dir(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)


def read_json(path: Path) -> dict[str, Any]:
    return json.loads(path.read_text(encoding="utf-8"))


def write_json(path: Path, payload: dict[str, Any]) -> None:
    ensure_dir(path.parent)
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")


def write_bytes(path: Path, payload: bytes) -> None:
    try:
        ensure_dir(path.parent)
        path.write_bytes(payload)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
