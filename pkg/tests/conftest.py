from __future__ import annotations

import sys
from pathlib import Path
from typing import Callable

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app.common import LABEL_DIRS  # noqa: E402
from app.data import Dataset, Sample, encode_image  # noqa: E402
from app.tensor import Tensor  # noqa: E402

FD_STEP = 1e-5
GRAD_TOL = 1e-4


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)


def central_difference(fn: Callable[[], float], arr: np.ndarray, idx: tuple[int, ...], h: float = FD_STEP) -> float:
    """(f(x+h) - f(x-h)) / 2h, perturbing `arr[idx]` in place and restoring it."""
    orig = arr[idx]
    arr[idx] = orig + h
    plus = fn()
    arr[idx] = orig - h
    minus = fn()
    arr[idx] = orig
    return (plus - minus) / (2.0 * h)


def sample_indices(rng: np.random.Generator, shape: tuple[int, ...], count: int) -> list[tuple[int, ...]]:
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]


def constant_image(value: float, shape: tuple[int, int, int] = (40, 40, 3)) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64))


def brightness_dataset(per_class: int, rng: np.random.Generator) -> Dataset:
    """Two constant-brightness classes (0.2 vs 0.8) with a little jitter."""
    samples = []
    for label, level in ((0, 0.2), (1, 0.8)):
        for i in range(per_class):
            jitter = rng.uniform(-0.02, 0.02, size=(40, 40, 3))
            samples.append(Sample(image=Tensor(level + jitter), label=label, source_id=f"const_{label}_{i}"))
    return Dataset(samples=samples)


def write_layout(root: Path, images: dict[int, list[np.ndarray]], fmt: str = "ppm-p6") -> None:
    ext = {"ppm-p6": ".ppm", "pgm-p5": ".pgm", "png8": ".png"}[fmt]
    for label in (0, 1):
        class_dir = root / LABEL_DIRS[label]
        class_dir.mkdir(parents=True, exist_ok=True)
        for i, arr in enumerate(images.get(label, [])):
            (class_dir / f"img_{i:03d}{ext}").write_bytes(encode_image(Tensor(arr), fmt))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def rgb_image(rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(0.0, 1.0, size=(40, 40, 3)))
