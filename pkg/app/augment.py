from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Mapping

import numpy as np

from .common import ArgumentError, ShapeError, derive_seed, make_rng
from .tensor import Tensor

if TYPE_CHECKING:
    from .data import Sample


# 反向映射得到的源坐标离整数足够近时直接取整，保证 π/2 旋转是精确的像素置换。
SNAP_TOLERANCE = 1e-9
MIN_ABS_DET = 1e-12


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """x' = m @ x + t with x = (column, row) in pixel units."""

    m: np.ndarray
    t: np.ndarray

    def det(self) -> float:
        return float(self.m[0, 0] * self.m[1, 1] - self.m[0, 1] * self.m[1, 0])

    def is_invertible(self) -> bool:
        return math.isfinite(self.det()) and abs(self.det()) > MIN_ABS_DET

    def inverse(self) -> "AffineTransform":
        d = self.det()
        if not self.is_invertible():
            raise ArgumentError(f"transform is not invertible (det={d})")
        a, b = self.m[0]
        c, e = self.m[1]
        m_inv = np.array([[e / d, -b / d], [-c / d, a / d]], dtype=np.float64)
        return AffineTransform(m_inv, -(m_inv @ self.t))

    def apply(self, x: float, y: float) -> tuple[float, float]:
        out = self.m @ np.array([x, y], dtype=np.float64) + self.t
        return float(out[0]), float(out[1])

    def allclose(self, other: "AffineTransform", tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(self.m - other.m) <= tol) and np.all(np.abs(self.t - other.t) <= tol))


def _make(m: list[list[float]], t: tuple[float, float] = (0.0, 0.0)) -> AffineTransform:
    return AffineTransform(np.array(m, dtype=np.float64), np.array(t, dtype=np.float64))


def _about(m: list[list[float]], center: tuple[float, float]) -> AffineTransform:
    # 以中心点为不动点：t = c - m·c
    c = np.array(center, dtype=np.float64)
    mm = np.array(m, dtype=np.float64)
    return AffineTransform(mm, c - mm @ c)


def _require_finite(name: str, *values: float) -> None:
    if not all(math.isfinite(float(v)) for v in values):
        raise ArgumentError(f"{name} arguments must be finite: {values}")


def image_center(shape: tuple[int, ...]) -> tuple[float, float]:
    height, width = shape[0], shape[1]
    return (width - 1) / 2.0, (height - 1) / 2.0


def identity_transform() -> AffineTransform:
    return _make([[1.0, 0.0], [0.0, 1.0]])


def affine_rotation(alpha: float, center: tuple[float, float] = (0.0, 0.0)) -> AffineTransform:
    _require_finite("rotation", alpha)
    cos_a, sin_a = math.cos(alpha), math.sin(alpha)
    return _about([[cos_a, -sin_a], [sin_a, cos_a]], center)


def affine_scale(sx: float, sy: float, center: tuple[float, float] = (0.0, 0.0)) -> AffineTransform:
    _require_finite("scale", sx, sy)
    if sx == 0.0 or sy == 0.0:
        raise ArgumentError(f"scale factors must be nonzero: sx={sx} sy={sy}")
    return _about([[sx, 0.0], [0.0, sy]], center)


def affine_shear(hx: float, hy: float, center: tuple[float, float] = (0.0, 0.0)) -> AffineTransform:
    _require_finite("shear", hx, hy)
    if abs(1.0 - hx * hy) <= MIN_ABS_DET:
        raise ArgumentError(f"shear is singular: hx*hy = {hx * hy}")
    return _about([[1.0, hx], [hy, 1.0]], center)


def affine_translate(dx: float, dy: float) -> AffineTransform:
    _require_finite("translate", dx, dy)
    return _make([[1.0, 0.0], [0.0, 1.0]], (dx, dy))


def affine_flip_horizontal(width: int) -> AffineTransform:
    return _make([[-1.0, 0.0], [0.0, 1.0]], (width - 1.0, 0.0))


def compose(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Transform equal to applying `b` first, then `a`."""
    return AffineTransform(a.m @ b.m, a.m @ b.t + a.t)


def _check_image(img: Tensor) -> tuple[int, int, int]:
    if img.rank != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {list(img.shape)}")
    height, width, channels = img.shape
    return height, width, channels


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.rint(coords)
    return np.where(np.abs(coords - nearest) < SNAP_TOLERANCE, nearest, coords)


def warp(img: Tensor, xf: AffineTransform, fill: float = 0.0) -> Tensor:
    """Inverse-mapped bilinear resampling; output has the input's shape.

    Neighbours that fall outside the source contribute `fill`.
    """
    height, width, _ = _check_image(img)
    inv = xf.inverse()
    src = img.array

    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    sx = _snap(inv.m[0, 0] * cols + inv.m[0, 1] * rows + inv.t[0])
    sy = _snap(inv.m[1, 0] * cols + inv.m[1, 1] * rows + inv.t[1])

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def tap(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        inside = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        picked = src[np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1)]
        return np.where(inside[..., None], picked, fill)

    out = (
        (1.0 - fy) * (1.0 - fx) * tap(y0, x0)
        + (1.0 - fy) * fx * tap(y0, x0 + 1)
        + fy * (1.0 - fx) * tap(y0 + 1, x0)
        + fy * fx * tap(y0 + 1, x0 + 1)
    )
    # 权重和的舍入误差不能把结果推出输入的取值范围。
    lo = min(float(src.min()), fill)
    hi = max(float(src.max()), fill)
    return Tensor(np.clip(out, lo, hi))


def flip_horizontal(img: Tensor) -> Tensor:
    _check_image(img)
    return Tensor(img.array[:, ::-1, :].copy())


def adjust_brightness(img: Tensor, factor: float) -> Tensor:
    if not (math.isfinite(factor) and factor > 0.0):
        raise ArgumentError(f"brightness factor must be > 0, got {factor}")
    return Tensor(np.clip(img.array * factor, 0.0, 1.0))


Range = tuple[float, float]


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling ranges of the augmentation recipes.

    width_shift is in pixels, height_shift in fractions of the image height.
    Defaults switch every recipe on.
    """

    width_shift: Range = (-200.0, 200.0)
    height_shift: Range = (-0.5, 0.5)
    allow_hflip: bool = True
    rotation_max_deg: float = 90.0
    brightness: Range = (0.2, 1.0)
    zoom: Range = (0.5, 1.0)
    fill_value: float = 0.0
    seed: int = 0
    shear: Range = field(default=(0.0, 0.0))

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("width_shift", "height_shift", "brightness", "zoom", "shear"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ArgumentError(f"{name} must be finite: {(lo, hi)}")
            if lo > hi:
                raise ArgumentError(f"{name} range not ordered: {(lo, hi)}")
        for name in ("brightness", "zoom"):
            lo, _ = getattr(self, name)
            if lo <= 0.0:
                raise ArgumentError(f"{name} range must be strictly positive: {getattr(self, name)}")
        if not (math.isfinite(self.rotation_max_deg) and self.rotation_max_deg >= 0.0):
            raise ArgumentError(f"rotation_max_deg must be >= 0, got {self.rotation_max_deg}")
        if not math.isfinite(self.fill_value):
            raise ArgumentError(f"fill_value must be finite, got {self.fill_value}")
        if not 0 <= int(self.seed) < (1 << 64):
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(
            width_shift=(0.0, 0.0),
            height_shift=(0.0, 0.0),
            allow_hflip=False,
            rotation_max_deg=0.0,
            brightness=(1.0, 1.0),
            zoom=(1.0, 1.0),
        )

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base: "AugmentConfig | None" = None) -> "AugmentConfig":
        cfg = base or cls()
        updates: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in cls.__dataclass_fields__:
                raise ArgumentError(f"unknown augment key: {key}")
            if key in ("width_shift", "height_shift", "brightness", "zoom", "shear"):
                if not isinstance(value, (list, tuple)) or len(value) != 2:
                    raise ArgumentError(f"augment.{key} must be a [lo, hi] pair")
                updates[key] = (float(value[0]), float(value[1]))
            elif key == "allow_hflip":
                updates[key] = bool(value)
            elif key == "seed":
                updates[key] = int(value)
            else:
                updates[key] = float(value)
        return replace(cfg, **updates)


def single_op_recipes() -> dict[str, AugmentConfig]:
    """One recipe per augmentation, every other operation left at identity."""
    base = AugmentConfig.identity()
    return {
        "horizontal_shift": replace(base, width_shift=(-200.0, 200.0)),
        "vertical_shift": replace(base, height_shift=(-0.5, 0.5)),
        "horizontal_flip": replace(base, allow_hflip=True),
        "rotation": replace(base, rotation_max_deg=90.0),
        "brightness": replace(base, brightness=(0.2, 1.0)),
        "zoom": replace(base, zoom=(0.5, 1.0)),
    }


def random_augment(img: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    height, width, _ = _check_image(img)

    # 采样顺序固定：水平平移、垂直平移、翻转、旋转、缩放、亮度，最后是剪切。
    dx = float(np.clip(rng.uniform(*cfg.width_shift), -width, width))
    dy = float(np.clip(rng.uniform(*cfg.height_shift) * height, -height, height))
    flip = bool(rng.random() < 0.5) and cfg.allow_hflip
    angle = math.radians(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg))
    zoom = float(rng.uniform(*cfg.zoom))
    bright = float(rng.uniform(*cfg.brightness))
    hx = float(rng.uniform(*cfg.shear))
    hy = float(rng.uniform(*cfg.shear))

    center = image_center(img.shape)
    xf = affine_scale(zoom, zoom, center)
    if flip:
        xf = compose(xf, affine_flip_horizontal(width))
    xf = compose(affine_shear(hx, hy, center), xf)
    xf = compose(affine_rotation(angle, center), xf)
    xf = compose(affine_translate(dx, dy), xf)

    return adjust_brightness(warp(img, xf, cfg.fill_value), bright)


def augment_variants(img: Tensor, cfg: AugmentConfig, count: int, seed: int) -> list[Tensor]:
    """`count` variants of one image; variant i draws from seed ⊕ i."""
    return [random_augment(img, cfg, make_rng(derive_seed(seed, i))) for i in range(count)]


def expand_corpus(
    samples: list["Sample"],
    cfg: AugmentConfig,
    copies: int,
    seed: int,
    workers: int = 4,
) -> list["Sample"]:
    from .data import Sample

    if copies < 1:
        raise ArgumentError(f"copies must be >= 1, got {copies}")

    def _expand_one(idx: int, sample: "Sample") -> list["Sample"]:
        out: list[Sample] = []
        for j in range(copies):
            rng = make_rng(derive_seed(seed, idx * copies + j))
            out.append(
                Sample(
                    image=random_augment(sample.image, cfg, rng),
                    label=sample.label,
                    source_id=f"{sample.source_id}#aug{j}",
                )
            )
        return out

    results: list[list[Sample] | None] = [None] * len(samples)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(_expand_one, i, s): i for i, s in enumerate(samples)}
        for future in concurrent.futures.as_completed(futures):
            results[futures[future]] = future.result()

    # 输出顺序与完成顺序无关。
    expanded: list[Sample] = []
    for rows in results:
        expanded.extend(rows or [])
    return expanded
