from __future__ import annotations

import concurrent.futures
import io
import re
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import png

from .common import (
    IMAGE_SHAPE,
    LABEL_DIRS,
    ArgumentError,
    DecodeError,
    EmptyDatasetError,
    ImageFormatError,
    LayoutError,
    ShapeError,
    SplitError,
    derive_seed,
    log,
    make_rng,
    write_bytes,
)
from .tensor import Tensor

FORMATS = ("png8", "ppm-p6", "pgm-p5")
EXTENSION_FORMATS = {".png": "png8", ".ppm": "ppm-p6", ".pgm": "pgm-p5"}
FORMAT_EXTENSIONS = {fmt: ext for ext, fmt in EXTENSION_FORMATS.items()}
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# 合成纹理参数：细晶（强焊缝）与粗晶两类。
FINE_GRAINS = (30, 50)
COARSE_GRAINS = (5, 12)
# 晶粒灰度上限 0.6
GRAIN_LEVELS = (0.0, 0.6)
NOISE_AMPLITUDE = 0.05
EDGE_THRESHOLD = 0.1


@dataclass
class Sample:
    image: Tensor
    label: int
    source_id: str
    grain_count: int | None = None


@dataclass
class Dataset:
    samples: list[Sample]
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_counts(self) -> tuple[int, int]:
        positives = sum(1 for s in self.samples if s.label == 1)
        return len(self.samples) - positives, positives

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]


def _pnm_header(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, raster offset) of a binary PNM file."""
    if not data.startswith(magic):
        raise ImageFormatError(f"expected {magic.decode()} header, got {data[:2]!r}")
    tokens: list[int] = []
    pos = len(magic)
    while len(tokens) < 3:
        if pos >= len(data):
            raise DecodeError("truncated PNM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise DecodeError("truncated PNM header comment")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            m = re.match(rb"\d+", data[pos:])
            if m is None:
                raise DecodeError(f"bad PNM header token at byte {pos}")
            tokens.append(int(m.group(0)))
            pos += len(m.group(0))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DecodeError("PNM header not terminated by whitespace")
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise DecodeError(f"bad PNM dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _decode_pnm(data: bytes, magic: bytes, planes: int) -> np.ndarray:
    width, height, _, offset = _pnm_header(data, magic)
    need = width * height * planes
    raster = data[offset:offset + need]
    if len(raster) < need:
        raise DecodeError(f"truncated raster: need {need} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, planes)


def _decode_png(data: bytes) -> np.ndarray:
    try:
        width, height, rows, info = png.Reader(bytes=data).read()
        if info.get("bitdepth") != 8:
            raise ImageFormatError(f"only 8-bit PNG is supported, got bitdepth={info.get('bitdepth')}")
        if info.get("interlace"):
            raise ImageFormatError("interlaced PNG is not supported")
        if info.get("palette"):
            raise ImageFormatError("palette PNG is not supported")
        planes = int(info.get("planes", 3))
        pixels = np.array([np.asarray(row, dtype=np.uint8) for row in rows], dtype=np.uint8)
    except (png.Error, zlib.error, EOFError, ValueError) as exc:
        raise DecodeError(f"corrupt PNG: {exc}") from exc
    if pixels.shape != (height, width * planes):
        raise DecodeError(f"PNG raster has shape {pixels.shape}, expected {(height, width * planes)}")
    pixels = pixels.reshape(height, width, planes)
    # 丢弃 alpha 通道。
    if planes in (2, 4):
        pixels = pixels[:, :, : planes - 1]
    return pixels


def decode_image(data: bytes, fmt: str) -> Tensor:
    """Decode into an H x W x 3 tensor with values v/255."""
    if fmt == "ppm-p6":
        pixels = _decode_pnm(data, b"P6", 3)
    elif fmt == "pgm-p5":
        pixels = _decode_pnm(data, b"P5", 1)
    elif fmt == "png8":
        pixels = _decode_png(data)
    else:
        raise ImageFormatError(f"unsupported image format: {fmt}")
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return Tensor(pixels.astype(np.float64) / 255.0)


def sniff_format(data: bytes, name: str = "") -> str:
    if data.startswith(PNG_SIGNATURE):
        return "png8"
    if data.startswith(b"P6"):
        return "ppm-p6"
    if data.startswith(b"P5"):
        return "pgm-p5"
    fmt = EXTENSION_FORMATS.get(Path(name).suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"unrecognized image format: {name or data[:8]!r}")
    return fmt


def _quantize(img: Tensor) -> np.ndarray:
    return np.rint(np.clip(img.array, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_image(img: Tensor, fmt: str) -> bytes:
    if img.rank != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"cannot encode image of shape {list(img.shape)}")
    height, width, channels = img.shape
    pixels = _quantize(img)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    if fmt == "ppm-p6":
        return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()
    if fmt == "pgm-p5":
        return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels[:, :, 0].tobytes()
    if fmt == "png8":
        buf = io.BytesIO()
        writer = png.Writer(width, height, greyscale=False, bitdepth=8)
        writer.write(buf, pixels.reshape(height, width * 3).tolist())
        return buf.getvalue()
    raise ImageFormatError(f"unsupported image format: {fmt}")


def read_image(path: Path) -> tuple[Tensor, str]:
    data = Path(path).read_bytes()
    fmt = sniff_format(data, str(path))
    return decode_image(data, fmt), fmt


def write_image(path: Path, img: Tensor) -> None:
    fmt = EXTENSION_FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"cannot infer image format from {path}")
    write_bytes(Path(path), encode_image(img, fmt))


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n_out == 1 or n_in == 1:
        coords = np.zeros(n_out, dtype=np.float64)
    else:
        coords = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(coords).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, coords - i0


def resize_bilinear(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize."""
    if img.rank != 3:
        raise ShapeError(f"expected an H x W x C image, got shape {list(img.shape)}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target extents must be >= 1, got {out_h}x{out_w}")
    src = img.array
    r0, r1, fr = _axis_taps(src.shape[0], out_h)
    top, bottom = src[r0], src[r1]
    rows = top + (bottom - top) * fr[:, None, None]
    c0, c1, fc = _axis_taps(src.shape[1], out_w)
    left, right = rows[:, c0], rows[:, c1]
    return Tensor(left + (right - left) * fc[None, :, None])


def _check_sample(sample: Sample) -> None:
    if sample.image.shape != IMAGE_SHAPE:
        raise ShapeError(f"{sample.source_id}: shape {list(sample.image.shape)} != {list(IMAGE_SHAPE)}")
    arr = sample.image.array
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ShapeError(f"{sample.source_id}: values outside [0, 1]")


def ingest_image(img: Tensor) -> Tensor:
    height, width, _ = IMAGE_SHAPE
    if img.shape[:2] == (height, width):
        return img
    return resize_bilinear(img, height, width)


def load_dataset(root: Path, workers: int = 4) -> Dataset:
    root = Path(root)
    tasks: list[tuple[int, Path]] = []
    for label in (0, 1):
        class_dir = root / LABEL_DIRS[label]
        if not class_dir.is_dir():
            raise LayoutError(f"missing class directory: {class_dir}")
        files = sorted(
            (p for p in class_dir.iterdir() if p.is_file() and p.suffix.lower() in EXTENSION_FORMATS),
            key=lambda p: p.name,
        )
        tasks.extend((label, p) for p in files)

    def _load_one(label: int, path: Path) -> Sample:
        img, _ = read_image(path)
        return Sample(
            image=ingest_image(img),
            label=label,
            source_id=f"{LABEL_DIRS[label]}/{path.name}",
        )

    results: list[Sample | str | None] = [None] * len(tasks)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(_load_one, label, path): i for i, (label, path) in enumerate(tasks)}
        for future in concurrent.futures.as_completed(futures):
            idx = futures[future]
            try:
                results[idx] = future.result()
            except (DecodeError, ImageFormatError, OSError) as exc:
                results[idx] = f"{tasks[idx][1].name}: {exc}"

    samples: list[Sample] = []
    warnings: list[str] = []
    for row in results:
        if isinstance(row, Sample):
            _check_sample(row)
            samples.append(row)
        elif row is not None:
            warnings.append(row)
            log("data", skip=row.split(":", 1)[0], error=row.split(":", 1)[-1].strip())

    if not samples:
        raise EmptyDatasetError(f"no decodable images under {root}")
    return Dataset(samples=samples, warnings=warnings)


def synth_generate(label: int, seed: int) -> Sample:
    """Voronoi grain texture; class 1 fine grains, class 0 coarse grains."""
    if label not in (0, 1):
        raise ArgumentError(f"label must be 0 or 1, got {label}")
    height, width, channels = IMAGE_SHAPE
    rng = make_rng([seed, label])
    lo, hi = FINE_GRAINS if label == 1 else COARSE_GRAINS
    k = int(rng.integers(lo, hi + 1))
    points = rng.uniform(0.0, [width, height], size=(k, 2))
    levels = rng.uniform(*GRAIN_LEVELS, size=k)
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=(height, width))

    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    d2 = (cols[..., None] - points[:, 0]) ** 2 + (rows[..., None] - points[:, 1]) ** 2
    owner = np.argmin(d2, axis=-1)
    gray = np.clip(levels[owner] + noise, 0.0, 1.0)
    image = np.repeat(gray[..., None], channels, axis=2)
    return Sample(image=Tensor(image), label=label, source_id=f"synth_{label}_{seed}", grain_count=k)


def synth_dataset(per_class: int, seed: int) -> Dataset:
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")
    samples = [
        replace(synth_generate(label, derive_seed(seed, i)), source_id=f"synth_{label}_{i:05d}")
        for label in (0, 1)
        for i in range(per_class)
    ]
    return Dataset(samples=samples)


def high_pass_energy(img: Tensor) -> float:
    """Fraction of adjacent pixel pairs whose channel-0 step exceeds the edge threshold."""
    gray = img.array[:, :, 0]
    horizontal = np.abs(np.diff(gray, axis=1)) > EDGE_THRESHOLD
    vertical = np.abs(np.diff(gray, axis=0)) > EDGE_THRESHOLD
    return float(horizontal.sum() + vertical.sum()) / float(horizontal.size + vertical.size)


def split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified shuffle split; both halves keep the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = make_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in (0, 1):
        members = [i for i, s in enumerate(d.samples) if s.label == label]
        if len(members) < 2:
            raise SplitError(f"class {label} has {len(members)} samples; at least 2 are needed")
        order = rng.permutation(len(members))
        n_train = min(max(int(round(len(members) * train_fraction)), 1), len(members) - 1)
        train_idx.extend(members[j] for j in order[:n_train])
        test_idx.extend(members[j] for j in order[n_train:])
    return (
        Dataset(samples=[d.samples[i] for i in sorted(train_idx)]),
        Dataset(samples=[d.samples[i] for i in sorted(test_idx)]),
    )


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return make_rng([seed, epoch]).permutation(n)


def batches(d: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[Tensor, Tensor]]:
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = epoch_order(len(d), seed, epoch)
    for start in range(0, len(order), batch_size):
        chunk = [d.samples[i] for i in order[start:start + batch_size]]
        images = np.stack([s.image.array for s in chunk])
        labels = np.array([s.label for s in chunk], dtype=np.float64)
        yield Tensor(images), Tensor(labels)


def _file_stem(source_id: str) -> str:
    name, sep, tag = source_id.rsplit("/", 1)[-1].partition("#")
    base, dot, ext = name.rpartition(".")
    if dot and f".{ext.lower()}" in EXTENSION_FORMATS:
        name = base
    return re.sub(r"[^A-Za-z0-9_-]+", "_", f"{name}{sep}{tag}").strip("_") or "sample"


def write_dataset(d: Dataset, root: Path, fmt: str = "ppm-p6") -> list[Path]:
    """Write samples in the two-class directory layout.

    Source ids that sanitise to the same file name get `_2`, `_3`, ...
    suffixes in sample order instead of overwriting each other.
    """
    ext = FORMAT_EXTENSIONS[fmt]
    written: list[Path] = []
    taken: set[Path] = set()
    for sample in d.samples:
        class_dir = Path(root) / LABEL_DIRS[sample.label]
        stem = _file_stem(sample.source_id)
        path = class_dir / f"{stem}{ext}"
        n = 1
        while path in taken:
            n += 1
            path = class_dir / f"{stem}_{n}{ext}"
        taken.add(path)
        write_bytes(path, encode_image(sample.image, fmt))
        written.append(path)
    return written
