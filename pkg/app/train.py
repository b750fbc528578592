from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from .augment import AugmentConfig, random_augment
from .common import (
    ArgumentError,
    DivergenceError,
    EvaluationError,
    ModelFormatError,
    ModelVersionError,
    ShapeError,
    SplitError,
    TrainingError,
    derive_seed,
    log,
    make_rng,
    write_bytes,
)
from .data import Dataset, batches, split
from .nn import (
    LayerParams,
    Model,
    bce_loss,
    build_model,
    model_backward,
    model_forward,
    parameters,
    sgd_step,
    with_parameters,
)
from .tensor import Tensor

MODEL_MAGIC = b"FSWC"
MODEL_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")
METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")
DECISION_THRESHOLD = 0.5


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    val_fraction: float = 0.1
    augment: AugmentConfig | None = None
    workers: int = 1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.lr) and self.lr >= 0.0):
            raise ArgumentError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ArgumentError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if not 0 <= int(self.seed) < (1 << 64):
            raise ArgumentError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.workers < 1:
            raise ArgumentError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        """Overlay a `train` config section; `augment` may be a bool or an augment section."""
        cfg = base or cls()
        known = {f.name for f in fields(cls)}
        updates: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in known:
                raise ArgumentError(f"unknown train key: {key}")
            if key == "augment":
                if isinstance(value, Mapping):
                    updates[key] = AugmentConfig.from_mapping(value)
                else:
                    updates[key] = AugmentConfig() if value else None
            elif key in ("lr", "momentum", "val_fraction"):
                updates[key] = float(value)
            else:
                updates[key] = int(value)
        out = replace(cfg, **updates)
        out.validate()
        return out


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float

    def as_dict(self) -> dict[str, float | int]:
        return {name: getattr(self, name) for name in METRICS_HEADER}


@dataclass
class MetricsHistory:
    records: list[EpochMetrics] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[EpochMetrics]:
        return iter(self.records)

    def __getitem__(self, idx: int) -> EpochMetrics:
        return self.records[idx]


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def confusion(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """Rows are the true class (1 first), columns the predicted class."""
        return (self.tp, self.fn), (self.fp, self.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _map_ordered(fn: Callable[[int], Any], n: int, executor: concurrent.futures.Executor | None) -> list[Any]:
    # executor.map 保持提交顺序，归约顺序固定。
    if executor is None:
        return [fn(i) for i in range(n)]
    return list(executor.map(fn, range(n)))


def _mean_grads(per_sample: Sequence[list[LayerParams | None]]) -> list[LayerParams | None]:
    n = float(len(per_sample))
    out: list[LayerParams | None] = []
    for entries in zip(*per_sample):
        if entries[0] is None:
            out.append(None)
            continue
        gw = entries[0].w.numpy()
        gb = entries[0].b.numpy()
        for g in entries[1:]:
            gw += g.w.array
            gb += g.b.array
        out.append(LayerParams(w=Tensor(gw / n), b=Tensor(gb / n)))
    return out


def _params_finite(params: Sequence[LayerParams | None]) -> bool:
    return all(
        p is None or (np.isfinite(p.w.array).all() and np.isfinite(p.b.array).all()) for p in params
    )


def predict(model: Model, img: Tensor) -> tuple[int, float]:
    prob = model_forward(model, img)
    return (1 if prob >= DECISION_THRESHOLD else 0), prob


def evaluate(model: Model, data: Dataset, workers: int = 1) -> EvalResult:
    if len(data) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")

    def _one(i: int) -> float:
        return model_forward(model, data.samples[i].image)

    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            probs = _map_ordered(_one, len(data), executor)
    else:
        probs = _map_ordered(_one, len(data), None)

    loss_sum = 0.0
    tp = fp = fn = tn = 0
    for sample, prob in zip(data.samples, probs):
        loss_sum += bce_loss(prob, sample.label)
        predicted = 1 if prob >= DECISION_THRESHOLD else 0
        if predicted == 1 and sample.label == 1:
            tp += 1
        elif predicted == 1:
            fp += 1
        elif sample.label == 1:
            fn += 1
        else:
            tn += 1
    n = len(data)
    return EvalResult(loss=loss_sum / n, accuracy=(tp + tn) / n, tp=tp, fp=fp, fn=fn, tn=tn)


def train(model: Model, data: Dataset, cfg: TrainConfig) -> tuple[Model, MetricsHistory]:
    """Mini-batch SGD with momentum on the mean batch bce.

    The validation split is carved once from `data` and never augmented.
    Training sample k (position in the epoch's shuffled order) of the
    0-based epoch e is augmented with the seed `seed ^ (e << 32 | k)`.
    """
    cfg.validate()
    n_neg, n_pos = data.class_counts
    if n_neg == 0 or n_pos == 0:
        raise TrainingError(f"training needs both classes, got lt80={n_neg} ge80={n_pos}")
    try:
        train_set, val_set = split(data, 1.0 - cfg.val_fraction, cfg.seed)
    except SplitError as exc:
        raise TrainingError(f"cannot carve a validation split: {exc}") from exc
    log("train", train=len(train_set), val=len(val_set), epochs=cfg.epochs, batch=cfg.batch_size)

    current = with_parameters(model, parameters(model))
    velocity: list[LayerParams | None] | None = None
    history = MetricsHistory()
    executor = concurrent.futures.ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            loss_sum = 0.0
            correct = 0
            position = 0
            for images, labels in batches(train_set, cfg.batch_size, cfg.seed, epoch):
                n = images.shape[0]
                base = position
                frozen = current

                def _one(j: int) -> tuple[float, float, list[LayerParams | None]]:
                    img = Tensor(images.array[j])
                    if cfg.augment is not None:
                        rng = make_rng(derive_seed(cfg.seed, (epoch << 32) + base + j))
                        img = random_augment(img, cfg.augment, rng)
                    return model_backward(frozen, img, labels.array[j])

                results = _map_ordered(_one, n, executor)
                batch_loss = sum(r[0] for r in results) / n
                if not math.isfinite(batch_loss):
                    raise DivergenceError(epoch + 1, batch_loss)
                loss_sum += sum(r[0] for r in results)
                correct += sum(
                    int((1 if prob >= DECISION_THRESHOLD else 0) == int(y))
                    for (_, prob, _), y in zip(results, labels.array)
                )
                new_params, velocity = sgd_step(
                    parameters(current),
                    _mean_grads([r[2] for r in results]),
                    cfg.lr,
                    cfg.momentum,
                    velocity,
                )
                if not _params_finite(new_params):
                    raise DivergenceError(epoch + 1, batch_loss)
                current = with_parameters(current, new_params)
                position += n

            val = evaluate(current, val_set, cfg.workers)
            if not math.isfinite(val.loss):
                raise DivergenceError(epoch + 1, val.loss)
            record = EpochMetrics(
                epoch=epoch + 1,
                train_loss=loss_sum / len(train_set),
                train_acc=correct / len(train_set),
                val_loss=val.loss,
                val_acc=val.accuracy,
            )
            history.records.append(record)
            log("train", **record.as_dict())
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return current, history


def _pack_tensor(t: Tensor) -> bytes:
    dims = t.shape
    return (
        struct.pack("<I", len(dims))
        + struct.pack(f"<{len(dims)}I", *dims)
        + t.array.astype("<f8", copy=False).tobytes()
    )


def encode_model(m: Model) -> bytes:
    header = {
        "input_shape": list(m.input_shape),
        "layers": [layer.descriptor() for layer in m.layers],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREAMBLE.pack(MODEL_MAGIC, MODEL_VERSION, len(header_bytes)), header_bytes]
    for params in parameters(m):
        if params is not None:
            chunks.append(_pack_tensor(params.w))
            chunks.append(_pack_tensor(params.b))
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, offset: int) -> None:
        self.data = data
        self.offset = offset

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise ModelFormatError(f"truncated model file while reading {what}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def tensor(self, expected: tuple[int, ...], what: str) -> Tensor:
        (rank,) = struct.unpack("<I", self.take(4, f"{what} rank"))
        if rank != len(expected):
            raise ModelFormatError(f"{what}: rank {rank} does not match layer descriptor {list(expected)}")
        dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"{what} extents"))
        if tuple(dims) != expected:
            raise ModelFormatError(f"{what}: extents {list(dims)} do not match layer descriptor {list(expected)}")
        count = math.prod(dims)
        values = np.frombuffer(self.take(8 * count, f"{what} payload"), dtype="<f8")
        return Tensor(values.astype(np.float64).reshape(dims))


def decode_model(data: bytes) -> Model:
    if len(data) < _PREAMBLE.size:
        raise ModelFormatError("truncated model file: missing preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise ModelVersionError(f"unsupported model version {version}, expected {MODEL_VERSION}")
    reader = _Reader(data, _PREAMBLE.size)
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
        skeleton = build_model(header["input_shape"], header["layers"], seed=None)
    except (UnicodeDecodeError, json.JSONDecodeError, AttributeError, KeyError, TypeError, ValueError, ShapeError) as exc:
        raise ModelFormatError(f"invalid model header: {exc}") from exc

    params: list[LayerParams | None] = []
    for i, p in enumerate(parameters(skeleton)):
        if p is None:
            params.append(None)
            continue
        w = reader.tensor(p.w.shape, f"layer {i} weights")
        b = reader.tensor(p.b.shape, f"layer {i} bias")
        params.append(LayerParams(w=w, b=b))
    if reader.offset != len(data):
        raise ModelFormatError(f"{len(data) - reader.offset} unexpected trailing bytes in model file")
    return with_parameters(skeleton, params)


def save_model(m: Model, path: Path) -> None:
    write_bytes(Path(path), encode_model(m))


def load_model(path: Path) -> Model:
    return decode_model(Path(path).read_bytes())


def metrics_csv_text(h: MetricsHistory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in h.records:
        writer.writerow(
            [r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_loss:.6f}", f"{r.val_acc:.6f}"]
        )
    return buf.getvalue()


def write_metrics_csv(h: MetricsHistory, path: Path) -> None:
    write_bytes(Path(path), metrics_csv_text(h).encode("utf-8"))
