from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .common import ArgumentError, ShapeError, make_rng
from .tensor import Tensor

LAYER_KINDS = ("conv", "relu", "maxpool", "flatten", "dense", "sigmoid")
PROB_EPS = 1e-12
# float64 中 (0,1) 内最靠近两端的值
PROB_MIN = math.nextafter(0.0, 1.0)
PROB_MAX = math.nextafter(1.0, 0.0)

DEFAULT_INPUT_SHAPE = (40, 40, 3)
DEFAULT_LAYERS: list[dict[str, Any]] = [
    {"kind": "conv", "n_filters": 10, "f": 3, "s": 1, "p": 0},
    {"kind": "relu"},
    {"kind": "conv", "n_filters": 20, "f": 6, "s": 2, "p": 0},
    {"kind": "relu"},
    {"kind": "flatten"},
    {"kind": "dense", "units": 1},
    {"kind": "sigmoid"},
]

# 缩小版：同样的层类型，12x12x3 输入，用于全模型梯度检查。
SMALL_INPUT_SHAPE = (12, 12, 3)
SMALL_LAYERS: list[dict[str, Any]] = [
    {"kind": "conv", "n_filters": 4, "f": 3, "s": 1, "p": 0},
    {"kind": "relu"},
    {"kind": "conv", "n_filters": 6, "f": 4, "s": 2, "p": 0},
    {"kind": "relu"},
    {"kind": "flatten"},
    {"kind": "dense", "units": 1},
    {"kind": "sigmoid"},
]


@dataclass(frozen=True)
class ConvSpec:
    f: int
    s: int
    p: int
    c_in: int
    n_filters: int

    def __post_init__(self) -> None:
        if self.f < 1 or self.s < 1 or self.p < 0:
            raise ArgumentError(f"invalid conv hyperparameters f={self.f} s={self.s} p={self.p}")
        if self.c_in < 1 or self.n_filters < 1:
            raise ArgumentError(f"invalid conv channels c_in={self.c_in} n_filters={self.n_filters}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return self.n_filters, self.f, self.f, self.c_in


@dataclass
class LayerParams:
    w: Tensor
    b: Tensor


@dataclass
class Layer:
    kind: str
    conv: ConvSpec | None = None
    window: int | None = None
    units: int | None = None
    params: LayerParams | None = None

    def descriptor(self) -> dict[str, Any]:
        desc: dict[str, Any] = {"kind": self.kind}
        if self.conv is not None:
            desc.update(n_filters=self.conv.n_filters, f=self.conv.f, s=self.conv.s, p=self.conv.p)
        if self.window is not None:
            desc["window"] = self.window
        if self.units is not None:
            desc["units"] = self.units
        return desc


@dataclass
class Model:
    input_shape: tuple[int, ...]
    layers: list[Layer] = field(default_factory=list)


@dataclass
class PoolRecord:
    input_shape: tuple[int, int, int]
    window: int
    argmax: np.ndarray


def conv_out_size(n: int, p: int, f: int, s: int) -> int:
    """Output extent floor((n + 2p - f) / s) + 1."""
    if f < 1 or s < 1 or p < 0:
        raise ArgumentError(f"invalid conv hyperparameters f={f} s={s} p={p}")
    if n < 1:
        raise ShapeError(f"input extent must be >= 1, got {n}")
    if n + 2 * p < f:
        raise ShapeError(f"filter {f} larger than padded input {n + 2 * p}")
    return (n + 2 * p - f) // s + 1


def _conv_geometry(x: Tensor, spec: ConvSpec, params: LayerParams) -> tuple[int, int]:
    if x.rank != 3:
        raise ShapeError(f"conv input must be H x W x C, got {list(x.shape)}")
    if x.shape[2] != spec.c_in:
        raise ShapeError(f"conv expects {spec.c_in} channels, got {x.shape[2]}")
    if params.w.shape != spec.weight_shape:
        raise ShapeError(f"conv weights {list(params.w.shape)} != {list(spec.weight_shape)}")
    if params.b.shape != (spec.n_filters,):
        raise ShapeError(f"conv bias {list(params.b.shape)} != [{spec.n_filters}]")
    return (
        conv_out_size(x.shape[0], spec.p, spec.f, spec.s),
        conv_out_size(x.shape[1], spec.p, spec.f, spec.s),
    )


def _pad(arr: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return arr
    return np.pad(arr, ((p, p), (p, p), (0, 0)), mode="constant", constant_values=0.0)


def conv2d_forward(x: Tensor, spec: ConvSpec, params: LayerParams) -> Tensor:
    """Direct weighted patch sums, one output position at a time."""
    out_h, out_w = _conv_geometry(x, spec, params)
    f, s = spec.f, spec.s
    xp = _pad(x.array, spec.p)
    w, b = params.w.array, params.b.array
    out = np.empty((out_h, out_w, spec.n_filters), dtype=np.float64)
    for qr in range(out_h):
        for qc in range(out_w):
            patch = xp[qr * s:qr * s + f, qc * s:qc * s + f, :]
            for k in range(spec.n_filters):
                out[qr, qc, k] = np.sum(w[k] * patch) + b[k]
    return Tensor(out)


def _im2col(xp: np.ndarray, f: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix of shape (out_h * out_w, f * f * C), rows in row-major output order."""
    channels = xp.shape[2]
    cols = np.empty((out_h, out_w, f, f, channels), dtype=np.float64)
    for i in range(f):
        for j in range(f):
            cols[:, :, i, j, :] = xp[i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s, :]
    return cols.reshape(out_h * out_w, f * f * channels)


def _col2im(dcols: np.ndarray, padded_shape: tuple[int, ...], f: int, s: int, out_h: int, out_w: int) -> np.ndarray:
    channels = padded_shape[2]
    patches = dcols.reshape(out_h, out_w, f, f, channels)
    dxp = np.zeros(padded_shape, dtype=np.float64)
    for i in range(f):
        for j in range(f):
            dxp[i:i + s * (out_h - 1) + 1:s, j:j + s * (out_w - 1) + 1:s, :] += patches[:, :, i, j, :]
    return dxp


def conv2d_forward_fast(x: Tensor, spec: ConvSpec, params: LayerParams) -> Tensor:
    out_h, out_w = _conv_geometry(x, spec, params)
    cols = _im2col(_pad(x.array, spec.p), spec.f, spec.s, out_h, out_w)
    w_mat = params.w.array.reshape(spec.n_filters, -1)
    out = cols @ w_mat.T + params.b.array
    return Tensor(out.reshape(out_h, out_w, spec.n_filters))


def conv2d_backward(
    x: Tensor, spec: ConvSpec, params: LayerParams, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    out_h, out_w = _conv_geometry(x, spec, params)
    if grad_out.shape != (out_h, out_w, spec.n_filters):
        raise ShapeError(f"conv grad_out {list(grad_out.shape)} != {[out_h, out_w, spec.n_filters]}")
    xp = _pad(x.array, spec.p)
    cols = _im2col(xp, spec.f, spec.s, out_h, out_w)
    g = grad_out.array.reshape(out_h * out_w, spec.n_filters)
    w_mat = params.w.array.reshape(spec.n_filters, -1)

    grad_w = (g.T @ cols).reshape(spec.weight_shape)
    grad_b = g.sum(axis=0)
    dxp = _col2im(g @ w_mat, xp.shape, spec.f, spec.s, out_h, out_w)
    p = spec.p
    grad_x = dxp[p:p + x.shape[0], p:p + x.shape[1], :]
    return Tensor(grad_x.copy()), Tensor(grad_w), Tensor(grad_b)


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.array, 0.0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu grad_out {list(grad_out.shape)} != {list(x.shape)}")
    return Tensor(np.where(x.array > 0.0, grad_out.array, 0.0))


def maxpool_forward(x: Tensor, window: int) -> tuple[Tensor, PoolRecord]:
    """Non-overlapping max pooling (stride = window); ties go to the first element in row-major scan."""
    if x.rank != 3:
        raise ShapeError(f"maxpool input must be H x W x C, got {list(x.shape)}")
    if window < 1:
        raise ArgumentError(f"pool window must be >= 1, got {window}")
    height, width, channels = x.shape
    if height < window or width < window:
        raise ShapeError(f"pool window {window} larger than input {height}x{width}")
    out_h, out_w = height // window, width // window
    cropped = x.array[: out_h * window, : out_w * window, :]
    windows = (
        cropped.reshape(out_h, window, out_w, window, channels)
        .transpose(0, 2, 4, 1, 3)
        .reshape(out_h, out_w, channels, window * window)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return Tensor(out), PoolRecord(input_shape=(height, width, channels), window=window, argmax=argmax)


def maxpool_backward(record: PoolRecord, grad_out: Tensor) -> Tensor:
    out_h, out_w, channels = record.argmax.shape
    if grad_out.shape != (out_h, out_w, channels):
        raise ShapeError(f"maxpool grad_out {list(grad_out.shape)} != {[out_h, out_w, channels]}")
    k = record.window
    rows = np.arange(out_h)[:, None, None] * k + record.argmax // k
    cols = np.arange(out_w)[None, :, None] * k + record.argmax % k
    chans = np.arange(channels)[None, None, :]
    grad_x = np.zeros(record.input_shape, dtype=np.float64)
    grad_x[rows, cols, chans] = grad_out.array
    return Tensor(grad_x)


def _dense_check(x: Tensor, params: LayerParams) -> None:
    if x.rank != 1:
        raise ShapeError(f"dense input must be a vector, got {list(x.shape)}")
    if params.w.rank != 2 or params.w.shape[1] != x.shape[0]:
        raise ShapeError(f"dense weights {list(params.w.shape)} do not accept width {x.shape[0]}")
    if params.b.shape != (params.w.shape[0],):
        raise ShapeError(f"dense bias {list(params.b.shape)} != [{params.w.shape[0]}]")


def dense_forward(x: Tensor, params: LayerParams) -> Tensor:
    _dense_check(x, params)
    return Tensor(params.w.array @ x.array + params.b.array)


def dense_backward(x: Tensor, params: LayerParams, grad_out: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    _dense_check(x, params)
    if grad_out.shape != (params.w.shape[0],):
        raise ShapeError(f"dense grad_out {list(grad_out.shape)} != [{params.w.shape[0]}]")
    g = grad_out.array
    return Tensor(params.w.array.T @ g), Tensor(np.outer(g, x.array)), Tensor(g.copy())


def sigmoid(z: float) -> float:
    if z >= 0.0:
        p = 1.0 / (1.0 + math.exp(-z))
    else:
        ez = math.exp(z)
        p = ez / (1.0 + ez)
    return min(max(p, PROB_MIN), PROB_MAX)


def bce_loss(p: float, y: int | float) -> float:
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def _layer_out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "conv":
        spec = layer.conv
        if len(shape) != 3 or shape[2] != spec.c_in:
            raise ShapeError(f"conv expects H x W x {spec.c_in}, got {list(shape)}")
        return (
            conv_out_size(shape[0], spec.p, spec.f, spec.s),
            conv_out_size(shape[1], spec.p, spec.f, spec.s),
            spec.n_filters,
        )
    if layer.kind == "maxpool":
        if len(shape) != 3 or shape[0] < layer.window or shape[1] < layer.window:
            raise ShapeError(f"maxpool window {layer.window} does not fit {list(shape)}")
        return shape[0] // layer.window, shape[1] // layer.window, shape[2]
    if layer.kind == "flatten":
        return (math.prod(shape),)
    if layer.kind == "dense":
        if len(shape) != 1 or layer.params.w.shape[1] != shape[0]:
            raise ShapeError(f"dense expects a vector of {layer.params.w.shape[1]}, got {list(shape)}")
        return (layer.units,)
    return shape


def infer_shapes(model: Model) -> list[tuple[int, ...]]:
    """Input shape followed by the output shape of every layer."""
    shapes = [tuple(model.input_shape)]
    for i, layer in enumerate(model.layers):
        try:
            shapes.append(_layer_out_shape(layer, shapes[-1]))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
    return shapes


def build_model(
    input_shape: Sequence[int],
    layer_specs: Sequence[Mapping[str, Any]],
    seed: int | None = 0,
) -> Model:
    """He-normal weights and zero biases drawn in layer order; seed=None leaves weights zero."""
    rng = make_rng(seed) if seed is not None else None
    shape = tuple(int(d) for d in input_shape)
    if len(shape) != 3:
        raise ShapeError(f"model input must be H x W x C, got {list(shape)}")
    model = Model(input_shape=shape)

    def _init(size: tuple[int, ...], fan_in: int) -> Tensor:
        if rng is None:
            return Tensor(np.zeros(size, dtype=np.float64))
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=size))

    for i, spec in enumerate(layer_specs):
        kind = str(spec.get("kind", ""))
        if kind not in LAYER_KINDS:
            raise ArgumentError(f"layer {i}: unknown kind {kind!r}")
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"layer {i} (conv): expects H x W x C, got {list(shape)}")
            conv = ConvSpec(
                f=int(spec["f"]), s=int(spec.get("s", 1)), p=int(spec.get("p", 0)),
                c_in=shape[2], n_filters=int(spec["n_filters"]),
            )
            params = LayerParams(
                w=_init(conv.weight_shape, conv.f * conv.f * conv.c_in),
                b=Tensor(np.zeros(conv.n_filters, dtype=np.float64)),
            )
            layer = Layer(kind=kind, conv=conv, params=params)
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"layer {i} (dense): expects a vector, got {list(shape)}")
            units = int(spec["units"])
            params = LayerParams(
                w=_init((units, shape[0]), shape[0]),
                b=Tensor(np.zeros(units, dtype=np.float64)),
            )
            layer = Layer(kind=kind, units=units, params=params)
        elif kind == "maxpool":
            layer = Layer(kind=kind, window=int(spec.get("window", 2)))
        else:
            layer = Layer(kind=kind)
        try:
            shape = _layer_out_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({kind}): {exc}") from exc
        model.layers.append(layer)

    if not model.layers or model.layers[-1].kind != "sigmoid" or shape != (1,):
        raise ShapeError(f"model must end in a single sigmoid unit, final shape {list(shape)}")
    return model


def build_paper_model(seed: int = 0) -> Model:
    return build_model(DEFAULT_INPUT_SHAPE, DEFAULT_LAYERS, seed)


def build_small_model(seed: int = 0) -> Model:
    return build_model(SMALL_INPUT_SHAPE, SMALL_LAYERS, seed)


def parameters(model: Model) -> list[LayerParams | None]:
    return [layer.params for layer in model.layers]


def with_parameters(model: Model, params: Sequence[LayerParams | None]) -> Model:
    if len(params) != len(model.layers):
        raise ShapeError(f"{len(params)} parameter entries for {len(model.layers)} layers")
    layers = [replace(layer, params=p) for layer, p in zip(model.layers, params)]
    return Model(input_shape=model.input_shape, layers=layers)


def copy_model(model: Model) -> Model:
    params = [
        None if p is None else LayerParams(w=Tensor(p.w.numpy()), b=Tensor(p.b.numpy()))
        for p in parameters(model)
    ]
    return with_parameters(model, params)


def forward_trace(model: Model, x: Tensor) -> tuple[list[Tensor], list[PoolRecord | None]]:
    """Activations [x, a_1, ..., a_L] of one forward pass plus maxpool records."""
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input shape {list(x.shape)} != model input {list(model.input_shape)}")
    acts = [x]
    records: list[PoolRecord | None] = []
    for i, layer in enumerate(model.layers):
        cur = acts[-1]
        record = None
        try:
            if layer.kind == "conv":
                out = conv2d_forward_fast(cur, layer.conv, layer.params)
            elif layer.kind == "relu":
                out = relu_forward(cur)
            elif layer.kind == "maxpool":
                out, record = maxpool_forward(cur, layer.window)
            elif layer.kind == "flatten":
                out = cur.reshape([cur.size])
            elif layer.kind == "dense":
                out = dense_forward(cur, layer.params)
            else:
                if cur.shape != (1,):
                    raise ShapeError(f"sigmoid expects one logit, got {list(cur.shape)}")
                out = Tensor(np.array([sigmoid(float(cur.array[0]))]))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from exc
        acts.append(out)
        records.append(record)
    return acts, records


def model_forward(model: Model, x: Tensor) -> float:
    acts, _ = forward_trace(model, x)
    return float(acts[-1].array[0])


def model_loss(model: Model, x: Tensor, y: int | float) -> float:
    return bce_loss(model_forward(model, x), y)


def model_backward(model: Model, x: Tensor, y: int | float) -> tuple[float, float, list[LayerParams | None]]:
    """Loss, probability and per-layer parameter gradients of bce(forward(x), y)."""
    acts, records = forward_trace(model, x)
    prob = float(acts[-1].array[0])
    grads: list[LayerParams | None] = [None] * len(model.layers)
    # sigmoid 与 bce 合并求导：dL/dz = p - y
    g = Tensor(np.array([prob - float(y)]))
    for i in range(len(model.layers) - 2, -1, -1):
        layer = model.layers[i]
        inp = acts[i]
        if layer.kind == "conv":
            g, gw, gb = conv2d_backward(inp, layer.conv, layer.params, g)
            grads[i] = LayerParams(w=gw, b=gb)
        elif layer.kind == "relu":
            g = relu_backward(inp, g)
        elif layer.kind == "maxpool":
            g = maxpool_backward(records[i], g)
        elif layer.kind == "flatten":
            g = g.reshape(inp.shape)
        elif layer.kind == "dense":
            g, gw, gb = dense_backward(inp, layer.params, g)
            grads[i] = LayerParams(w=gw, b=gb)
        else:
            raise ShapeError(f"layer {i}: sigmoid is only supported as the final layer")
    return bce_loss(prob, y), prob, grads


def sgd_step(
    params: Sequence[LayerParams | None],
    grads: Sequence[LayerParams | None],
    lr: float,
    momentum: float,
    velocity: Sequence[LayerParams | None] | None = None,
) -> tuple[list[LayerParams | None], list[LayerParams | None]]:
    """v <- momentum * v + g; w <- w - lr * v."""
    if not (math.isfinite(lr) and lr >= 0.0):
        raise ArgumentError(f"lr must be >= 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ArgumentError(f"momentum must be in [0, 1), got {momentum}")
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradient entries for {len(params)} parameter entries")
    if velocity is None:
        velocity = [None] * len(params)
    new_params: list[LayerParams | None] = []
    new_velocity: list[LayerParams | None] = []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if p is None:
            new_params.append(None)
            new_velocity.append(None)
            continue
        if g is None or g.w.shape != p.w.shape or g.b.shape != p.b.shape:
            raise ShapeError(f"gradient for entry {i} does not match its parameters")
        vw = g.w.array if v is None else momentum * v.w.array + g.w.array
        vb = g.b.array if v is None else momentum * v.b.array + g.b.array
        new_velocity.append(LayerParams(w=Tensor(vw.copy()), b=Tensor(vb.copy())))
        new_params.append(LayerParams(w=Tensor(p.w.array - lr * vw), b=Tensor(p.b.array - lr * vb)))
    return new_params, new_velocity
