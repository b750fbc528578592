from __future__ import annotations

import numpy as np
import pytest

from app.nn import (
    ConvSpec,
    LayerParams,
    bce_loss,
    build_small_model,
    conv2d_backward,
    conv2d_forward_fast,
    dense_backward,
    dense_forward,
    forward_trace,
    maxpool_backward,
    maxpool_forward,
    model_backward,
    model_loss,
    relu_backward,
    relu_forward,
    sigmoid,
)
from app.tensor import Tensor

from conftest import FD_STEP, GRAD_TOL, central_difference, rel_err, sample_indices

TRIALS = 20
COORDS = 6


def _check(analytic: np.ndarray, arr: np.ndarray, loss_fn, rng: np.random.Generator) -> float:
    worst = 0.0
    for idx in sample_indices(rng, arr.shape, COORDS):
        numeric = central_difference(loss_fn, arr, idx)
        worst = max(worst, rel_err(float(analytic[idx]), numeric))
    return worst


def test_conv_layer_gradients(rng):
    worst = 0.0
    for _ in range(TRIALS):
        f = int(rng.choice([1, 2, 3]))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        c = int(rng.integers(1, 4))
        spec = ConvSpec(f=f, s=s, p=p, c_in=c, n_filters=int(rng.integers(1, 4)))
        x = rng.normal(size=(int(rng.integers(f, f + 5)), int(rng.integers(f, f + 5)), c))
        w = rng.normal(size=spec.weight_shape)
        b = rng.normal(size=spec.n_filters)
        params = LayerParams(w=Tensor(w), b=Tensor(b))
        probe = rng.normal(size=conv2d_forward_fast(Tensor(x), spec, params).shape)

        def loss() -> float:
            return float(np.sum(conv2d_forward_fast(Tensor(x), spec, LayerParams(Tensor(w), Tensor(b))).array * probe))

        gx, gw, gb = conv2d_backward(Tensor(x), spec, params, Tensor(probe))
        worst = max(worst, _check(gx.array, x, loss, rng), _check(gw.array, w, loss, rng), _check(gb.array, b, loss, rng))
    assert worst < GRAD_TOL


def test_relu_layer_gradients(rng):
    worst = 0.0
    for _ in range(TRIALS):
        x = rng.normal(size=(5, 4, 3))
        # 远离折点
        x[np.abs(x) < 1e-3] = 0.5
        probe = rng.normal(size=x.shape)

        def loss() -> float:
            return float(np.sum(relu_forward(Tensor(x)).array * probe))

        analytic = relu_backward(Tensor(x), Tensor(probe)).array
        worst = max(worst, _check(analytic, x, loss, rng))
    assert worst < GRAD_TOL


def test_maxpool_layer_gradients(rng):
    worst = 0.0
    for _ in range(TRIALS):
        shape = (int(rng.integers(4, 8)), int(rng.integers(4, 8)), int(rng.integers(1, 4)))
        # 元素间距远大于差分步长，argmax 不会被扰动改变
        x = (rng.permutation(int(np.prod(shape))) * 0.01).reshape(shape).astype(np.float64)
        probe = rng.normal(size=(shape[0] // 2, shape[1] // 2, shape[2]))

        def loss() -> float:
            return float(np.sum(maxpool_forward(Tensor(x), 2)[0].array * probe))

        _, record = maxpool_forward(Tensor(x), 2)
        analytic = maxpool_backward(record, Tensor(probe)).array
        worst = max(worst, _check(analytic, x, loss, rng))
    assert worst < GRAD_TOL


def test_dense_layer_gradients(rng):
    worst = 0.0
    for _ in range(TRIALS):
        n_in, n_out = int(rng.integers(1, 30)), int(rng.integers(1, 4))
        x = rng.normal(size=n_in)
        w = rng.normal(size=(n_out, n_in))
        b = rng.normal(size=n_out)
        probe = rng.normal(size=n_out)

        def loss() -> float:
            return float(np.sum(dense_forward(Tensor(x), LayerParams(Tensor(w), Tensor(b))).array * probe))

        gx, gw, gb = dense_backward(Tensor(x), LayerParams(Tensor(w), Tensor(b)), Tensor(probe))
        worst = max(worst, _check(gx.array, x, loss, rng), _check(gw.array, w, loss, rng), _check(gb.array, b, loss, rng))
    assert worst < GRAD_TOL


def test_sigmoid_bce_gradient_is_p_minus_y(rng):
    for z in rng.uniform(-6.0, 6.0, size=TRIALS):
        for y in (0, 1):
            numeric = (bce_loss(sigmoid(z + FD_STEP), y) - bce_loss(sigmoid(z - FD_STEP), y)) / (2 * FD_STEP)
            assert rel_err(sigmoid(z) - y, numeric) < GRAD_TOL


def _relu_masks(model, x: Tensor) -> list[np.ndarray]:
    acts, _ = forward_trace(model, x)
    return [acts[i].array > 0.0 for i, layer in enumerate(model.layers) if layer.kind == "relu"]


@pytest.mark.parametrize("trial", range(TRIALS))
def test_small_model_gradients(trial):
    rng = np.random.default_rng(1000 + trial)
    model = build_small_model(seed=trial)
    x = Tensor(rng.uniform(0.0, 1.0, size=(12, 12, 3)))
    y = int(rng.integers(0, 2))
    _, _, grads = model_backward(model, x, y)

    checked = 0
    worst = 0.0
    for layer, grad in zip(model.layers, grads):
        if grad is None:
            continue
        for arr, analytic in ((layer.params.w.array, grad.w.array), (layer.params.b.array, grad.b.array)):
            for idx in sample_indices(rng, arr.shape, COORDS):
                orig = arr[idx]
                arr[idx] = orig + FD_STEP
                plus, masks_plus = model_loss(model, x, y), _relu_masks(model, x)
                arr[idx] = orig - FD_STEP
                minus, masks_minus = model_loss(model, x, y), _relu_masks(model, x)
                arr[idx] = orig
                # 扰动跨过 ReLU 折点时差分不可信，跳过该坐标
                if any(not np.array_equal(a, b) for a, b in zip(masks_plus, masks_minus)):
                    continue
                numeric = (plus - minus) / (2.0 * FD_STEP)
                worst = max(worst, rel_err(float(analytic[idx]), numeric))
                checked += 1
    assert checked >= 12
    assert worst < GRAD_TOL
