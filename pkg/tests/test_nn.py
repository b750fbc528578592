from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from app.common import ArgumentError, ShapeError
from app.nn import (
    ConvSpec,
    LayerParams,
    bce_loss,
    build_model,
    build_paper_model,
    build_small_model,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_fast,
    conv_out_size,
    copy_model,
    dense_forward,
    forward_trace,
    infer_shapes,
    maxpool_backward,
    maxpool_forward,
    model_backward,
    model_forward,
    model_loss,
    parameters,
    relu_forward,
    sgd_step,
    sigmoid,
    with_parameters,
)
from app.tensor import Tensor


def _random_conv(rng: np.random.Generator, spec: ConvSpec) -> LayerParams:
    return LayerParams(w=Tensor(rng.normal(size=spec.weight_shape)), b=Tensor(rng.normal(size=spec.n_filters)))


def test_conv_out_size_walkthrough():
    assert conv_out_size(40, 0, 3, 1) == 38
    assert conv_out_size(38, 0, 6, 2) == 17
    assert conv_out_size(5, 1, 3, 2) == 3
    with pytest.raises(ShapeError):
        conv_out_size(2, 0, 3, 1)
    with pytest.raises(ArgumentError):
        conv_out_size(5, 0, 3, 0)


def test_default_model_shape_chain():
    model = build_paper_model(seed=0)
    shapes = infer_shapes(model)
    kinds = [layer.kind for layer in model.layers]
    assert kinds == ["conv", "relu", "conv", "relu", "flatten", "dense", "sigmoid"]
    assert shapes == [(40, 40, 3), (38, 38, 10), (38, 38, 10), (17, 17, 20), (17, 17, 20), (5780,), (1,), (1,)]
    assert model.layers[5].params.w.shape == (1, 5780)


def test_forward_trace_matches_static_shapes(rng):
    model = build_paper_model(seed=1)
    acts, _ = forward_trace(model, Tensor(rng.uniform(size=(40, 40, 3))))
    assert [a.shape for a in acts] == infer_shapes(model)


def test_conv_fast_path_matches_naive_loop(rng):
    configs = list(itertools.product([1, 2, 3, 6], [1, 2], [0, 1], [1, 3, 10]))
    extra = [
        (int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(0, 3)), int(rng.integers(1, 6)))
        for _ in range(12)
    ]
    assert len(configs) + len(extra) >= 50
    worst = 0.0
    for f, s, p, c in configs + extra:
        height = int(rng.integers(max(1, f - 2 * p), f + 8))
        width = int(rng.integers(max(1, f - 2 * p), f + 8))
        spec = ConvSpec(f=f, s=s, p=p, c_in=c, n_filters=int(rng.integers(1, 5)))
        params = _random_conv(rng, spec)
        x = Tensor(rng.normal(size=(height, width, c)))
        naive = conv2d_forward(x, spec, params)
        fast = conv2d_forward_fast(x, spec, params)
        assert naive.shape == fast.shape == (
            conv_out_size(height, p, f, s),
            conv_out_size(width, p, f, s),
            spec.n_filters,
        )
        worst = max(worst, float(np.max(np.abs(naive.array - fast.array))))
    assert worst <= 1e-10


def test_conv_identity_kernel(rng):
    spec = ConvSpec(f=1, s=1, p=0, c_in=3, n_filters=3)
    w = np.zeros(spec.weight_shape)
    for k in range(3):
        w[k, 0, 0, k] = 1.0
    params = LayerParams(w=Tensor(w), b=Tensor(np.zeros(3)))
    x = Tensor(rng.uniform(size=(6, 5, 3)))
    assert conv2d_forward(x, spec, params).equals(x)
    assert np.max(np.abs(conv2d_forward_fast(x, spec, params).array - x.array)) == 0.0


def test_conv_single_patch_sum():
    spec = ConvSpec(f=2, s=1, p=0, c_in=1, n_filters=1)
    params = LayerParams(w=Tensor(np.ones(spec.weight_shape)), b=Tensor(np.zeros(1)))
    x = Tensor(np.ones((2, 2, 1)))
    for conv in (conv2d_forward, conv2d_forward_fast):
        out = conv(x, spec, params)
        assert out.shape == (1, 1, 1)
        assert out.array[0, 0, 0] == 4.0


def test_conv_backward_zero_grad_and_bias_sum(rng):
    spec = ConvSpec(f=3, s=2, p=1, c_in=2, n_filters=3)
    params = _random_conv(rng, spec)
    x = Tensor(rng.normal(size=(7, 6, 2)))
    out_shape = conv2d_forward_fast(x, spec, params).shape

    grad_x, grad_w, grad_b = conv2d_backward(x, spec, params, Tensor(np.zeros(out_shape)))
    assert grad_x.shape == x.shape and grad_w.shape == spec.weight_shape
    for g in (grad_x, grad_w, grad_b):
        assert not np.any(g.array)

    grad_out = rng.normal(size=out_shape)
    _, _, grad_b = conv2d_backward(x, spec, params, Tensor(grad_out))
    for k in range(spec.n_filters):
        assert grad_b.array[k] == pytest.approx(grad_out[..., k].sum(), abs=1e-12)


def test_forward_ignores_inputs_under_zero_first_layer_weights(rng):
    model = build_small_model(seed=6)
    params = parameters(model)
    w = params[0].w.array.copy()
    w[..., 2] = 0.0
    params[0] = LayerParams(w=Tensor(w), b=params[0].b)
    model = with_parameters(model, params)

    x = rng.uniform(size=(12, 12, 3))
    y = x.copy()
    y[..., 2] = rng.uniform(size=(12, 12))
    assert model_forward(model, Tensor(x)) == model_forward(model, Tensor(y))


def test_conv_errors(rng):
    spec = ConvSpec(f=3, s=1, p=0, c_in=3, n_filters=2)
    params = _random_conv(rng, spec)
    with pytest.raises(ShapeError):
        conv2d_forward_fast(Tensor(rng.normal(size=(5, 5, 2))), spec, params)
    with pytest.raises(ShapeError):
        conv2d_forward_fast(Tensor(rng.normal(size=(2, 5, 3))), spec, params)
    with pytest.raises(ArgumentError):
        ConvSpec(f=0, s=1, p=0, c_in=1, n_filters=1)


def test_relu():
    x = Tensor.from_flat([4], [-1.0, 0.0, 2.0, -0.5])
    assert list(relu_forward(x).data) == [0.0, 0.0, 2.0, 0.0]


def test_maxpool_forward_backward_and_truncation():
    x = Tensor(np.arange(25, dtype=np.float64).reshape(5, 5, 1))
    out, record = maxpool_forward(x, 2)
    assert out.shape == (2, 2, 1)
    assert out.array[:, :, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]
    grad = maxpool_backward(record, Tensor(np.ones((2, 2, 1))))
    assert grad.shape == (5, 5, 1)
    assert grad.array.sum() == 4.0
    assert grad.array[1, 1, 0] == 1.0 and grad.array[4, 4, 0] == 0.0


def test_maxpool_ties_go_to_first_in_row_major_order():
    x = Tensor(np.ones((2, 2, 1)))
    out, record = maxpool_forward(x, 2)
    grad = maxpool_backward(record, Tensor(np.full((1, 1, 1), 3.0)))
    assert out.array[0, 0, 0] == 1.0
    assert grad.array[:, :, 0].tolist() == [[3.0, 0.0], [0.0, 0.0]]
    with pytest.raises(ShapeError):
        maxpool_forward(Tensor(np.ones((1, 3, 1))), 2)


def test_dense_forward_and_mismatch():
    params = LayerParams(w=Tensor.from_flat([2, 3], [1, 2, 3, 4, 5, 6]), b=Tensor.from_flat([2], [0.5, -0.5]))
    out = dense_forward(Tensor.from_flat([3], [1, 0, -1]), params)
    assert list(out.data) == [-1.5, -2.5]
    with pytest.raises(ShapeError):
        dense_forward(Tensor.from_flat([2], [1, 0]), params)


def test_sigmoid_and_bce():
    assert sigmoid(0.0) == 0.5
    for z in (-800.0, -40.0, 40.0, 800.0):
        assert 0.0 < sigmoid(z) < 1.0
    assert sigmoid(2.0) + sigmoid(-2.0) == pytest.approx(1.0, abs=1e-15)
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2.0), abs=1e-15)
    assert bce_loss(1.0, 1) == pytest.approx(0.0, abs=1e-11)
    assert bce_loss(0.0, 0) == pytest.approx(0.0, abs=1e-11)
    assert math.isfinite(bce_loss(0.0, 1)) and bce_loss(0.0, 1) > 20.0
    assert bce_loss(0.3, 1) > bce_loss(0.7, 1) > 0.0


def test_sigmoid_is_strictly_increasing():
    values = [sigmoid(z) for z in np.linspace(-30.0, 30.0, 121)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert sigmoid(-800.0) <= sigmoid(-40.0) < sigmoid(40.0) <= sigmoid(800.0)


def test_build_model_is_seeded_and_he_scaled():
    a = build_paper_model(seed=4)
    b = build_paper_model(seed=4)
    c = build_paper_model(seed=5)
    for pa, pb in zip(parameters(a), parameters(b)):
        if pa is not None:
            assert pa.w.equals(pb.w) and pa.b.equals(pb.b)
    assert not parameters(a)[0].w.equals(parameters(c)[0].w)
    w2 = parameters(a)[2].w.array
    assert np.std(w2) == pytest.approx(math.sqrt(2.0 / 360.0), rel=0.05)
    assert np.all(parameters(a)[2].b.array == 0.0)


def test_build_model_rejects_broken_chains():
    with pytest.raises(ShapeError, match="layer 0"):
        build_model((4, 4, 1), [{"kind": "conv", "n_filters": 2, "f": 6}, {"kind": "flatten"},
                                {"kind": "dense", "units": 1}, {"kind": "sigmoid"}])
    with pytest.raises(ShapeError):
        build_model((8, 8, 1), [{"kind": "flatten"}, {"kind": "dense", "units": 2}, {"kind": "sigmoid"}])
    with pytest.raises(ShapeError, match="layer 1"):
        build_model((8, 8, 1), [{"kind": "relu"}, {"kind": "dense", "units": 1}, {"kind": "sigmoid"}])
    with pytest.raises(ArgumentError):
        build_model((8, 8, 1), [{"kind": "softmax"}])


def test_model_with_optional_maxpool(rng):
    model = build_model(
        (12, 12, 3),
        [
            {"kind": "conv", "n_filters": 4, "f": 3},
            {"kind": "relu"},
            {"kind": "maxpool", "window": 2},
            {"kind": "flatten"},
            {"kind": "dense", "units": 1},
            {"kind": "sigmoid"},
        ],
        seed=2,
    )
    assert infer_shapes(model)[3] == (5, 5, 4)
    p = model_forward(model, Tensor(rng.uniform(size=(12, 12, 3))))
    assert 0.0 < p < 1.0


def test_forward_rejects_wrong_input_shape(rng):
    with pytest.raises(ShapeError):
        model_forward(build_small_model(0), Tensor(rng.uniform(size=(40, 40, 3))))


def test_model_backward_agrees_with_forward(rng):
    model = build_small_model(seed=3)
    x = Tensor(rng.uniform(size=(12, 12, 3)))
    loss, prob, grads = model_backward(model, x, 1)
    assert prob == model_forward(model, x)
    assert loss == model_loss(model, x, 1)
    assert [g is None for g in grads] == [p is None for p in parameters(model)]
    for g, p in zip(grads, parameters(model)):
        if g is not None:
            assert g.w.shape == p.w.shape and g.b.shape == p.b.shape


def test_sgd_step_updates():
    p = [LayerParams(w=Tensor.from_flat([1], [1.0]), b=Tensor.from_flat([1], [0.0])), None]
    g = [LayerParams(w=Tensor.from_flat([1], [0.5]), b=Tensor.from_flat([1], [-1.0])), None]
    new_p, vel = sgd_step(p, g, lr=0.1, momentum=0.0)
    assert new_p[0].w.get([0]) == pytest.approx(0.95, abs=1e-15)
    assert new_p[0].b.get([0]) == pytest.approx(0.1, abs=1e-15)
    assert new_p[1] is None and vel[1] is None

    again, vel = sgd_step(new_p, g, lr=0.1, momentum=0.9, velocity=vel)
    # v = 0.9 * 0.5 + 0.5
    assert vel[0].w.get([0]) == pytest.approx(0.95, abs=1e-15)
    assert again[0].w.get([0]) == pytest.approx(0.95 - 0.095, abs=1e-15)


def test_sgd_step_with_zero_lr_is_exact_noop(rng):
    params = parameters(build_small_model(seed=1))
    grads = [None if p is None else LayerParams(w=Tensor(rng.normal(size=p.w.shape)), b=Tensor(rng.normal(size=p.b.shape))) for p in params]
    new_p, _ = sgd_step(params, grads, lr=0.0, momentum=0.9)
    for a, b in zip(params, new_p):
        if a is not None:
            assert a.w.equals(b.w) and a.b.equals(b.b)


@pytest.mark.parametrize("lr,momentum", [(-0.1, 0.5), (0.1, 1.0), (0.1, -0.1)])
def test_sgd_step_rejects_bad_hyperparameters(lr, momentum):
    with pytest.raises(ArgumentError):
        sgd_step([], [], lr=lr, momentum=momentum)


def test_copy_model_is_independent():
    model = build_small_model(seed=0)
    clone = copy_model(model)
    clone.layers[0].params.w.array[0, 0, 0, 0] += 1.0
    assert not clone.layers[0].params.w.equals(model.layers[0].params.w)
