import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
from utils import mlp
from utils.errors import ContractViolation, NumericError, ValidationError
from utils.losses import OodLossConfig, RepelLossConfig, e_ood, repel, squared_error

SOFTMAX_SPEC = {"layers": [{"in": 2, "out": 12, "act": "sigmoid"}, {"in": 12, "out": 5, "act": "softmax"}]}
SIGMOID_SPEC = {"layers": [{"in": 9, "out": 10, "act": "sigmoid"}, {"in": 10, "out": 6, "act": "sigmoid"}]}


def test_validate_model_spec_problems():
    assert mlp.validate_model_spec(SOFTMAX_SPEC) == []
    bad = {"layers": [{"in": 2, "out": 4, "act": "softmax"}, {"in": 3, "out": 2, "act": "tanh"}]}
    problems = mlp.validate_model_spec(bad)
    assert any("final activation" in p for p in problems)
    assert any("does not chain" in p for p in problems)
    assert any("tanh" in p for p in problems)
    assert mlp.validate_model_spec({"layers": [], "extra": 1}) != []


def test_init_is_deterministic():
    a = mlp.init(SOFTMAX_SPEC, 7)
    b = mlp.init(SOFTMAX_SPEC, 7)
    c = mlp.init(SOFTMAX_SPEC, 8)
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.weights[0], c.weights[0])
    assert a.dtype == np.float32
    assert all(not bias.any() for bias in a.biases)


def test_init_glorot_bounds():
    model = mlp.init(SOFTMAX_SPEC, 0)
    assert np.abs(model.weights[0]).max() <= np.sqrt(6.0 / 14)
    assert model.weights[0].shape == (12, 2)


def test_model_from_spec_json():
    model = mlp.model_from_spec_json('{"layers": [{"in": 3, "out": 2, "act": "linear"}]}', 0)
    assert mlp.model_to_spec(model) == {"layers": [{"in": 3, "out": 2, "act": "linear"}]}
    with pytest.raises(ValidationError):
        mlp.model_from_spec_json("{not json", 0)


def test_forward_shapes_and_softmax_rows():
    model = mlp.init(SOFTMAX_SPEC, 0)
    out = mlp.forward(model, np.random.default_rng(0).uniform(size=(10, 2)))
    assert out.shape == (10, 5)
    assert out.sum(axis=1) == pytest.approx(np.ones(10), abs=1e-6)
    with pytest.raises(ValidationError):
        mlp.forward(model, np.zeros((4, 3)))


def test_backward_needs_cache():
    model = mlp.init(SOFTMAX_SPEC, 0)
    batch = np.zeros((3, 2))
    with pytest.raises(ContractViolation):
        mlp.backward(model, batch, np.zeros((3, 5)), None)
    cache = []
    mlp.forward(model, batch, cache)
    with pytest.raises(ContractViolation):
        mlp.backward(model, batch, np.zeros((3, 4)), cache)


def test_gradient_check_softmax_model_under_ood_loss():
    model = mlp.init(SOFTMAX_SPEC, 1)
    batch = np.random.default_rng(1).uniform(size=(16, 2))
    error = mlp.gradient_check(model, lambda y: e_ood(y, OodLossConfig(), validate=False), batch, h=1e-5)
    assert error < 1e-3


def test_gradient_check_sigmoid_model_under_repulsion():
    model = mlp.init(SIGMOID_SPEC, 2)
    batch = np.random.default_rng(2).uniform(size=(8, 9))
    cfg = RepelLossConfig(mode="node_wise", alpha=0.05)
    error = mlp.gradient_check(model, lambda y: repel(y, cfg, validate=False), batch, h=1e-5)
    assert error < 1e-3


def test_gradient_check_linear_head_under_squared_error():
    spec = {"layers": [{"in": 4, "out": 6, "act": "sigmoid"}, {"in": 6, "out": 3, "act": "linear"}]}
    model = mlp.init(spec, 3)
    rng = np.random.default_rng(3)
    batch, targets = rng.uniform(size=(5, 4)), rng.uniform(size=(5, 3))
    error = mlp.gradient_check(model, lambda y: squared_error(y, targets), batch, h=1e-5)
    assert error < 1e-3


def test_gradient_check_rejects_step():
    model = mlp.init(SOFTMAX_SPEC, 0)
    with pytest.raises(ValidationError):
        mlp.gradient_check(model, lambda y: e_ood(y, OodLossConfig()), np.zeros((4, 2)), h=0.1)


def test_adam_first_step_moves_by_lr():
    params = [np.array([1.0, -1.0], dtype=np.float32)]
    state = mlp.make_optimizer(params, "adam", lr=0.01)
    updated = mlp.optimizer_step(state, params, [np.array([3.0, -0.5], dtype=np.float32)])
    assert updated[0] == pytest.approx([0.99, -0.99], abs=1e-6)
    assert updated[0].dtype == np.float32
    assert state.step == 1


def test_adamw_decoupled_decay():
    params = [np.array([2.0], dtype=np.float64)]
    state = mlp.make_optimizer(params, "adamw", lr=0.1, weight_decay=0.5)
    updated = mlp.optimizer_step(state, params, [np.zeros(1)])
    assert updated[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_optimizer_rejects_bad_input():
    params = [np.zeros((2, 2), dtype=np.float32), np.zeros(2, dtype=np.float32)]
    with pytest.raises(ValidationError):
        mlp.make_optimizer(params, "adam", weight_decay=0.1)
    with pytest.raises(ValidationError):
        mlp.make_optimizer(params, "sgd")
    state = mlp.make_optimizer(params, "adam")
    with pytest.raises(NumericError, match=r"layers\[0\]\.weights"):
        mlp.optimizer_step(state, params, [np.full((2, 2), np.nan), np.zeros(2)])
    with pytest.raises(ValidationError):
        mlp.optimizer_step(state, params, [np.zeros((2, 3)), np.zeros(2)])


def test_make_rng_streams():
    a = mlp.make_rng(5, "batch", 0).random(4)
    b = mlp.make_rng(5, "batch", 0).random(4)
    c = mlp.make_rng(5, "batch", 1).random(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_finite_difference_error_quadratic():
    values = np.array([1.0, -2.0, 0.5])
    assert mlp.finite_difference_error(lambda x: float(np.sum(x ** 2)), values, 2 * values, 1e-4) < 1e-8
    assert mlp.finite_difference_error(lambda x: float(np.sum(x ** 2)), values, values, 1e-4) > 0.4


def test_adam_zero_gradient_leaves_parameters():
    params = [np.array([[0.5, -1.5]], dtype=np.float32), np.array([0.25], dtype=np.float32)]
    state = mlp.make_optimizer(params, "adam", lr=0.1)
    updated = params
    for _ in range(3):
        updated = mlp.optimizer_step(state, updated, [np.zeros_like(p) for p in params])
    assert all(np.array_equal(a, b) for a, b in zip(updated, params))


def test_adamw_without_decay_follows_adam():
    rng = np.random.default_rng(4)
    start = [rng.normal(size=(3, 2)), rng.normal(size=3)]
    adam = mlp.make_optimizer(start, "adam", lr=0.05)
    adamw = mlp.make_optimizer(start, "adamw", lr=0.05, weight_decay=0.0)
    a, b = start, start
    for _ in range(5):
        grads = [rng.normal(size=(3, 2)), rng.normal(size=3)]
        a = mlp.optimizer_step(adam, a, grads)
        b = mlp.optimizer_step(adamw, b, grads)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_backward_single_sigmoid_unit_by_hand():
    model = mlp.MlpModel([mlp.LayerSpec(2, 1, "sigmoid")],
                         [np.array([[0.3, -0.7]])], [np.array([0.1])])
    x = np.array([[1.5, 2.0]])
    cache = []
    y = mlp.forward(model, x, cache)
    assert y[0, 0] == pytest.approx(1 / (1 + np.exp(-(0.45 - 1.4 + 0.1))))
    grad_w, grad_b = mlp.backward(model, x, 2 * y, cache)
    local = 2 * y[0, 0] * y[0, 0] * (1 - y[0, 0])
    assert grad_w[0] == pytest.approx(local * x[0])
    assert grad_b[0] == pytest.approx(local)
