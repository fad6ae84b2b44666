import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import central_diff, log_softmax_naive, max_rel_err, naive_forward
from edsdiff.neural import (
    AdamState,
    MlpModel,
    adam_step,
    cross_entropy,
    forward,
    grad_input_log_prob,
    grad_params,
    init_mlp,
    softmax,
)
from edsdiff.numerics import RngStream
from edsdiff.training import classifier_loss_fn, mse_loss_fn


def random_model(dims, seed, activation="silu", bias_scale=0.5):
    rng = RngStream(seed, 99)
    m = init_mlp(dims, rng, activation)
    return m.with_params([p + (bias_scale * rng.normal(p.shape) if p.ndim == 1 else 0) for p in m.params()])


def test_zero_model_outputs_zero():
    m = MlpModel([3, 4, 2], [np.zeros((4, 3)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
    assert np.array_equal(forward(m, np.array([1.0, -2.0, 3.0])), np.zeros(2))


def test_single_linear_layer():
    rng = RngStream(0)
    W, b, x = rng.normal((3, 4)), rng.normal(3), rng.normal(4)
    m = MlpModel([4, 3], [W], [b])
    assert np.array_equal(forward(m, x), x @ W.T + b)


@pytest.mark.parametrize("activation", ["silu", "tanh"])
def test_forward_matches_naive(activation):
    m = random_model([5, 7, 6, 3], 1, activation)
    x = RngStream(2).normal(5)
    assert np.max(np.abs(forward(m, x) - naive_forward(m, x))) < 1e-12


def test_forward_dimension_mismatch():
    m = random_model([2, 3, 1], 0)
    with pytest.raises(ValueError):
        forward(m, np.zeros(3))


def test_forward_is_pure():
    m = random_model([5, 16, 4], 3)
    x = RngStream(4).normal((10, 5))
    assert np.array_equal(forward(m, x), forward(m, x))


def test_model_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        MlpModel([2, 3], [np.zeros((2, 3))], [np.zeros(3)])


def test_softmax_examples():
    assert np.allclose(softmax(np.zeros(4)).probs, 0.25, atol=0, rtol=1e-15)
    p = softmax(np.array([math.log(2), 0.0])).probs
    assert np.max(np.abs(p - [2 / 3, 1 / 3])) < 1e-12
    z = RngStream(5).normal(6)
    # z + 100 is itself rounded (ulp ~1e-14), so agreement is to that level, not bitwise
    assert np.max(np.abs(softmax(z + 100).probs - softmax(z).probs)) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_invariants(logits):
    d = softmax(np.array(logits))
    assert abs(d.probs.sum() - 1) < 1e-9
    assert np.all(d.probs > 0)
    assert np.max(np.abs(np.exp(d.log_probs) - d.probs)) < 1e-12


def test_cross_entropy_examples():
    assert math.isclose(cross_entropy(softmax(np.zeros(10)), 3), math.log(10), abs_tol=1e-15)
    onehot = softmax(np.array([0.0, -np.inf, -np.inf]))
    assert cross_entropy(onehot, 0) == 0.0
    assert math.isclose(cross_entropy(softmax(np.array([0.0, 0.0])), 1), math.log(2), abs_tol=1e-15)
    with pytest.raises(ValueError):
        cross_entropy(softmax(np.zeros(3)), 3)


def _flat_loss(model, x, y, loss_fn):
    def f(flat):
        m = model.with_flat_params(flat)
        return float(np.mean(loss_fn(forward(m, x), y)[0]))

    return f


@pytest.mark.parametrize("seed", range(3))
def test_grad_params_vs_finite_differences(seed):
    model = random_model([2, 16, 8, 4], seed)
    rng = RngStream(seed, 7)
    x, y = rng.normal((5, 2)), rng.integers(0, 4, size=5)
    loss_fn = classifier_loss_fn(0.2)
    _, grads = grad_params(model, x, y, loss_fn)
    analytic = np.concatenate([g.ravel() for g in grads])
    fd = central_diff(_flat_loss(model, x, y, loss_fn), model.flat_params(), h=1e-5)
    assert max_rel_err(analytic, fd) < 1e-4


def test_grad_params_mse_vs_finite_differences():
    model = random_model([3, 8, 2], 11, "tanh")
    rng = RngStream(11, 7)
    x, y = rng.normal((4, 3)), rng.normal((4, 2))
    _, grads = grad_params(model, x, y, mse_loss_fn)
    analytic = np.concatenate([g.ravel() for g in grads])
    fd = central_diff(_flat_loss(model, x, y, mse_loss_fn), model.flat_params())
    assert max_rel_err(analytic, fd) < 1e-4


def test_grad_params_unused_parameter_is_zero():
    # second output is ignored by the loss, so its last-layer row and bias get exactly zero gradient
    model = random_model([2, 5, 2], 0)

    def first_only(out, target):
        d = np.zeros_like(out)
        d[:, 0] = 2 * (out[:, 0] - target)
        return (out[:, 0] - target) ** 2, d

    _, grads = grad_params(model, RngStream(1).normal((3, 2)), np.zeros(3), first_only)
    assert np.all(grads[-2][1] == 0.0) and grads[-1][1] == 0.0


def test_grad_params_duplicated_batch():
    model = random_model([2, 6, 3], 4)
    rng = RngStream(4, 1)
    x, y = rng.normal((4, 2)), np.array([0, 1, 2, 1])
    loss_fn = classifier_loss_fn(0.0)
    _, g1 = grad_params(model, x, y, loss_fn)
    _, g2 = grad_params(model, np.concatenate([x, x]), np.concatenate([y, y]), loss_fn)
    for a, b in zip(g1, g2):
        assert np.allclose(a, b, rtol=1e-13, atol=1e-15)


def test_grad_input_single_class_is_zero():
    model = random_model([3, 5, 1], 2)
    assert np.all(grad_input_log_prob(model, np.array([0.3, -1.0, 2.0]), 0) == 0.0)


def test_grad_input_linear_softmax_closed_form():
    rng = RngStream(8)
    W, b, x = rng.normal((4, 3)), rng.normal(4), rng.normal(3)
    model = MlpModel([3, 4], [W], [b])
    p = softmax(W @ x + b).probs
    for label in range(4):
        expected = W[label] - p @ W
        assert np.max(np.abs(grad_input_log_prob(model, x, label) - expected)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_grad_input_vs_finite_differences(seed):
    model = random_model([5, 16, 8, 4], seed + 20)
    x = RngStream(seed, 3).normal(5)
    label = seed % 4
    fd = central_diff(lambda v: log_softmax_naive(list(forward(model, v)), label), x)
    assert max_rel_err(grad_input_log_prob(model, x, label), fd) < 1e-4


def test_grad_input_label_out_of_range():
    with pytest.raises(ValueError):
        grad_input_log_prob(random_model([2, 3], 0), np.zeros(2), 3)


def test_adam_zero_gradient():
    model = random_model([2, 4, 2], 0)
    zero = [np.zeros_like(p) for p in model.params()]
    new, _ = adam_step(model, zero, AdamState.for_model(model), 1e-3)
    assert np.array_equal(new.flat_params(), model.flat_params())
    # nonzero moments decay by beta1 / beta2
    ones = [np.ones_like(p) for p in model.params()]
    _, st = adam_step(model, zero, AdamState(ones, [o.copy() for o in ones], 3), 1e-3)
    assert all(np.all(m == 0.9) for m in st.m) and all(np.all(v == 0.999) for v in st.v)


def test_adam_first_step_bounded():
    model = random_model([3, 5, 2], 1)
    grads = [RngStream(2).normal(p.shape) for p in model.params()]
    new, _ = adam_step(model, grads, AdamState.for_model(model), 0.01)
    delta = new.flat_params() - model.flat_params()
    assert np.all(np.abs(delta) <= 0.01 * (1 + 1e-8))
    assert np.all(np.sign(delta) == -np.sign(np.concatenate([g.ravel() for g in grads])))


def test_adam_converges_on_quadratic():
    # loss = 0.5 * sum(c_i * w_i^2) over all parameters of a tiny model
    model = random_model([2, 3, 1], 5)
    c = 0.5 + np.abs(RngStream(5, 1).normal(model.n_params))

    def loss(flat):
        return 0.5 * float(np.sum(c * flat * flat))

    start = loss(model.flat_params())
    state = AdamState.for_model(model)
    for _ in range(1000):
        flat = model.flat_params()
        model, state = adam_step(model, model.with_flat_params(c * flat).params(), state, 0.01)
    assert loss(model.flat_params()) < 1e-6 * start
