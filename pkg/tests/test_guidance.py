import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edsdiff.guidance import (
    EDS,
    Fixed,
    GradNorm,
    NoGuidance,
    RangeConstant,
    TimeAware,
    eds_scale,
    entropy,
    guided_gradient,
    guided_gradient_batch,
    make_scheme,
    scale_factor,
)
from edsdiff.neural import MlpModel, grad_input_log_prob, init_mlp, model_input, softmax
from edsdiff.numerics import RngStream


def dist_of(p):
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore"):
        return softmax(np.log(p))


def test_entropy_examples():
    assert abs(entropy(softmax(np.zeros(1000))) - 6.907755) < 1e-6
    assert abs(entropy(softmax(np.zeros(1000))) - math.log(1000)) < 1e-9
    assert entropy(dist_of([0, 1, 0])) == 0.0
    direct = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert abs(direct - 0.325083) < 1e-6
    assert abs(entropy(dist_of([0.9, 0.1])) - direct) < 1e-12


def test_eds_scale_examples():
    for K in (2, 8, 1000):
        assert eds_scale(softmax(np.zeros(K)), 2.0) == pytest.approx(2.0, abs=1e-12)
    # two equal classes out of four: H = ln 2 = ln 4 / 2
    assert eds_scale(dist_of([0.5, 0.5, 0, 0]), 1.0) == pytest.approx(2.0, abs=1e-12)


def test_eds_clamp_engages():
    gamma, s_max, K = 1.0, 50.0, 8
    logits = np.array([30.0] + [0.0] * (K - 1))
    d = softmax(logits)
    assert entropy(d) < gamma * math.log(K) / s_max
    assert eds_scale(d, gamma, s_max=s_max) == s_max
    # entropy floor bounds the unclamped ratio
    onehot = dist_of([1, 0, 0, 0, 0, 0, 0, 0])
    assert eds_scale(onehot, 1.0, entropy_floor=1e-8, s_max=1e12) == pytest.approx(math.log(8) / 1e-8)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=30), st.floats(0.1, 10))
def test_eds_lower_bound(logits, gamma):
    d = softmax(np.array(logits))
    h = entropy(d)
    assert -1e-15 <= h <= math.log(len(logits)) + 1e-9
    assert eds_scale(d, gamma) >= gamma * (1 - 1e-12)


def test_scale_factor_variants():
    T = 1000
    assert scale_factor(NoGuidance(), 10, T, 1.0, 1.0) == 0.0
    assert scale_factor(Fixed(3.0), 10, T, 1.0, 1.0) == 3.0
    assert scale_factor(RangeConstant(C=5.0, t_cut=700), 800, T, 1.0, 1.0) == 1.0
    assert scale_factor(RangeConstant(C=5.0, t_cut=700), 700, T, 1.0, 1.0) == 5.0
    assert scale_factor(TimeAware(C=0.01), T, T, 1.0, 1.0) == 0.0
    assert scale_factor(TimeAware(C=0.01), 400, T, 1.0, 1.0) == pytest.approx(6.0)
    assert scale_factor(GradNorm(C=4.0, M=0.2), 10, T, 1.0, 0.1) == 1.0
    assert scale_factor(GradNorm(C=4.0, M=0.2), 10, T, 1.0, 0.3) == 4.0
    assert scale_factor(EDS(gamma=2.0), 10, T, math.log(8) / 4, 1.0, K=8) == pytest.approx(8.0)


def test_scale_factor_is_vectorized():
    s = scale_factor(GradNorm(C=4.0, M=0.2), 10, 100, np.ones(3), np.array([0.1, 0.2, 0.5]))
    assert list(s) == [1.0, 4.0, 4.0]


def test_make_scheme_validation():
    assert make_scheme("eds", gamma=0.5) == EDS(gamma=0.5)
    with pytest.raises(ValueError):
        make_scheme("fixed", s=0.0)
    with pytest.raises(ValueError):
        make_scheme("eds", gamma=2.0, s_max=1.0)
    with pytest.raises(ValueError):
        make_scheme("cfg")


@pytest.fixture
def classifier():
    return init_mlp([5, 16, 4], RngStream(3), "silu")


def test_guided_gradient_none_is_zero(classifier):
    g, rec = guided_gradient(classifier, np.array([0.5, -0.2]), 50, 100, 1, NoGuidance())
    assert np.array_equal(g, np.zeros(2)) and rec.scale == 0.0


def test_guided_gradient_fixed_one_is_raw(classifier):
    x = np.array([0.5, -0.2])
    g, rec = guided_gradient(classifier, x, 50, 100, 2, Fixed(1.0))
    raw = grad_input_log_prob(classifier, model_input(x, 50, 100)[0], 2)[:2]
    assert np.array_equal(g, raw)
    assert rec.grad_norm == pytest.approx(np.linalg.norm(raw), rel=1e-15)


def test_record_entropy_matches_recomputed(classifier):
    x = RngStream(1).normal((20, 2))
    b = guided_gradient_batch(classifier, x, 30, 100, np.arange(20) % 4, EDS(1.0))
    from edsdiff.neural import forward

    h = entropy(softmax(forward(classifier, model_input(x, 30, 100))))
    assert np.max(np.abs(b.entropy - h)) < 1e-12
    assert all(0 <= r.entropy <= math.log(4) + 1e-9 for r in b.records())


@pytest.mark.parametrize("scheme", [Fixed(2.5), RangeConstant(3.0, 40), TimeAware(0.1), GradNorm(5.0, 0.2), EDS(1.0)])
def test_guided_gradient_rescales_never_rotates(classifier, scheme):
    x = RngStream(2).normal((30, 2))
    labels = np.arange(30) % 4
    raw = guided_gradient_batch(classifier, x, 30, 100, labels, Fixed(1.0)).g_prime
    b = guided_gradient_batch(classifier, x, 30, 100, labels, scheme)
    assert np.all(b.scale > 0)
    assert np.allclose(b.g_prime, b.scale[:, None] * raw, rtol=1e-15, atol=0)


def test_eds_norm_lower_bound(classifier):
    x = RngStream(4).normal((200, 2)) * 3
    labels = np.arange(200) % 4
    raw = guided_gradient_batch(classifier, x, 20, 100, labels, Fixed(1.0)).g_prime
    b = guided_gradient_batch(classifier, x, 20, 100, labels, EDS(1.5))
    assert np.all(np.linalg.norm(b.g_prime, axis=1) >= 1.5 * np.linalg.norm(raw, axis=1) * (1 - 1e-12))


def test_eds_equals_gamma_on_uniform_classifier():
    # zero last layer: uniform prediction everywhere, so the EDS scale is exactly gamma
    m = init_mlp([5, 8, 4], RngStream(0))
    m = m.with_params(m.params()[:2] + [np.zeros((4, 8)), np.zeros(4)])
    b = guided_gradient_batch(m, RngStream(1).normal((5, 2)), 10, 100, [0, 1, 2, 3, 0], EDS(0.7))
    assert np.allclose(b.scale, 0.7, rtol=1e-15)
    assert np.all(b.g_prime == 0.0)
