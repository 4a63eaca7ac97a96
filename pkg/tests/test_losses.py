import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadehash import ndtensor as nt
from cascadehash import losses as L
from cascadehash.ndtensor import Tensor, check_gradients


def test_smoothing_examples():
    np.testing.assert_allclose(L.smooth_labels(np.array([[1.0, 0, 0, 0]]), 0.1), [[0.925, 0.025, 0.025, 0.025]])
    y = np.eye(3)
    np.testing.assert_array_equal(L.smooth_labels(y, 0.0), y)
    np.testing.assert_allclose(L.smooth_labels(np.array([[0.0, 1.0]]), 0.5), [[0.25, 0.75]])


def test_smoothing_rejects_bad_input():
    with pytest.raises(ValueError):
        L.smooth_labels(np.array([[0.5, 0.5]]), 0.1)
    with pytest.raises(ValueError):
        L.smooth_labels(np.eye(2), 1.0)
    with pytest.raises(ValueError):
        L.smooth_labels(np.eye(2), 0.1, num_classes=3)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 20), st.floats(0.0, 0.99), st.integers(0, 2**31 - 1))
def test_smoothed_rows_sum_to_one(l, lam, seed):
    labels = np.random.default_rng(seed).integers(0, l, size=6)
    s = L.smooth_labels(L.onehot_rows(labels, l), lam)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(s.max(axis=1), 1 - lam + lam / l)


def test_classification_loss_identical_branches():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4))
    t = L.smooth_labels(L.onehot_rows([0, 1, 2, 3, 0], 4), 0.1)
    org, aug, cls = L.classification_loss(Tensor(logits), Tensor(logits.copy()), t)
    assert float(org.data) == float(aug.data) == float(cls.data)


def test_classification_loss_uniform_logits():
    t = L.onehot_rows([0, 1, 2], 4)
    _, _, cls = L.classification_loss(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), t)
    assert float(cls.data) == pytest.approx(math.log(4), abs=1e-12)


def test_classification_loss_gradients_both_branches():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    t = L.smooth_labels(L.onehot_rows([1, 3, 0], 4), 0.1)
    errs = check_gradients(lambda: L.classification_loss(a, b, t)[2], [a, b])
    assert max(errs.values()) < 1e-4


def test_hash_loss_examples():
    c = np.array([[1.0, -1.0, 1.0]])
    assert float(L.hash_regression_loss(Tensor(c.copy()), c).data) == 0.0
    assert float(L.hash_regression_loss(Tensor(np.zeros((1, 2))), np.array([[1.0, -1.0]])).data) == 2.0
    with pytest.raises(ValueError):
        L.hash_regression_loss(Tensor(np.zeros((2, 3))), np.ones((2, 4)))


def test_hash_loss_gradient_closed_form():
    rng = np.random.default_rng(2)
    h = Tensor(rng.normal(size=(4, 12)), requires_grad=True)
    c = rng.choice([-1.0, 1.0], size=(4, 12))
    nt.backward(L.hash_regression_loss(h, c))
    np.testing.assert_allclose(h.grad, 2 * (h.data - c) / 4, atol=1e-12)


def test_balanced_loss_substitution_and_fixed_mode():
    one = Tensor(np.array(1.0))
    total = L.total_balanced_loss(one, one, L.LossWeights())
    assert float(total.data) == pytest.approx(2 + 2 * math.log(2), abs=1e-12)
    assert float(total.data) == pytest.approx(3.386294, abs=1e-6)
    assert float(L.total_balanced_loss(Tensor(np.array(0.3)), Tensor(np.array(0.4))).data) == pytest.approx(0.7)


def test_balanced_loss_alpha_derivative():
    lh, alpha = 0.8, 1.7
    analytic = -2 * lh * alpha**-3 + 1 / (alpha + 1)
    f = lambda a: L.balanced_value(lh, 1.0, a, 1.0)  # noqa: E731
    numeric = (f(alpha + 1e-5) - f(alpha - 1e-5)) / 2e-5
    assert abs(analytic - numeric) / abs(analytic) < 1e-6


def test_balanced_loss_gradients_raw_weights():
    w = L.LossWeights(alpha=1.4, beta=0.6)
    lh = Tensor(np.array(0.9), requires_grad=True)
    lc = Tensor(np.array(2.1), requires_grad=True)
    params = [lh, lc, w.raw_a, w.raw_b]
    errs = check_gradients(lambda: L.total_balanced_loss(lh, lc, w), params)
    assert max(errs.values()) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.floats(-700, 50))
def test_weights_stay_above_floor(raw):
    w = L.LossWeights.from_raw(raw, raw)
    a, b = w.values
    assert a >= L.WEIGHT_FLOOR and b >= L.WEIGHT_FLOOR
    assert float(w.alpha().data) >= L.WEIGHT_FLOOR


def test_weights_initialize_at_requested_values():
    a, b = L.LossWeights(alpha=1.0, beta=2.5).values
    assert a == pytest.approx(1.0, abs=1e-12)
    assert b == pytest.approx(2.5, abs=1e-12)


def test_stationary_alpha_root():
    a = L.stationary_alpha(1.0)
    assert a**3 == pytest.approx(2 * (a + 1), abs=1e-10)
    assert a == pytest.approx(1.7693, abs=1e-4)


def test_stationary_alpha_monotone_in_loss():
    grid = [1e-6, 1e-3, 0.1, 0.5, 1, 2, 5, 20]
    roots = [L.stationary_alpha(v) for v in grid]
    assert all(b > a for a, b in zip(roots, roots[1:]))
    assert roots[0] < 0.02
    weights = [1 / r**2 for r in roots]
    assert all(b < a for a, b in zip(weights, weights[1:]))


def test_gradient_descent_on_alpha_reaches_stationary_point():
    w = L.LossWeights()
    lh = Tensor(np.array(1.0))
    for _ in range(5000):
        w.raw_a.grad = None
        a = w.alpha()
        nt.backward(nt.add(nt.div(lh, nt.mul(a, a)), nt.log(nt.add(a, 1.0))))
        w.raw_a.data = w.raw_a.data - 0.1 * w.raw_a.grad
    assert abs(w.values[0] - L.stationary_alpha(1.0)) < 1e-3


def test_breakdown_reconstruction():
    w = L.LossWeights(alpha=1.3, beta=0.7)
    lh, lc = Tensor(np.array(3.2)), Tensor(np.array(1.1))
    total = L.total_balanced_loss(lh, lc, w)
    a, b = w.values
    bd = L.LossBreakdown(1.0, 1.2, 1.1, 3.2, float(total.data), a, b)
    assert bd.reconstruct() == pytest.approx(bd.L_TOTAL, abs=1e-12)
