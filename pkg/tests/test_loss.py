import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phnn import tensor as T
from phnn.errors import DataError, ModeError
from phnn.loss import LossSpec, balanced_bce, estimate_beta, total_loss
from phnn.model import ForwardResult, SideOutput
from phnn.tensor import Tensor


def prob(p):
    return Tensor(np.asarray(p, dtype=float).reshape(1, 1, 1, -1), requires_grad=True)


def test_estimate_beta_counting():
    lab = np.zeros((10, 10))
    lab.flat[:20] = 1
    assert estimate_beta([lab]) == 0.8
    assert estimate_beta([np.zeros((4, 4))]) == 1.0


def test_estimate_beta_is_mean_of_ratios():
    a = np.zeros(10)
    a[:4] = 1  # negative fraction 0.6
    b = np.zeros(30)  # negative fraction 1.0
    assert estimate_beta([a, b]) == pytest.approx(0.8, abs=1e-15)
    pooled = (6 + 30) / 40
    assert pooled != pytest.approx(0.8)


def test_estimate_beta_empty_stream():
    with pytest.raises(DataError):
        estimate_beta([])


@given(st.lists(st.integers(0, 40), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_estimate_beta_permutation_invariant(counts, rnd):
    labels = []
    for c in counts:
        lab = np.zeros(40)
        lab[:c] = 1
        labels.append(lab)
    shuffled = labels[:]
    rnd.shuffle(shuffled)
    assert estimate_beta(labels) == pytest.approx(estimate_beta(shuffled), abs=1e-15)


def test_bce_single_pixel():
    loss = balanced_bce(prob([0.5]), np.ones((1, 1, 1, 1)), 0.8)
    assert loss.item() == pytest.approx(0.8 * math.log(2), abs=1e-15)
    assert loss.item() == pytest.approx(0.554518, abs=1e-6)


def test_bce_saturated_and_zero_weight():
    assert balanced_bce(prob([1 - 1e-15, 1e-15]), np.array([1.0, 0.0]).reshape(1, 1, 1, 2), 0.5).item() < 1e-12
    p = prob(np.random.default_rng(0).uniform(0.01, 0.99, 7))
    assert balanced_bce(p, np.zeros((1, 1, 1, 7)), 1.0).item() == 0.0


def test_bce_rejects_non_binary_labels():
    with pytest.raises(DataError):
        balanced_bce(prob([0.5]), np.full((1, 1, 1, 1), 0.5), 0.5)


def test_bce_batch_mean_of_pixel_sums():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, size=(3, 1, 2, 2))
    y = (rng.uniform(size=p.shape) > 0.5).astype(float)
    got = balanced_bce(Tensor(p), y, 0.7).item()
    per_image = [-(0.7 * np.sum(y[i] * np.log(p[i])) + 0.3 * np.sum((1 - y[i]) * np.log(1 - p[i]))) for i in range(3)]
    assert got == pytest.approx(np.mean(per_image), rel=1e-14)


def test_bce_half_beta_is_half_plain_bce():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.01, 0.99, size=(1, 1, 4, 4))
    y = (rng.uniform(size=p.shape) > 0.3).astype(float)
    plain = -np.sum(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert balanced_bce(Tensor(p), y, 0.5).item() == pytest.approx(0.5 * plain, rel=1e-15)


@given(st.floats(0.001, 0.998), st.floats(0.0005, 0.001), st.integers(0, 1), st.floats(0, 1))
def test_bce_monotone_towards_label(p, step, y, beta):
    lab = np.full((1, 1, 1, 1), float(y))
    closer = p + step if y == 1 else p - step
    closer = min(max(closer, 1e-6), 1 - 1e-6)
    a = balanced_bce(prob([p]), lab, beta).item()
    b = balanced_bce(prob([closer]), lab, beta).item()
    assert b <= a + 1e-15
    assert a >= 0.0


def test_bce_gradient_matches_formula():
    p = prob([0.2, 0.9])
    y = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    balanced_bce(p, y, 0.6).backward()
    np.testing.assert_allclose(p.grad.ravel(), [-0.6 / 0.2, 0.4 / 0.1], rtol=1e-14)


def _result(n, fused=False):
    p = Tensor(np.full((1, 1, 2, 2), 0.3), requires_grad=True)
    sides = [SideOutput(m, p, p, p) for m in range(1, n + 1)]
    return ForwardResult(sides, SideOutput(0, p, p, p) if fused else None), p


def test_total_loss_additivity():
    y = np.array([[1, 0], [0, 1]], dtype=float).reshape(1, 1, 2, 2)
    res, p = _result(4)
    single = balanced_bce(p, y, 0.7).item()
    assert total_loss(res, y, LossSpec(0.7)).item() == pytest.approx(4 * single, rel=1e-15)
    res, _ = _result(3, fused=True)
    assert total_loss(res, y, LossSpec(0.7, include_fused=True)).item() == pytest.approx(4 * single, rel=1e-15)
    assert total_loss(res, y, LossSpec(0.7)).item() == pytest.approx(3 * single, rel=1e-15)


def test_total_loss_missing_fused():
    res, _ = _result(3)
    with pytest.raises(ModeError):
        total_loss(res, np.zeros((1, 1, 2, 2)), LossSpec(0.5, include_fused=True))


def test_total_loss_gradcheck_composed():
    from phnn.checks import default_model_config, model_case

    f, params = model_case(default_model_config("phnn_cumulative"), size=8)
    rep = T.gradcheck(f, params, eps=1e-5, tol=1e-4, max_elements=6)
    assert rep.passed, rep.errors
