import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcor_subspaces import dependence as dep
from dcor_subspaces.errors import (
    ConfigError,
    DegenerateDependenceError,
    InvalidBatchError,
    ShapeError,
    SingularCovarianceError,
)

from oracles import central_differences, naive_dcor


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


# centered_distance_matrix

def test_centered_two_points_by_hand():
    a = dep.centered_distance_matrix([[0.0], [2.0]])
    np.testing.assert_allclose(a.entries, [[-1.0, 1.0], [1.0, -1.0]])
    assert a.source_dim == 1


def test_centered_identical_rows_is_zero():
    a = dep.centered_distance_matrix(np.ones((5, 3)))
    assert np.all(a.entries == 0.0)


def test_centered_rows_and_columns_sum_to_zero_and_recentering_is_noop():
    rng = np.random.default_rng(1)
    a = dep.centered_distance_matrix(rng.standard_normal((40, 3))).entries
    scale = np.abs(a).max()
    np.testing.assert_allclose(a, a.T)
    assert np.abs(a.sum(axis=0)).max() < 1e-9 * 40 * scale
    assert np.abs(a.sum(axis=1)).max() < 1e-9 * 40 * scale
    again = dep.double_center(torch.as_tensor(a)).numpy()
    np.testing.assert_allclose(again, a, atol=1e-12 * scale)


def test_centered_rejects_single_sample_and_nan():
    with pytest.raises(InvalidBatchError):
        dep.centered_distance_matrix([[1.0, 2.0]])
    with pytest.raises(InvalidBatchError):
        dep.centered_distance_matrix([[1.0], [np.nan]])


# distance_covariance

def test_dcov_two_points_with_itself():
    v = dep.distance_covariance([0.0, 2.0], [0.0, 2.0])
    assert v.value == pytest.approx(1.0)
    assert not v.degenerate


def test_dcov_constant_batch_is_degenerate_zero():
    v = dep.distance_covariance(np.zeros((10, 2)), np.random.default_rng(0).standard_normal((10, 3)))
    assert v.value == 0.0 and v.degenerate


def test_dcov_mismatched_n():
    with pytest.raises(ShapeError):
        dep.distance_covariance(np.zeros((4, 1)), np.zeros((5, 1)))


# distance_correlation

def test_dcor_self_is_one_and_affine_invariant():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((50, 3))
    assert dep.distance_correlation(w, w).value == pytest.approx(1.0, abs=1e-12)
    assert dep.distance_correlation(w, 3 * w + 7.0).value == pytest.approx(1.0, abs=1e-12)


def test_dcor_constant_batch_degenerate():
    v = dep.distance_correlation(np.full((20, 2), 3.0), np.arange(20.0))
    assert v.value == 0.0 and v.degenerate


def test_dcor_independent_normals_monte_carlo():
    # oracle: 100 independent draws; the 99th percentile must sit below 0.2
    rng = np.random.default_rng(3)
    values = [dep.distance_correlation(rng.standard_normal((1000, 2)), rng.standard_normal((1000, 2))).value
              for _ in range(100)]
    assert np.percentile(values, 99) < 0.2


def test_dcor_matches_naive_double_loop():
    rng = np.random.default_rng(4)
    for _ in range(5):
        n, d1, d2 = rng.integers(2, 60), rng.integers(1, 8), rng.integers(1, 8)
        x, y = rng.standard_normal((n, d1)), rng.standard_normal((n, d2))
        y[:, 0] += x[:, 0] ** 2
        expected = naive_dcor(x, y)
        assert dep.distance_correlation(x, y).value == pytest.approx(expected, rel=1e-10, abs=1e-14)


def test_dcor_keeps_float32_graph():
    x = torch.randn(32, 4, requires_grad=True)
    y = torch.randn(32, 2)
    value = dep.dcor(x, y)
    assert value.dtype == torch.float64
    value.backward()
    assert x.grad is not None and x.grad.dtype == torch.float32


finite_rows = arrays(np.float64, st.tuples(st.integers(3, 25), st.integers(1, 4)),
                     elements=st.floats(-50, 50, allow_nan=False, width=32))


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.integers(0, 2**31 - 1))
def test_dcor_bounded_and_symmetric(x, seed):
    y = np.random.default_rng(seed).standard_normal((x.shape[0], 3))
    ab = dep.distance_correlation(x, y)
    ba = dep.distance_correlation(y, x)
    assert 0.0 <= ab.value <= 1.0
    assert ab.value == pytest.approx(ba.value, abs=1e-12)
    if ab.degenerate:
        assert ab.value == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dcor_invariances(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 80))
    x, y = rng.standard_normal((n, 3)), rng.standard_normal((n, 2))
    y[:, 0] += np.sin(x[:, 1])
    base = dep.distance_correlation(x, y).value
    moved = x @ random_orthogonal(rng, 3) * rng.uniform(0.1, 10) + rng.normal(size=3) * 5
    assert dep.distance_correlation(moved, y).value == pytest.approx(base, abs=1e-8)
    assert dep.distance_correlation(x, y * 0.3 - 4).value == pytest.approx(base, abs=1e-8)


# disentanglement_loss

def test_loss_k2_equals_pair():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((64, 4)), rng.standard_normal((64, 12))
    b[:, 0] += a[:, 0]
    assert dep.disentanglement_loss([a, b]).item() == dep.distance_correlation(a, b).value


def test_loss_identical_subspaces_is_one():
    w = np.random.default_rng(6).standard_normal((30, 2))
    assert dep.disentanglement_loss([w, w, w]).item() == pytest.approx(1.0, abs=1e-12)


def test_loss_is_mean_of_pairs():
    rng = np.random.default_rng(7)
    ws = [rng.standard_normal((50, d)) for d in (4, 12, 16, 2)]
    ws[1][:, 0] += ws[0][:, 0]
    ws[3][:, 1] += np.cos(ws[2][:, 0])
    pairs = [dep.distance_correlation(ws[i], ws[j]).value for i in range(4) for j in range(i)]
    assert dep.disentanglement_loss(ws).item() == pytest.approx(np.mean(pairs), rel=1e-14)


def test_loss_degenerate_pair_contributes_zero():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((20, 2)), np.zeros((20, 3))
    c = a + 0.01 * rng.standard_normal((20, 2))
    expected = dep.distance_correlation(a, c).value / 3
    assert dep.disentanglement_loss([a, b, c]).item() == pytest.approx(expected)


def test_loss_needs_two_subspaces():
    with pytest.raises(ConfigError):
        dep.disentanglement_loss([np.zeros((5, 2))])


# Gaussian mutual information

def correlated_pair(rng, rho, n):
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1 - rho ** 2) * rng.standard_normal(n)
    return x[:, None], y[:, None]


def test_gmi_closed_form():
    x, y = correlated_pair(np.random.default_rng(9), 0.8, 10_000)
    assert dep.gaussian_mi(x, y) == pytest.approx(-0.5 * math.log(1 - 0.64), abs=0.05)


def test_gmi_independent_small():
    rng = np.random.default_rng(10)
    values = [dep.gaussian_mi(rng.standard_normal((10_000, 2)), rng.standard_normal((10_000, 2)))
              for _ in range(20)]
    assert max(values) < 0.01


def test_gmi_copy_is_singular():
    w = np.random.default_rng(11).standard_normal((100, 2))
    with pytest.raises(SingularCovarianceError):
        dep.gaussian_mi(w, w)


def test_gmi_needs_enough_samples():
    with pytest.raises(InvalidBatchError):
        dep.gaussian_mi(np.zeros((4, 2)), np.zeros((4, 2)))


def test_cgmi_equals_gmi_in_one_dimension():
    x, y = correlated_pair(np.random.default_rng(12), 0.5, 500)
    assert dep.collapsed_gaussian_mi(x, y) == pytest.approx(dep.gaussian_mi(x, y), rel=1e-12)


def test_cgmi_independent_near_zero():
    rng = np.random.default_rng(13)
    assert dep.collapsed_gaussian_mi(rng.standard_normal((10_000, 3)), rng.standard_normal((10_000, 2))) < 0.01


def test_cgmi_collinear_sums_raise():
    rng = np.random.default_rng(14)
    w1 = rng.standard_normal((100, 2))
    w2 = np.c_[2 * w1.sum(axis=1)]
    with pytest.raises(DegenerateDependenceError):
        dep.collapsed_gaussian_mi(w1, w2)
    with pytest.raises(DegenerateDependenceError):
        dep.collapsed_gaussian_mi(np.ones((100, 2)), w2)


def test_gmi_blind_to_zero_covariance_dependence():
    rng = np.random.default_rng(15)
    w1 = rng.standard_normal((2000, 1))
    w2 = w1 ** 2
    assert dep.gaussian_mi(w1, w2) < 0.01
    assert dep.distance_correlation(w1, w2).value > 0.3


# dependence_gradient

@pytest.mark.parametrize("measure", ["dcor", "gmi", "cgmi"])
def test_gradient_matches_central_differences(measure):
    rng = np.random.default_rng(16)
    w1, w2 = rng.standard_normal((64, 4)), rng.standard_normal((64, 4))
    w2[:, :2] += 0.7 * np.tanh(w1[:, :2])
    fn = dep.get_measure(measure)
    grad = dep.dependence_gradient(measure, w1, w2)
    fd1 = central_differences(lambda v: float(fn(v, w2)), w1)
    fd2 = central_differences(lambda v: float(fn(w1, v)), w2)
    for analytic, numeric in ((grad.grad_w1, fd1), (grad.grad_w2, fd2)):
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4


def test_gradient_zero_at_independent_symmetric_design():
    # full factorial design: the empirical joint is exactly the product of marginals
    grid = np.array([(a, b) for a in (-1.0, 1.0) for b in (-1.0, 1.0)])
    grad = dep.dependence_gradient("dcor", grid[:, :1], grid[:, 1:])
    assert grad.value == 0.0
    assert np.linalg.norm(np.r_[grad.grad_w1.ravel(), grad.grad_w2.ravel()]) < 1e-6


def test_gradient_at_self_correlation_is_flat():
    rng = np.random.default_rng(17)
    w = rng.standard_normal((40, 3))
    grad = dep.dependence_gradient("dcor", w, w)
    assert grad.value == pytest.approx(1.0)
    for _ in range(10):
        direction = rng.standard_normal(w.shape)
        assert np.sum(grad.grad_w1 * direction) <= 1e-9


def test_gradient_coincident_points_are_finite():
    w1 = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 2.0], [3.0, 1.0]])
    w2 = np.array([[1.0], [2.0], [0.5], [4.0]])
    grad = dep.dependence_gradient("dcor", w1, w2)
    assert np.isfinite(grad.grad_w1).all() and np.isfinite(grad.grad_w2).all()


def test_gradient_degenerate_returns_zero():
    grad = dep.dependence_gradient("dcor", np.ones((6, 2)), np.arange(6.0))
    assert grad.degenerate
    assert not grad.grad_w1.any() and not grad.grad_w2.any()


def test_unknown_measure():
    with pytest.raises(ConfigError):
        dep.get_measure("mmd")
