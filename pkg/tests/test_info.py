import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pib import info
from pib.errors import DimensionMismatch, EmptyBatch, NonFiniteInput
from pib.info import KernelSpec


def brute_median(Z):
    d = [np.linalg.norm(Z[i] - Z[j]) for i, j in itertools.combinations(range(len(Z)), 2)]
    return float(np.median(d))


def random_gram(rng, n, d=None):
    d = d or int(rng.integers(1, 6))
    Z = rng.normal(size=(n, d)) * rng.uniform(0.2, 3.0)
    return info.gram(Z, KernelSpec.median(rng.uniform(0.3, 2.0)))


def fd_loss(Z, Xg, Yg, beta, alpha, kernel):
    A = info.gram(Z, kernel)
    return -(info.mutual_information(A, Yg, alpha) - beta * info.mutual_information(A, Xg, alpha))


def central_fd(f, Z, h=1e-5):
    g = np.zeros_like(Z)
    for idx in np.ndindex(Z.shape):
        Zp, Zm = Z.copy(), Z.copy()
        Zp[idx] += h
        Zm[idx] -= h
        g[idx] = (f(Zp) - f(Zm)) / (2 * h)
    return g


# -- median_bandwidth ---------------------------------------------------------


def test_median_bandwidth_hand_enumerated():
    assert info.median_bandwidth(np.array([[0.0], [1.0], [2.0]]), 1.0) == pytest.approx(1.0)


def test_median_bandwidth_identical_rows_fallback():
    assert info.median_bandwidth(np.ones((5, 3)), 1.0) == 1.0
    assert info.median_bandwidth(np.ones((5, 3)), 0.7) == 0.7


def test_median_bandwidth_matches_brute_force():
    Z = np.random.default_rng(3).normal(size=(50, 5))
    assert info.median_bandwidth(Z, 0.5) == pytest.approx(0.5 * brute_median(Z), rel=1e-12)


def test_median_bandwidth_rejects_single_sample():
    with pytest.raises(EmptyBatch):
        info.median_bandwidth(np.zeros((1, 3)))


# -- gram ---------------------------------------------------------------------


def test_gram_identical_samples_is_rank_one():
    A = info.gram(np.ones((3, 2)))
    np.testing.assert_allclose(A, np.full((3, 3), 1 / 3))
    np.testing.assert_allclose(np.linalg.eigvalsh(A), [0, 0, 1], atol=1e-12)


def test_label_gram_block_diagonal():
    A = info.gram(np.array([0, 0, 1, 1]), KernelSpec.label())
    expected = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]) / 4
    np.testing.assert_array_equal(A, expected)


def test_gram_two_points_single_kernel_evaluation():
    A = info.gram(np.array([[0.0], [1.0]]), KernelSpec.fixed(1.0))
    e = 0.5 * math.exp(-0.5)
    np.testing.assert_allclose(A, [[0.5, e], [e, 0.5]], rtol=1e-15)


def test_gram_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        info.gram(np.array([[0.0], [np.nan]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_gram_invariants(Z):
    A = info.gram(Z)
    assert np.max(np.abs(A - A.T)) <= 1e-12
    assert abs(np.trace(A) - 1) <= 1e-10
    assert np.linalg.eigvalsh(A).min() >= -1e-10


# -- entropy ------------------------------------------------------------------


@pytest.mark.parametrize("alpha", [1.01, 2.0, 3.0])
def test_entropy_uniform_spectrum(alpha):
    assert info.entropy(np.eye(4) / 4, alpha) == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("alpha", [1.01, 2.0, 3.0])
def test_entropy_rank_one(alpha):
    assert abs(info.entropy(np.full((6, 6), 1 / 6), alpha)) <= 1e-9


def test_entropy_two_point_closed_form():
    A = info.gram(np.array([[0.0], [1.0]]), KernelSpec.fixed(1.0))
    lam = np.array([1 + math.exp(-0.5), 1 - math.exp(-0.5)]) / 2
    np.testing.assert_allclose(lam, [0.80327, 0.19673], atol=1e-5)
    expected = -math.log2(np.sum(lam**2))
    # the rounded reference figure 0.5482 is 1.4e-4 above the closed form
    assert expected == pytest.approx(0.5482, abs=5e-4)
    assert info.entropy(A, 2.0) == pytest.approx(expected, abs=1e-12)
    assert info.entropy_eig(A, 2.0) == pytest.approx(expected, abs=1e-12)


def test_alpha_validation():
    with pytest.raises(ValueError):
        info.entropy(np.eye(2) / 2, 1.0)
    with pytest.raises(ValueError):
        info.entropy(np.eye(2) / 2, -0.5)


@pytest.mark.parametrize("alpha", [1.01, 2.0, 3.0])
def test_entropy_range(alpha):
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        s = info.entropy(random_gram(rng, n), alpha)
        assert -1e-9 <= s <= math.log2(n) + 1e-9


def test_alpha2_shortcut_matches_eigendecomposition():
    rng = np.random.default_rng(12)
    for _ in range(100):
        A = random_gram(rng, int(rng.integers(2, 50)))
        assert abs(info.entropy(A, 2.0) - info.entropy_eig(A, 2.0)) <= 1e-10


# -- joint entropy and MI -----------------------------------------------------


def test_joint_with_constant_is_marginal():
    rng = np.random.default_rng(0)
    A = random_gram(rng, 10)
    C = np.full((10, 10), 0.1)
    assert info.joint_entropy(A, C) == pytest.approx(info.entropy(A), abs=1e-12)


def test_joint_of_binary_label_gram_with_itself():
    A = info.gram(np.array([0, 1, 1, 2, 0, 2, 2]), KernelSpec.label())
    assert info.joint_entropy(A, A) == pytest.approx(info.entropy(A), abs=1e-12)


def test_joint_dominance_independent_batches():
    rng = np.random.default_rng(5)
    A = info.gram(rng.normal(size=(64, 3)))
    B = info.gram(rng.normal(size=(64, 3)))
    assert info.joint_entropy(A, B) >= max(info.entropy(A), info.entropy(B)) - 1e-9


def test_joint_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        info.joint_entropy(np.eye(3) / 3, np.eye(4) / 4)


def test_mi_with_constant_is_zero():
    rng = np.random.default_rng(1)
    A = random_gram(rng, 12)
    assert abs(info.mutual_information(A, np.full((12, 12), 1 / 12))) <= 1e-9


def test_mi_balanced_labels_is_log_classes():
    A = info.gram(np.repeat(np.arange(4), 2), KernelSpec.label())
    assert info.mutual_information(A, A) == pytest.approx(2.0, abs=1e-12)
    assert info.entropy(A) == pytest.approx(2.0, abs=1e-12)


def test_mi_correlated_exceeds_independent():
    rng = np.random.default_rng(2024)
    x = rng.normal(size=(100, 2))
    correlated = x + 0.1 * rng.normal(size=(100, 2))
    independent = rng.normal(size=(100, 2))
    A = info.gram(x)
    assert info.mutual_information(A, info.gram(correlated)) > info.mutual_information(A, info.gram(independent))


@pytest.mark.parametrize("alpha", [1.01, 2.0, 3.0])
def test_mi_symmetric_and_joint_dominance(alpha):
    rng = np.random.default_rng(int(alpha * 100))
    for _ in range(200):
        n = int(rng.integers(2, 30))
        A, B = random_gram(rng, n), random_gram(rng, n)
        assert abs(info.mutual_information(A, B, alpha) - info.mutual_information(B, A, alpha)) <= 1e-12
        assert info.joint_entropy(A, B, alpha) >= max(info.entropy(A, alpha), info.entropy(B, alpha)) - 1e-9


@pytest.mark.parametrize("alpha", [0.5, 1.01, 1.2])
def test_mi_nonnegative_for_default_and_smaller_orders(alpha):
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(2, 30))
        assert info.mutual_information(random_gram(rng, n), random_gram(rng, n), alpha) >= -1e-9


def test_mi_can_go_negative_for_alpha_two():
    # why the default order is 1.2 rather than 2
    rng = np.random.default_rng(0)
    worst = min(info.mutual_information(random_gram(rng, 20), random_gram(rng, 20), 2.0) for _ in range(300))
    assert worst < -1e-3


def test_entropy_and_grad_consistent():
    rng = np.random.default_rng(21)
    A = random_gram(rng, 15)
    for alpha in (1.01, 2.0, 3.0):
        v, g = info.entropy_and_grad(A, alpha)
        assert v == pytest.approx(info.entropy(A, alpha), abs=1e-12)
        np.testing.assert_allclose(g, info.entropy_grad(A, alpha), rtol=1e-10, atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 4))
    Z = X[:, :2] + rng.normal(size=(30, 2))
    perm = rng.permutation(30)
    for alpha in (1.01, 2.0, 3.0):
        A, B = info.gram(X), info.gram(Z)
        Ap, Bp = info.gram(X[perm]), info.gram(Z[perm])
        assert abs(info.entropy(A, alpha) - info.entropy(Ap, alpha)) <= 1e-12
        assert abs(info.mutual_information(A, B, alpha) - info.mutual_information(Ap, Bp, alpha)) <= 1e-12


# -- PIB loss and gradient ----------------------------------------------------


def test_pib_constant_features():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(10, 5))
    Xg, Yg = info.gram(X), info.gram(rng.integers(0, 3, 10), KernelSpec.label())
    loss, grad = info.pib_loss_and_grad(np.ones((10, 3)), Xg, Yg, beta=0.3)
    assert abs(loss) <= 1e-9
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_pib_beta_zero_is_negative_label_mi():
    rng = np.random.default_rng(6)
    Z = rng.normal(size=(20, 3))
    Xg, Yg = info.gram(rng.normal(size=(20, 7))), info.gram(rng.integers(0, 4, 20), KernelSpec.label())
    loss, _ = info.pib_loss_and_grad(Z, Xg, Yg, beta=0.0)
    assert loss == pytest.approx(-info.mutual_information(info.gram(Z), Yg), abs=1e-12)


@pytest.mark.parametrize("alpha", [1.01, 1.2, 2.0, 3.0])
def test_pib_gradient_matches_finite_differences(alpha):
    rng = np.random.default_rng(int(alpha * 7))
    for _ in range(5):
        n, d = int(rng.integers(4, 17)), int(rng.integers(1, 5))
        Z = rng.normal(size=(n, d))
        Xg = info.gram(rng.normal(size=(n, 6)))
        Yg = info.gram(rng.integers(0, 3, n), KernelSpec.label())
        kernel = KernelSpec.fixed(info.median_bandwidth(Z))
        _, grad = info.pib_loss_and_grad(Z, Xg, Yg, 0.2, alpha, kernel)
        num = central_fd(lambda W: fd_loss(W, Xg, Yg, 0.2, alpha, kernel), Z)
        err = np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-12)
        assert err <= 1e-4


def test_median_kernel_gradient_treats_sigma_as_constant():
    rng = np.random.default_rng(8)
    Z = rng.normal(size=(12, 3))
    Xg, Yg = info.gram(rng.normal(size=(12, 4))), info.gram(rng.integers(0, 2, 12), KernelSpec.label())
    _, g_med = info.pib_loss_and_grad(Z, Xg, Yg, 0.1)
    _, g_fix = info.pib_loss_and_grad(Z, Xg, Yg, 0.1, kernel=KernelSpec.fixed(info.median_bandwidth(Z)))
    np.testing.assert_allclose(g_med, g_fix, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("alpha", [1.2, 2.0])
def test_standardized_kernel_gradient_matches_finite_differences(alpha):
    rng = np.random.default_rng(31)
    for _ in range(4):
        n, d = int(rng.integers(5, 15)), int(rng.integers(2, 5))
        Z = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, size=d) + rng.normal(size=d)
        Xg = info.gram(rng.normal(size=(n, 6)))
        Yg = info.gram(rng.integers(0, 3, n), KernelSpec.label())
        sigma = info.median_bandwidth(info.batch_standardize(Z))
        kernel = KernelSpec("gaussian", sigma=sigma, standardize=True)
        _, grad = info.pib_loss_and_grad(Z, Xg, Yg, 0.15, alpha, kernel)
        num = central_fd(lambda W: fd_loss(W, Xg, Yg, 0.15, alpha, kernel), Z)
        err = np.max(np.abs(grad - num)) / max(np.max(np.abs(num)), 1e-12)
        assert err <= 1e-4


def test_standardized_kernel_is_scale_invariant():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(15, 4))
    k = KernelSpec(standardize=True)
    np.testing.assert_allclose(info.gram(Z, k), info.gram(Z * [1, 10, 0.1, 3] + 5, k), atol=1e-10)


def test_standardized_kernel_constant_features_loss_zero():
    rng = np.random.default_rng(3)
    Xg = info.gram(rng.normal(size=(10, 3)))
    Yg = info.gram(rng.integers(0, 3, 10), KernelSpec.label())
    loss, grad = info.pib_loss_and_grad(np.full((10, 2), 0.7), Xg, Yg, 0.2, kernel=KernelSpec(standardize=True))
    assert abs(loss) <= 1e-9
    assert np.all(np.isfinite(grad))
