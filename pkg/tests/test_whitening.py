"""Tests for feature statistics and whitening.

Covariance oracles are naive double loops; the eigensolver is checked against
reconstruction, orthogonality, and numpy's independent eigh.
"""

import numpy as np
import pytest

from mvswhiten.errors import ContractError, NumericalError
from mvswhiten.tensor import Tape, finite_diff_check
from mvswhiten.whitening import (
    Covariance,
    covariance,
    feature_mean,
    instance_standardize,
    symmetric_eig,
    whitening_loss,
    zca_whiten,
)


def naive_covariance(mat):
    """O(C^2 N) loop implementation, population divisor."""
    c, n = mat.shape
    mu = [sum(mat[i]) / n for i in range(c)]
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            acc = 0.0
            for k in range(n):
                acc += (mat[i, k] - mu[i]) * (mat[j, k] - mu[j])
            out[i, j] = acc / n
    return out


def unit_rows(rng, c, n):
    """(c, n) matrix with exactly identity population covariance."""
    x = rng.normal(size=(n, c))
    x -= x.mean(axis=0, keepdims=True)
    q, _ = np.linalg.qr(x)
    return np.sqrt(n) * q.T


class TestMeanAndCovariance:
    def test_constant_map_mean(self):
        f = np.full((3, 10), 4.25)
        np.testing.assert_array_equal(feature_mean(f), [4.25] * 3)

    def test_single_channel_mean(self):
        assert feature_mean(np.array([[1.0, 2.0, 3.0, 4.0]]))[0] == 2.5

    def test_mean_matches_naive_average(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(5, 37))
        oracle = np.array([sum(f[i]) / 37 for i in range(5)])
        np.testing.assert_allclose(feature_mean(f), oracle, atol=1e-12)

    def test_accepts_chw_stacks(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(4, 6, 7))
        np.testing.assert_allclose(feature_mean(f), f.reshape(4, -1).mean(axis=1))

    def test_constant_map_covariance_is_zero(self):
        f = np.full((3, 8), 2.0)
        np.testing.assert_array_equal(covariance(f).matrix, np.zeros((3, 3)))

    def test_correlated_channels_off_diagonal(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        f = np.stack([x, 3.0 * x])
        sigma = covariance(f).matrix
        np.testing.assert_allclose(sigma[0, 1], np.sqrt(sigma[0, 0] * sigma[1, 1]),
                                   rtol=1e-12)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(8, 100))
        np.testing.assert_allclose(covariance(f).matrix, naive_covariance(f), atol=1e-10)

    def test_invariant_to_channel_shift(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(6, 50))
        shifted = f + rng.normal(size=(6, 1))
        np.testing.assert_allclose(covariance(f).matrix, covariance(shifted).matrix,
                                   atol=1e-10)

    def test_covariance_type_rejects_asymmetry(self):
        with pytest.raises(ContractError):
            Covariance(dim=2, matrix=np.array([[1.0, 0.5], [0.1, 1.0]]))


class TestSymmetricEig:
    def test_diagonal_input(self):
        q, lam = symmetric_eig(np.diag([2.0, 5.0, 1.0]))
        np.testing.assert_array_equal(lam, [5.0, 2.0, 1.0])
        np.testing.assert_allclose(np.abs(q), np.eye(3)[:, [1, 0, 2]], atol=1e-12)

    def test_two_by_two_hand_values(self):
        _, lam = symmetric_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(lam, [3.0, 1.0], atol=1e-12)

    def test_random_spd_orthogonality_and_reconstruction(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(16, 16))
        s = a @ a.T / 16
        q, lam = symmetric_eig(s)
        np.testing.assert_allclose(q.T @ q, np.eye(16), atol=1e-10)
        recon = q @ np.diag(lam) @ q.T
        assert np.linalg.norm(recon - s) <= 1e-9 * np.linalg.norm(s)

    def test_matches_numpy_eigh(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            dim = int(rng.integers(2, 11))
            a = rng.normal(size=(dim, dim))
            s = (a + a.T) / 2
            _, lam = symmetric_eig(s)
            assert np.all(np.diff(lam) <= 1e-12)
            oracle = np.sort(np.linalg.eigvalsh(s))[::-1]
            np.testing.assert_allclose(lam, oracle, atol=1e-9 * max(1, abs(oracle).max()))

    def test_psd_eigenvalues_non_negative(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(8, 20))
        s = a @ a.T / 20
        _, lam = symmetric_eig(s)
        assert lam.min() >= -1e-8 * np.linalg.norm(s)

    def test_rejects_asymmetric(self):
        with pytest.raises(ContractError):
            symmetric_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_accepts_covariance_instances(self):
        rng = np.random.default_rng(6)
        cov = covariance(rng.normal(size=(4, 30)))
        q, lam = symmetric_eig(cov)
        np.testing.assert_allclose(q @ np.diag(lam) @ q.T, cov.matrix, atol=1e-10)


class TestZcaWhiten:
    def test_already_white_input_only_gets_centered(self):
        rng = np.random.default_rng(7)
        f = unit_rows(rng, 5, 60) + 3.0
        out = zca_whiten(f, eps_eig=0.0)
        centered = f - f.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out, centered, atol=1e-9)

    def test_rank_deficient_with_damping_is_finite(self):
        row = np.linspace(0.0, 1.0, 40)
        f = np.stack([row, row, 2.0 * row])
        out = zca_whiten(f, eps_eig=1e-5)
        assert np.isfinite(out).all()

    def test_rank_deficient_without_damping_raises(self):
        row = np.linspace(0.0, 1.0, 40)
        with pytest.raises(NumericalError):
            zca_whiten(np.stack([row, row]), eps_eig=0.0)

    def test_output_second_moment_is_identity(self):
        rng = np.random.default_rng(8)
        f = rng.normal(size=(8, 200)) @ rng.normal(size=(200, 200))
        out = zca_whiten(f, eps_eig=0.0)
        gram = out @ out.T / out.shape[1]
        assert np.linalg.norm(gram - np.eye(8)) <= 1e-6 * np.linalg.norm(np.eye(8))

    def test_idempotent_up_to_centering(self):
        rng = np.random.default_rng(9)
        f = rng.normal(size=(6, 120))
        once = zca_whiten(f, eps_eig=0.0)
        twice = zca_whiten(once, eps_eig=0.0)
        assert np.linalg.norm(twice - once) <= 1e-6 * np.linalg.norm(once)

    def test_negative_eps_rejected(self):
        with pytest.raises(ContractError):
            zca_whiten(np.random.default_rng(0).normal(size=(3, 10)), eps_eig=-1.0)


class TestInstanceStandardize:
    def test_two_sample_channel(self):
        out, degenerate = instance_standardize(np.array([[0.0, 2.0]]))
        np.testing.assert_array_equal(out, [[-1.0, 1.0]])
        assert not degenerate[0]

    def test_constant_channel_flagged(self):
        out, degenerate = instance_standardize(np.array([[5.0, 5.0, 5.0],
                                                         [0.0, 1.0, 2.0]]))
        np.testing.assert_array_equal(out[0], np.zeros(3))
        assert degenerate.tolist() == [True, False]

    def test_unit_diagonal(self):
        rng = np.random.default_rng(10)
        f = rng.normal(size=(7, 90)) * 4.0 + 2.0
        out, _ = instance_standardize(f)
        sigma = covariance(out).matrix
        np.testing.assert_allclose(np.diag(sigma), np.ones(7), atol=1e-6)
        np.testing.assert_allclose(out.mean(axis=1), np.zeros(7), atol=1e-9)

    def test_invariant_to_positive_affine_rescale(self):
        rng = np.random.default_rng(11)
        f = rng.normal(size=(4, 40))
        scales = rng.uniform(0.5, 3.0, size=(4, 1))
        offsets = rng.normal(size=(4, 1))
        a, _ = instance_standardize(f)
        b, _ = instance_standardize(f * scales + offsets)
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestWhiteningLoss:
    def test_zero_at_identity_covariance(self):
        rng = np.random.default_rng(12)
        f = unit_rows(rng, 6, 80)
        assert whitening_loss(f).item() <= 1e-9

    def test_two_channel_closed_form(self):
        rng = np.random.default_rng(13)
        rho = 0.5
        base = unit_rows(rng, 2, 100)
        f = np.stack([base[0], rho * base[0] + np.sqrt(1 - rho * rho) * base[1]])
        assert whitening_loss(f).item() == pytest.approx(rho / 2, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(14)
        f = rng.normal(size=(4, 24)) * 1.5
        sigma = covariance(f).matrix
        # stay away from the |.| kinks so central differences are clean
        assert np.abs(sigma - np.eye(4)).min() > 1e-3
        report = finite_diff_check(whitening_loss, f)
        assert report.passed, report

    def test_differentiable_path_matches_numpy_path(self):
        rng = np.random.default_rng(15)
        f = rng.normal(size=(5, 30))
        tape = Tape()
        leaf = tape.leaf(f)
        tracked = whitening_loss(leaf)
        assert tracked.item() == pytest.approx(whitening_loss(f).item(), abs=1e-15)
        tape.backward(tracked)
        assert leaf.grad is not None and np.isfinite(leaf.grad).all()
