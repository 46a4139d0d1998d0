import warnings

import numpy as np
import pytest

from kanpca.datasets import make_factor_panel
from kanpca.exceptions import ConvergenceError
from kanpca.linalg import (
    covariance,
    eigh,
    jacobi_eigh,
    pca_fit,
    pca_reconstruct,
    pca_transform,
    r_squared,
)
from oracles import tail_eigen_sum


def random_psd(rng, n):
    a = rng.normal(size=(n, n + 3))
    return a @ a.T / (n + 3)


def centred(rng, t, n):
    X = rng.normal(size=(t, n)) @ rng.normal(size=(n, n))
    return X - X.mean(axis=0)


class TestCovariance:
    def test_repeated_sample(self):
        x = np.array([1.0, -2.0, 0.5])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cov = covariance(np.tile(x, (4, 1)))
        assert np.linalg.matrix_rank(cov.values) == 1
        assert np.trace(cov.values) == pytest.approx(x @ x)

    def test_unit_variance_diagonal(self, rng):
        X = rng.normal(size=(500, 4))
        X = (X - X.mean(0)) / X.std(0)
        np.testing.assert_allclose(np.diag(covariance(X).values), 1.0, atol=1e-12)

    def test_hand_computed(self):
        X = np.array([[1.0, 2.0], [-1.0, 0.0], [0.0, -2.0]])
        # (1/3) X^T X computed by hand
        expected = np.array([[2.0, 2.0], [2.0, 8.0]]) / 3
        np.testing.assert_allclose(covariance(X).values, expected, atol=1e-15)
        assert covariance(X).n_samples == 3

    def test_uncentred_warns(self):
        with pytest.warns(RuntimeWarning):
            covariance(np.array([[1.0, 1.0], [2.0, 3.0]]))

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            covariance(np.zeros((1, 3)))


class TestJacobi:
    def test_identity(self):
        res = jacobi_eigh(np.eye(4))
        np.testing.assert_array_equal(res.eigenvalues, np.ones(4))
        np.testing.assert_array_equal(np.abs(res.eigenvectors), np.eye(4))

    def test_two_by_two(self):
        res = jacobi_eigh(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(res.eigenvalues, [3.0, 1.0], atol=1e-14)
        s = 1 / np.sqrt(2)
        np.testing.assert_allclose(np.abs(res.eigenvectors), [[s, s], [s, s]], atol=1e-14)
        assert res.eigenvectors[0, 0] * res.eigenvectors[1, 0] > 0
        assert res.eigenvectors[0, 1] * res.eigenvectors[1, 1] < 0

    @pytest.mark.parametrize("a,b,c", [(4.0, 0.0, 1.0), (1.0, 3.0, -2.0), (5.0, -1.5, 5.0)])
    def test_two_by_two_closed_form(self, a, b, c):
        A = np.array([[a, b], [b, c]])
        mid, rad = (a + c) / 2, np.hypot((a - c) / 2, b)
        res = jacobi_eigh(A)
        np.testing.assert_allclose(res.eigenvalues, [mid + rad, mid - rad], atol=1e-14)

    def test_random_psd(self, rng):
        for n in (2, 5, 8, 13, 20):
            S = random_psd(rng, n)
            res = jacobi_eigh(S)
            U, lam = res.eigenvectors, res.eigenvalues
            assert np.linalg.norm(U @ np.diag(lam) @ U.T - S) / np.linalg.norm(S) < 1e-10
            assert np.linalg.norm(U.T @ U - np.eye(n)) < 1e-10
            assert np.all(np.diff(lam) <= 0)
            np.testing.assert_allclose(lam, np.sort(np.linalg.eigvalsh(S))[::-1], atol=1e-10)

    def test_sign_convention(self, rng):
        U = jacobi_eigh(random_psd(rng, 6)).eigenvectors
        idx = np.argmax(np.abs(U), axis=0)
        assert np.all(U[idx, np.arange(6)] > 0)

    def test_sweep_limit(self, rng):
        with pytest.raises(ConvergenceError):
            jacobi_eigh(random_psd(rng, 10), max_sweeps=1)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_zero_matrix(self):
        res = jacobi_eigh(np.zeros((3, 3)))
        np.testing.assert_array_equal(res.eigenvalues, 0.0)


class TestPca:
    def test_exact_plane(self, rng):
        basis = np.linalg.qr(rng.normal(size=(5, 2)))[0]
        X = rng.normal(size=(200, 2)) @ basis.T
        X -= X.mean(axis=0)
        model = pca_fit(X, 2)
        assert np.max(np.abs(pca_reconstruct(model, pca_transform(model, X)) - X)) < 1e-10

    def test_full_rank_ratios(self, rng):
        model = pca_fit(centred(rng, 100, 6), 6)
        assert abs(model.explained_ratios.sum() - 1) < 1e-12

    def test_explained_matches_eigh(self):
        X = make_factor_panel(1000, 20, noise=0.7, seed=4)
        X = X - X.mean(axis=0)
        model = pca_fit(X, 3)
        _, lam = tail_eigen_sum(X, 3)
        np.testing.assert_allclose(model.explained_ratios, lam[:3] / lam.sum(), atol=1e-10)
        assert model.tail_loss == pytest.approx(lam[3:].sum(), rel=1e-10)

    def test_projection_fixed_point(self, rng):
        model = pca_fit(centred(rng, 300, 5), 2)
        x = model.loadings @ np.array([[1.5], [-0.5]])
        np.testing.assert_allclose(pca_reconstruct(model, pca_transform(model, x.T)), x.T, atol=1e-10)

    def test_orthogonal_complement(self, rng):
        X = centred(rng, 300, 5)
        full, model = pca_fit(X, 5), pca_fit(X, 2)
        # the weakest direction is orthogonal to the retained ones
        x = full.loadings[:, 4][None, :]
        np.testing.assert_allclose(pca_reconstruct(model, pca_transform(model, x)), 0.0, atol=1e-10)

    def test_bad_k(self, rng):
        X = centred(rng, 20, 3)
        for k in (0, 4, 1.5):
            with pytest.raises(ValueError):
                pca_fit(X, k)

    def test_dimension_checks(self, rng):
        model = pca_fit(centred(rng, 50, 4), 2)
        with pytest.raises(ValueError):
            pca_transform(model, np.zeros((3, 5)))
        with pytest.raises(ValueError):
            pca_reconstruct(model, np.zeros((3, 3)))

    def test_eigh_accepts_cov_matrix(self, rng):
        cov = covariance(centred(rng, 80, 4))
        np.testing.assert_array_equal(eigh(cov).eigenvalues, jacobi_eigh(cov.values).eigenvalues)


class TestRSquared:
    def test_perfect(self, rng):
        X = rng.normal(size=(10, 3))
        assert r_squared(X, X) == 1.0

    def test_zero(self, rng):
        X = rng.normal(size=(10, 3))
        assert r_squared(X, np.zeros_like(X)) == 0.0

    def test_pca_identity(self):
        X = make_factor_panel(800, 12, noise=0.8, seed=5)
        X = (X - X.mean(0)) / X.std(0)
        model = pca_fit(X, 3)
        r2 = r_squared(X, pca_reconstruct(model, pca_transform(model, X)))
        _, lam = tail_eigen_sum(X, 3)
        assert r2 == pytest.approx(lam[:3].sum() / lam.sum(), abs=1e-8)

    def test_zero_energy(self):
        with pytest.raises(ValueError):
            r_squared(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            r_squared(np.ones((3, 2)), np.ones((2, 3)))
