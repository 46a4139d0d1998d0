"""Covariance, cyclic Jacobi eigensolver and classical PCA."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError

__all__ = [
    "CovMatrix",
    "EigenResult",
    "PcaModel",
    "covariance",
    "eigh",
    "jacobi_eigh",
    "pca_fit",
    "pca_transform",
    "pca_reconstruct",
    "r_squared",
]

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
_MEAN_WARN = 1e-8


@dataclass(frozen=True, eq=False)
class CovMatrix:
    values: np.ndarray
    n_samples: int

    @property
    def n_features(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class EigenResult:
    """Eigenpairs sorted by descending eigenvalue; eigenvectors are columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0


@dataclass(frozen=True, eq=False)
class PcaModel:
    loadings: np.ndarray
    k: int
    explained_ratios: np.ndarray
    total_variance: float
    eigenvalues: np.ndarray

    @property
    def n_features(self) -> int:
        return self.loadings.shape[0]

    @property
    def tail_loss(self) -> float:
        """Sum of the discarded eigenvalues, the in-sample reconstruction loss."""
        return float(np.sum(self.eigenvalues[self.k:]))


def _as_matrix(X, name="X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def covariance(X) -> CovMatrix:
    """Uncentred second-moment matrix ``X^T X / T`` of a zero-mean panel."""
    X = _as_matrix(X)
    T = X.shape[0]
    if T < 2:
        raise ValueError(f"covariance needs at least 2 rows, got {T}")
    worst = np.max(np.abs(X.mean(axis=0)))
    if worst > _MEAN_WARN:
        warnings.warn(
            f"columns are not centred (max |mean| = {worst:.3g}); covariance uses X^T X / T as given",
            RuntimeWarning,
            stacklevel=2,
        )
    S = X.T @ X / T
    return CovMatrix(0.5 * (S + S.T), T)


def jacobi_eigh(A, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS) -> EigenResult:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Sweeps over all ``(p, q)`` pairs until every off-diagonal entry is
    below ``tol * ||A||_F``. Eigenvectors are sign-fixed so that the entry
    of largest magnitude is positive.
    """
    a = np.array(A, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    thresh = tol * np.linalg.norm(a)
    sweeps = 0
    off = np.abs(a[np.triu_indices(n, 1)])
    while off.size and off.max() >= thresh and thresh > 0:
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi did not converge in {max_sweeps} sweeps (max off-diagonal {off.max():.3e})"
            )
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < thresh:
                    continue
                app, aqq = a[p, p], a[q, q]
                theta = (aqq - app) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                new_p = c * col_p - s * col_q
                new_q = s * col_p + c * col_q
                a[:, p] = new_p
                a[p, :] = new_p
                a[:, q] = new_q
                a[q, :] = new_q
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        off = np.abs(a[np.triu_indices(n, 1)])

    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    v = v[:, order]
    lead = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[lead, np.arange(n)] < 0, -1.0, 1.0)
    return EigenResult(evals, v * signs, sweeps)


def eigh(cov, tol: float = JACOBI_TOL) -> EigenResult:
    """Eigendecomposition of a :class:`CovMatrix` or plain symmetric array."""
    values = cov.values if isinstance(cov, CovMatrix) else cov
    return jacobi_eigh(values, tol=tol)


def pca_fit(X, k: int, tol: float = JACOBI_TOL) -> PcaModel:
    """Top-``k`` principal directions of ``X`` (columns assumed centred)."""
    X = _as_matrix(X)
    n = X.shape[1]
    if int(k) != k or not 1 <= k <= n:
        raise ValueError(f"k must be an integer in [1, {n}], got {k!r}")
    k = int(k)
    eig = eigh(covariance(X), tol=tol)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    total = float(lam.sum())
    ratios = lam[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(eig.eigenvectors[:, :k].copy(), k, ratios, total, lam)


def pca_transform(model: PcaModel, X) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"model has {model.n_features} features, X has {X.shape[1]}")
    return X @ model.loadings


def pca_reconstruct(model: PcaModel, Z) -> np.ndarray:
    Z = _as_matrix(Z, "Z")
    if Z.shape[1] != model.k:
        raise ValueError(f"model has {model.k} factors, Z has {Z.shape[1]} columns")
    return Z @ model.loadings.T


def r_squared(X, X_hat) -> float:
    """Explained variance ``1 - ||X - X_hat||_F^2 / ||X||_F^2``."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    energy = float(np.sum(X * X))
    if energy == 0.0:
        raise ValueError("R^2 undefined for an all-zero panel")
    resid = X - X_hat
    return 1.0 - float(np.sum(resid * resid)) / energy
