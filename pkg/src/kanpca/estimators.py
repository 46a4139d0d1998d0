"""scikit-learn style wrappers around the PCA and KAN-PCA fitting routines.

Both estimators work on arrays that are already standardised; compose them
with a scaler in a :class:`sklearn.pipeline.Pipeline` when they are not.
Rows are treated as time-ordered observations.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ExperimentConfig
from .linalg import pca_fit, pca_reconstruct, pca_transform, r_squared
from .pipeline import TrainOnlyView
from .train import fit_kan_pca, model_forward


def _as_tuple(value) -> tuple:
    if np.ndim(value) == 0:
        return (value,)
    return tuple(value)


class ClassicalPCA(TransformerMixin, BaseEstimator):
    """PCA through the Jacobi eigensolver, with the biased (1/T) covariance.

    Parameters
    ----------
    n_factors : int
        Number of retained components.
    tol : float
        Relative off-diagonal tolerance of the eigensolver.
    """

    def __init__(self, n_factors=3, tol=1e-12):
        self.n_factors = n_factors
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not 1 <= self.n_factors <= X.shape[1]:
            raise ValueError(f"n_factors must be in [1, {X.shape[1]}], got {self.n_factors}")
        self.model_ = pca_fit(X, self.n_factors, tol=self.tol)
        self.loadings_ = self.model_.loadings
        self.eigenvalues_ = self.model_.eigenvalues
        self.explained_variance_ratio_ = self.model_.explained_ratios
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return pca_transform(self.model_, check_array(X, dtype=np.float64))

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return pca_reconstruct(self.model_, check_array(Z, dtype=np.float64))

    def score(self, X, y=None):
        """Reconstruction R^2 on ``X``."""
        X = check_array(X, dtype=np.float64)
        return r_squared(X, self.inverse_transform(self.transform(X)))


class KANPCA(TransformerMixin, BaseEstimator):
    """Spline-KAN encoder with a linear decoder, trained in grid-refinement stages.

    ``grid`` lists one grid size per stage; ``spline_penalty``,
    ``entropy_penalty``, ``max_epochs`` and ``patience`` take either a scalar
    for every stage or one value per stage. Without ``X_val`` the last
    ``validation_fraction`` of rows is held out for early stopping.
    """

    def __init__(
        self,
        n_factors=3,
        hidden=(10,),
        degree=3,
        grid=(3, 5, 10),
        spline_penalty=(1e-3, 3e-4, 1e-4),
        entropy_penalty=0.1,
        max_epochs=500,
        patience=20,
        learning_rate=1e-3,
        affine=False,
        init="random",
        validation_fraction=0.125,
        random_state=0,
    ):
        self.n_factors = n_factors
        self.hidden = hidden
        self.degree = degree
        self.grid = grid
        self.spline_penalty = spline_penalty
        self.entropy_penalty = entropy_penalty
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.affine = affine
        self.init = init
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self):
        cfg = ExperimentConfig(
            hidden=_as_tuple(self.hidden),
            n_factors=int(self.n_factors),
            degree=int(self.degree),
            affine=bool(self.affine),
            init=self.init,
            grid=_as_tuple(self.grid),
            spline_penalty=_as_tuple(self.spline_penalty),
            entropy_penalty=_as_tuple(self.entropy_penalty),
            max_epochs=_as_tuple(self.max_epochs),
            patience=_as_tuple(self.patience),
            learning_rate=float(self.learning_rate),
            seed=int(self.random_state or 0),
        )
        return cfg.train_config()

    def fit(self, X, y=None, X_val=None):
        X = check_array(X, dtype=np.float64)
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie strictly between 0 and 1")
            n_val = max(1, int(np.floor(self.validation_fraction * X.shape[0] + 1e-9)))
            if n_val >= X.shape[0]:
                raise ValueError("too few rows to hold out a validation block")
            X, X_val = X[:-n_val], X[-n_val:]
        else:
            X_val = check_array(X_val, dtype=np.float64)
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("X_val must have the same number of columns as X")
        self.model_, self.history_ = fit_kan_pca(self._train_config(), TrainOnlyView.from_array(X), X_val)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return model_forward(self.model_, check_array(X, dtype=np.float64))[0]

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return check_array(Z, dtype=np.float64) @ self.model_.decoder.T

    def reconstruct(self, X):
        check_is_fitted(self, "model_")
        return model_forward(self.model_, check_array(X, dtype=np.float64))[1]

    def score(self, X, y=None):
        """Reconstruction R^2 on ``X``."""
        X = check_array(X, dtype=np.float64)
        return r_squared(X, self.reconstruct(X))
