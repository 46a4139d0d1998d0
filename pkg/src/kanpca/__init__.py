"""KAN-PCA: nonlinear factor extraction with spline Kolmogorov-Arnold encoders."""
from .estimators import KANPCA, ClassicalPCA
from .exceptions import (
    ConvergenceError,
    DataError,
    DivergenceError,
    KanPcaError,
    LeakageError,
    NumericalError,
    RankDeficientFitWarning,
    StaleCacheError,
)
from .linalg import PcaModel, pca_fit, r_squared
from .train import KanPcaModel, TrainConfig, fit_kan_pca

__version__ = "0.1.0"

__all__ = [
    "KANPCA",
    "ClassicalPCA",
    "ConvergenceError",
    "DataError",
    "DivergenceError",
    "KanPcaError",
    "LeakageError",
    "NumericalError",
    "RankDeficientFitWarning",
    "StaleCacheError",
    "PcaModel",
    "pca_fit",
    "r_squared",
    "KanPcaModel",
    "TrainConfig",
    "fit_kan_pca",
]
