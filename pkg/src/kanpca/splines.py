"""Clamped B-spline bases on bounded uniform grids.

All evaluation routines are vectorised over ``x`` and return arrays whose
trailing axis indexes the basis functions. Inputs outside the grid domain
``[t_0, t_m]`` are clamped to the nearest endpoint before evaluation.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import RankDeficientFitWarning

__all__ = [
    "KnotVector",
    "uniform_grid",
    "basis_eval_all",
    "basis_derivative_all",
    "spline_eval",
    "spline_derivative",
    "greville_abscissae",
    "linear_coefficients",
    "refine_grid",
]

_RIDGE = 1e-8
_COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Grid of strictly increasing breakpoints plus a spline degree.

    The padded (open) knot vector repeats each end knot ``degree`` extra
    times, which gives ``len(interior) - 1 + degree`` basis functions.
    """

    degree: int
    interior: np.ndarray
    padded: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 1:
            raise ValueError(f"degree must be an integer >= 1, got {self.degree!r}")
        t = np.array(self.interior, dtype=np.float64).ravel()
        if t.size < 2:
            raise ValueError("a knot vector needs at least two interior knots")
        if not np.all(np.isfinite(t)):
            raise ValueError("knots must be finite")
        if np.any(np.diff(t) <= 0):
            raise ValueError("interior knots must be strictly increasing")
        k = int(self.degree)
        padded = np.concatenate([np.full(k, t[0]), t, np.full(k, t[-1])])
        t.flags.writeable = False
        padded.flags.writeable = False
        object.__setattr__(self, "degree", k)
        object.__setattr__(self, "interior", t)
        object.__setattr__(self, "padded", padded)

    @property
    def num_intervals(self) -> int:
        return self.interior.size - 1

    @property
    def n_basis(self) -> int:
        return self.num_intervals + self.degree

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.interior[0]), float(self.interior[-1])

    def clamp(self, x):
        lo, hi = self.domain
        return np.clip(x, lo, hi)

    def same_as(self, other: "KnotVector") -> bool:
        return self.degree == other.degree and np.array_equal(self.interior, other.interior)

    def __repr__(self):
        lo, hi = self.domain
        return (
            f"KnotVector(degree={self.degree}, num_intervals={self.num_intervals}, "
            f"domain=({lo:.6g}, {hi:.6g}))"
        )


def uniform_grid(lo: float, hi: float, num_intervals: int, degree: int = 3) -> KnotVector:
    """Equally spaced grid of ``num_intervals`` cells on ``[lo, hi]``."""
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError("grid bounds must be finite")
    if lo >= hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    if int(num_intervals) != num_intervals or num_intervals < 1:
        raise ValueError(f"num_intervals must be an integer >= 1, got {num_intervals!r}")
    return KnotVector(degree, np.linspace(lo, hi, int(num_intervals) + 1))


def _prepare(kv: KnotVector, x):
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise ValueError("NaN passed to B-spline evaluation")
    return kv.clamp(x)


def _find_span(kv: KnotVector, x: np.ndarray) -> np.ndarray:
    """Padded-knot index ``i`` with ``t_i <= x < t_{i+1}`` (last cell is closed)."""
    k = kv.degree
    span = np.searchsorted(kv.interior, x, side="right") - 1 + k
    return np.clip(span, k, kv.n_basis - 1)


def _local_bases(kv: KnotVector, x: np.ndarray, span: np.ndarray) -> list[np.ndarray]:
    """Cox-de Boor recursion restricted to the nonzero functions on each span.

    Entry ``r`` of the degree-``d`` array is ``B_{span-d+r, d}(x)``. Returns
    the arrays for degrees ``0..k``. ``x`` is flat and already clamped.
    """
    t = kv.padded
    k = kv.degree
    n = x.shape[0]
    left = np.empty((k + 1, n))
    right = np.empty((k + 1, n))
    vals = np.ones((1, n))
    out = [vals]
    for j in range(1, k + 1):
        left[j] = x - t[span + 1 - j]
        right[j] = t[span + j] - x
        nxt = np.empty((j + 1, n))
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[r] / (right[r + 1] + left[j - r])
            nxt[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        nxt[j] = saved
        vals = nxt
        out.append(vals)
    return out


def _scatter(kv: KnotVector, local: np.ndarray, span: np.ndarray, degree: int, width: int) -> np.ndarray:
    """Place local values ``B_{span-degree+r}`` into a dense ``(n, width)`` array."""
    n = span.shape[0]
    dense = np.zeros(n * width)
    flat = (np.arange(n) * width + span - degree)[:, None] + np.arange(local.shape[0])[None, :]
    dense[flat] = local.T
    return dense.reshape(n, width)


def _local_derivative(kv: KnotVector, lower: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Derivatives of ``B_{span-k+r, k}`` from the degree ``k-1`` local values.

    Uses ``B'_{i,k} = k B_{i,k-1} / (t_{i+k} - t_i) - k B_{i+1,k-1} / (t_{i+k+1} - t_{i+1})``.
    """
    t = kv.padded
    k = kv.degree
    n = span.shape[0]
    # lower[r] = B_{span-k+1+r, k-1}; pad with the zero functions on either side
    ext = np.zeros((k + 2, n))
    ext[1:k + 1] = lower
    out = np.empty((k + 1, n))
    for r in range(k + 1):
        i = span - k + r
        den_l = t[i + k] - t[i]
        den_r = t[i + k + 1] - t[i + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(den_l > 0, ext[r] / den_l, 0.0)
            b = np.where(den_r > 0, ext[r + 1] / den_r, 0.0)
        out[r] = k * (a - b)
    return out


def basis_eval_all(kv: KnotVector, x) -> np.ndarray:
    """Values of every basis function at ``x``; shape ``x.shape + (n_basis,)``."""
    xc = _prepare(kv, x)
    flat = xc.ravel()
    span = _find_span(kv, flat)
    local = _local_bases(kv, flat, span)[-1]
    return _scatter(kv, local, span, kv.degree, kv.n_basis).reshape(xc.shape + (kv.n_basis,))


def basis_derivative_all(kv: KnotVector, x) -> np.ndarray:
    """First derivatives of every basis function at (clamped) ``x``."""
    return basis_and_derivative(kv, x)[1]


def basis_and_derivative(kv: KnotVector, x) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and derivatives from one recursion pass."""
    xc = _prepare(kv, x)
    flat = xc.ravel()
    span = _find_span(kv, flat)
    levels = _local_bases(kv, flat, span)
    deriv = _local_derivative(kv, levels[-2], span)
    shape = xc.shape + (kv.n_basis,)
    values = _scatter(kv, levels[-1], span, kv.degree, kv.n_basis).reshape(shape)
    return values, _scatter(kv, deriv, span, kv.degree, kv.n_basis).reshape(shape)


def _check_coeffs(kv: KnotVector, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1:] != (kv.n_basis,):
        raise ValueError(
            f"expected {kv.n_basis} spline coefficients, got trailing shape {c.shape}"
        )
    return c


def spline_eval(kv: KnotVector, c, x):
    """Evaluate ``sum_l c_l B_l(x)``."""
    c = _check_coeffs(kv, c)
    return basis_eval_all(kv, x) @ c


def spline_derivative(kv: KnotVector, c, x):
    c = _check_coeffs(kv, c)
    return basis_derivative_all(kv, x) @ c


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Knot averages ``(t_{i+1} + ... + t_{i+k}) / k``, one per basis function."""
    t, k = kv.padded, kv.degree
    csum = np.concatenate([[0.0], np.cumsum(t)])
    i = np.arange(kv.n_basis)
    return (csum[i + k + 1] - csum[i + 1]) / k


def linear_coefficients(kv: KnotVector, slope: float = 1.0, intercept: float = 0.0) -> np.ndarray:
    """Coefficients of the spline equal to ``slope * x + intercept`` on the domain."""
    return slope * greville_abscissae(kv) + intercept


def _solve_normal(gram: np.ndarray, rhs: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Normal-equation solve with a ridge fallback for near-singular Gram matrices.

    The ridge pulls towards ``prior`` (the old spline sampled at the new
    Greville abscissae) rather than towards zero, so directions the samples
    do not constrain keep the old shape and linear functions stay exact.
    """
    evals = np.linalg.eigvalsh(gram)
    top = max(evals[-1], 0.0)
    if top == 0.0 or evals[0] <= top / _COND_LIMIT:
        warnings.warn(
            "rank-deficient spline refit; adding ridge term",
            RankDeficientFitWarning,
            stacklevel=3,
        )
        mu = _RIDGE * (np.trace(gram) / gram.shape[0] if top > 0 else 1.0)
        return np.linalg.solve(gram + mu * np.eye(gram.shape[0]), rhs + mu * prior)
    return np.linalg.solve(gram, rhs)


def refine_grid(kv_old: KnotVector, c_old, kv_new: KnotVector, samples) -> np.ndarray:
    """Least-squares transfer of a spline onto a new grid.

    Returns coefficients on ``kv_new`` minimising the squared mismatch with
    the old spline at ``samples``.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("refine_grid needs at least one sample")
    c_old = _check_coeffs(kv_old, c_old)
    target = spline_eval(kv_old, c_old, samples)
    a = basis_eval_all(kv_new, samples)
    prior = spline_eval(kv_old, c_old, greville_abscissae(kv_new))
    return _solve_normal(a.T @ a, a.T @ target, prior)


def refit_columns(kv_old: KnotVector, coeffs: np.ndarray, kv_new: KnotVector, samples: np.ndarray) -> np.ndarray:
    """Batched :func:`refine_grid` for a layer of edges.

    ``coeffs`` has shape ``(n_out, n_in, n_basis_old)`` and ``samples`` shape
    ``(n_samples, n_in)``; edge ``(j, i)`` is matched at ``samples[:, i]``.
    """
    n_out, n_in, _ = coeffs.shape
    new = np.empty((n_out, n_in, kv_new.n_basis))
    prior_basis = basis_eval_all(kv_old, greville_abscissae(kv_new))
    for i in range(n_in):
        s = samples[:, i]
        old = coeffs[:, i, :].T
        target = basis_eval_all(kv_old, s) @ old
        a = basis_eval_all(kv_new, s)
        new[:, i, :] = _solve_normal(a.T @ a, a.T @ target, prior_basis @ old).T
    return new
