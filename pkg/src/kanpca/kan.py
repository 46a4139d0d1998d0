"""KAN layers: per-edge SiLU + B-spline activations with analytic gradients.

Edge ``(j, i)`` computes ``w_b[j, i] * silu(x_i) + w_s[j, i] * spline_ji(x_i)``
and output node ``j`` sums its incoming edges. In affine mode every edge is
the plain map ``x_i -> slope[j, i] * x_i`` and the layer is a matrix product.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .exceptions import StaleCacheError
from .splines import (
    KnotVector,
    basis_and_derivative,
    basis_eval_all,
    linear_coefficients,
    refit_columns,
    uniform_grid,
)

SPLINE = "spline"
AFFINE = "affine"
MODES = (SPLINE, AFFINE)

GRID_QUANTILES = (0.01, 0.99)
GRID_MARGIN = 0.1

_ids = itertools.count()


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # exp of -|x| never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_prime(x):
    x = np.asarray(x, dtype=np.float64)
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass(eq=False)
class KanLayer:
    """One KAN layer of ``n_out x n_in`` edges sharing a knot vector.

    Parameter arrays are indexed ``[j, i]`` (target node, source input);
    ``coeffs`` carries a trailing basis axis. Training code mutates the
    arrays in place and must call :meth:`touch` afterwards so that old
    forward caches are rejected.
    """

    knots: KnotVector
    w_b: np.ndarray
    w_s: np.ndarray
    coeffs: np.ndarray
    slope: np.ndarray
    mode: str = SPLINE
    _version: int = field(default=0, repr=False)
    _uid: int = field(default_factory=lambda: next(_ids), repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        shape = np.shape(self.slope)
        if len(shape) != 2:
            raise ValueError("slope must be a 2-D (n_out, n_in) array")
        for name in ("w_b", "w_s"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if np.shape(self.coeffs) != shape + (self.knots.n_basis,):
            raise ValueError(
                f"coeffs must have shape {shape + (self.knots.n_basis,)}, got {np.shape(self.coeffs)}"
            )

    @classmethod
    def init(cls, n_in, n_out, knots=None, *, rng=None, mode=SPLINE, noise_scale=0.1):
        """Freshly initialised layer.

        Spline coefficients are uniform in ``[-noise_scale/2, noise_scale/2]``,
        ``w_s = 1``, and ``w_b`` is drawn uniformly with scale ``1/sqrt(n_in)``
        (a constant ``w_b`` leaves every output node identical at start).
        Affine slopes use the same ``1/sqrt(n_in)`` scale.
        """
        rng = np.random.default_rng(rng)
        if knots is None:
            knots = uniform_grid(-1.0, 1.0, 3, 3)
        bound = 1.0 / np.sqrt(n_in)
        coeffs = noise_scale * (rng.random((n_out, n_in, knots.n_basis)) - 0.5)
        w_b = rng.uniform(-bound, bound, (n_out, n_in))
        slope = rng.uniform(-bound, bound, (n_out, n_in))
        return cls(knots, w_b, np.ones((n_out, n_in)), coeffs, slope, mode)

    @property
    def n_in(self) -> int:
        return self.slope.shape[1]

    @property
    def n_out(self) -> int:
        return self.slope.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.slope.shape

    def touch(self):
        self._version += 1

    def copy(self, **changes) -> "KanLayer":
        fields = dict(
            knots=self.knots,
            w_b=self.w_b.copy(),
            w_s=self.w_s.copy(),
            coeffs=self.coeffs.copy(),
            slope=self.slope.copy(),
            mode=self.mode,
        )
        fields.update(changes)
        return KanLayer(**fields)

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays for the current mode."""
        if self.mode == AFFINE:
            return {"slope": self.slope}
        return {"w_b": self.w_b, "w_s": self.w_s, "coeffs": self.coeffs}

    def edge(self, j: int, i: int, x):
        """Evaluate the single edge function ``phi_ji`` at ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if self.mode == AFFINE:
            return self.slope[j, i] * x
        # a per-point reduction keeps each value independent of how many points are passed
        spline = np.sum(basis_eval_all(self.knots, x) * self.coeffs[j, i], axis=-1)
        return self.w_b[j, i] * silu(x) + self.w_s[j, i] * spline

    def __call__(self, x):
        return layer_forward(self, x, need_backward=False)[0]


@dataclass
class LayerCache:
    layer_uid: int
    layer_version: int
    x: np.ndarray
    squeeze: bool
    silu_x: np.ndarray | None = None
    basis: np.ndarray | None = None
    dbasis: np.ndarray | None = None
    inside: np.ndarray | None = None
    spline_val: np.ndarray | None = None


@dataclass
class LayerGradients:
    d_w_b: np.ndarray
    d_w_s: np.ndarray
    d_coeffs: np.ndarray
    d_slope: np.ndarray
    d_input: np.ndarray

    def for_parameters(self, layer: KanLayer) -> dict[str, np.ndarray]:
        if layer.mode == AFFINE:
            return {"slope": self.d_slope}
        return {"w_b": self.d_w_b, "w_s": self.d_w_s, "coeffs": self.d_coeffs}


def _as_batch(layer: KanLayer, x):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ValueError(f"layer expects inputs with {layer.n_in} features, got shape {x.shape}")
    if np.isnan(x).any():
        raise ValueError("NaN input to KAN layer")
    return x, squeeze


def layer_forward(layer: KanLayer, x, *, need_backward: bool = True):
    """Forward pass; ``x`` is ``(n_in,)`` or ``(batch, n_in)``.

    Returns ``(y, cache)`` where the cache feeds :func:`layer_backward`;
    ``need_backward=False`` skips the basis derivatives for inference.
    """
    x, squeeze = _as_batch(layer, x)
    cache = LayerCache(layer._uid, layer._version, x, squeeze)
    if layer.mode == AFFINE:
        y = x @ layer.slope.T
    else:
        if need_backward:
            basis, dbasis = basis_and_derivative(layer.knots, x)
        else:
            basis, dbasis = basis_eval_all(layer.knots, x), None
        lo, hi = layer.knots.domain
        cache.silu_x = silu(x)
        cache.basis = basis
        cache.dbasis = dbasis
        cache.inside = (x >= lo) & (x <= hi)
        # (i, b, l) @ (i, l, j) -> (i, b, j): spline value of edge (j, i) per sample
        cache.spline_val = np.matmul(basis.transpose(1, 0, 2), layer.coeffs.transpose(1, 2, 0))
        y = cache.silu_x @ layer.w_b.T + np.einsum("ibj,ji->bj", cache.spline_val, layer.w_s)
    return (y[0] if squeeze else y), cache


def layer_backward(layer: KanLayer, cache: LayerCache, dy) -> LayerGradients:
    """Gradients of ``sum_b sum_j dy[b, j] * y[b, j]`` for a cached forward pass.

    Parameter gradients are summed over the batch; ``d_input`` keeps the
    batch axis. Outside the knot domain the spline is clamped, so its
    derivative with respect to the input is zero there.
    """
    if cache.layer_uid != layer._uid or cache.layer_version != layer._version:
        raise StaleCacheError("cache was produced by a different layer or an older parameter state")
    if layer.mode != AFFINE and cache.dbasis is None:
        raise StaleCacheError("cache came from an inference-only forward pass")
    dy = np.asarray(dy, dtype=np.float64)
    if cache.squeeze and dy.ndim == 1:
        dy = dy[None, :]
    if dy.shape != (cache.x.shape[0], layer.n_out):
        raise ValueError(f"dy must have shape {(cache.x.shape[0], layer.n_out)}, got {dy.shape}")
    zeros = np.zeros(layer.shape)
    x = cache.x
    if layer.mode == AFFINE:
        d_input = dy @ layer.slope
        grads = LayerGradients(
            zeros, zeros.copy(), np.zeros_like(layer.coeffs), dy.T @ x, d_input
        )
    else:
        d_w_b = dy.T @ cache.silu_x
        d_w_s = np.einsum("bj,ibj->ji", dy, cache.spline_val)
        # (i, j, b) @ (i, b, l) -> (i, j, l)
        d_coeffs = layer.w_s[:, :, None] * np.matmul(dy.T[None, :, :], cache.basis.transpose(1, 0, 2)).transpose(1, 0, 2)
        slope = np.matmul(cache.dbasis.transpose(1, 0, 2), layer.coeffs.transpose(1, 2, 0))
        # weight each edge slope by w_s and dy, then sum over targets j
        weighted = np.einsum("ibj,bj->bi", slope * layer.w_s.T[:, None, :], dy)
        d_input = (dy @ layer.w_b) * silu_prime(x) + weighted * cache.inside
        grads = LayerGradients(d_w_b, d_w_s, d_coeffs, zeros, d_input)
    if cache.squeeze:
        grads.d_input = grads.d_input[0]
    return grads


def affine_fit(layer: KanLayer, num_points: int = 201) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares line through every edge function over the knot domain.

    Returns ``(slopes, intercepts)``, each ``(n_out, n_in)``.
    """
    lo, hi = layer.knots.domain
    xs = np.linspace(lo, hi, num_points)
    if layer.mode == AFFINE:
        return layer.slope.copy(), np.zeros(layer.shape)
    basis = basis_eval_all(layer.knots, xs)
    vals = (
        layer.w_b[:, :, None] * silu(xs)[None, None, :]
        + layer.w_s[:, :, None] * np.einsum("pl,jil->jip", basis, layer.coeffs)
    )
    design = np.column_stack([xs, np.ones_like(xs)])
    sol, *_ = np.linalg.lstsq(design, vals.reshape(-1, num_points).T, rcond=None)
    return sol[0].reshape(layer.shape), sol[1].reshape(layer.shape)


def constrain_affine(layer: KanLayer, *, fresh: bool = False, rng=None) -> KanLayer:
    """Affine-mode copy of ``layer`` (every edge becomes ``x -> w x``).

    Slopes come from a least-squares line fit of each current edge function;
    the intercept is dropped. ``fresh=True`` draws new slopes instead.
    """
    if fresh:
        bound = 1.0 / np.sqrt(layer.n_in)
        slope = np.random.default_rng(rng).uniform(-bound, bound, layer.shape)
    else:
        slope, _ = affine_fit(layer)
    return layer.copy(slope=slope, mode=AFFINE)


def grid_range(activations, quantiles=GRID_QUANTILES, margin=GRID_MARGIN) -> tuple[float, float]:
    """Robust domain for a layer grid from pooled activation values."""
    a = np.asarray(activations, dtype=np.float64)
    q_lo, q_hi = np.quantile(a, quantiles)
    width = q_hi - q_lo
    if not np.isfinite(width) or width <= 0:
        return -1.0, 1.0
    return float(q_lo - margin * width), float(q_hi + margin * width)


def update_grid_range(
    layer: KanLayer,
    activations,
    num_intervals: int | None = None,
    *,
    quantiles=GRID_QUANTILES,
    margin=GRID_MARGIN,
) -> KanLayer:
    """Re-place the layer grid on the range of ``activations`` and refit splines.

    ``activations`` are this layer's inputs on the training split,
    ``(n_samples, n_in)``. One grid is shared by all edges, so quantiles are
    taken over the pooled values. ``num_intervals`` also changes the grid
    resolution (grid extension). Each edge spline is refitted by least
    squares at its own input column.
    """
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim == 1:
        acts = acts[:, None]
    if acts.size == 0:
        raise ValueError("update_grid_range needs at least one activation row")
    if acts.shape[1] != layer.n_in:
        raise ValueError(f"activations must have {layer.n_in} columns, got {acts.shape[1]}")
    lo, hi = grid_range(acts, quantiles, margin)
    count = layer.knots.num_intervals if num_intervals is None else num_intervals
    knots = uniform_grid(lo, hi, count, layer.knots.degree)
    if layer.mode == AFFINE:
        coeffs = np.zeros(layer.shape + (knots.n_basis,))
        return layer.copy(knots=knots, coeffs=coeffs)
    coeffs = refit_columns(layer.knots, layer.coeffs, knots, acts)
    return layer.copy(knots=knots, coeffs=coeffs)


def linear_spline_layer(slopes: np.ndarray, knots: KnotVector) -> KanLayer:
    """Spline-mode layer whose edges equal ``slopes[j, i] * x`` on the domain."""
    slopes = np.asarray(slopes, dtype=np.float64)
    coeffs = slopes[:, :, None] * linear_coefficients(knots)[None, None, :]
    return KanLayer(
        knots, np.zeros_like(slopes), np.ones_like(slopes), coeffs, slopes.copy(), SPLINE
    )
