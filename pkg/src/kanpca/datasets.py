"""Synthetic return panels for tests, demos and the benchmark smoke run."""
from __future__ import annotations

import numpy as np

from .pipeline import ReturnPanel


def business_dates(n: int, start: str = "2015-01-02") -> tuple:
    days = np.busday_offset(np.datetime64(start), np.arange(n), roll="forward")
    return tuple(str(d) for d in days)


def make_factor_panel(
    n_rows: int = 2000,
    n_assets: int = 20,
    n_factors: int = 3,
    *,
    noise: float = 0.5,
    factor_scales=None,
    distortion: float = 0.0,
    shock_row: int | None = None,
    shock_size: float = 8.0,
    seed: int = 0,
    as_panel: bool = False,
):
    """Draw ``x_t = L g(f_t) + noise`` with Gaussian factors ``f_t``.

    ``distortion > 0`` applies a per-asset monotone cubic ``g(f) = f + d_i f^3``
    to each factor before mixing, with ``d_i`` spread over ``[0, distortion]``,
    so the assets do not share one linear factor subspace. ``shock_row`` adds
    a simultaneous negative shock to every factor on that row.
    """
    rng = np.random.default_rng(seed)
    scales = np.asarray(factor_scales if factor_scales is not None else np.linspace(2.0, 1.0, n_factors))
    f = rng.standard_normal((n_rows, n_factors)) * scales
    if shock_row is not None:
        f[shock_row] = -shock_size * scales
    loadings = rng.standard_normal((n_assets, n_factors))
    if distortion:
        strength = np.linspace(0.0, distortion, n_assets)
        rng.shuffle(strength)
        cubic = f[:, None, :] + strength[None, :, None] * f[:, None, :] ** 3 / scales**2
        x = np.einsum("tif,if->ti", cubic, loadings)
    else:
        x = f @ loadings.T
    x = x + noise * rng.standard_normal((n_rows, n_assets))
    x = x * 0.01
    if not as_panel:
        return x
    tickers = tuple(f"A{i:02d}" for i in range(n_assets))
    return ReturnPanel(business_dates(n_rows), tickers, x)
