"""KAN-PCA: KAN encoder + linear decoder, trained by full-batch Adam.

Training runs in stages. Each stage re-places the layer grids on the
training activations (optionally at a finer resolution), then optimises
reconstruction loss plus a spline penalty with early stopping on the
validation loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DivergenceError, NumericalError
from .kan import (
    AFFINE,
    GRID_MARGIN,
    GRID_QUANTILES,
    SPLINE,
    KanLayer,
    affine_fit,
    layer_backward,
    layer_forward,
    linear_spline_layer,
    update_grid_range,
)
from .linalg import PcaModel
from .pipeline import TrainOnlyView, require_train_view
from .splines import uniform_grid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
IMPROVEMENT_TOL = 1e-10


@dataclass
class StageConfig:
    grid_intervals: int
    spline_penalty: float = 0.0
    entropy_penalty: float = 0.0
    max_epochs: int = 500
    patience: int = 20

    def __post_init__(self):
        if self.grid_intervals < 1:
            raise ValueError("grid_intervals must be >= 1")
        if self.spline_penalty < 0 or self.entropy_penalty < 0:
            raise ValueError("penalties must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")


@dataclass
class TrainConfig:
    """Architecture and optimisation settings for :func:`fit_kan_pca`.

    ``grid_quantiles=None`` picks ``(0.01, 0.99)`` for random initialisation
    and the full activation range for PCA initialisation, where the grid
    must cover every training activation for the linear start to be exact.
    """

    stages: list = field(default_factory=lambda: default_stages())
    learning_rate: float = 1e-3
    batch_mode: str = "full"
    seed: int = 0
    affine: bool = False
    init: str = "random"
    hidden: tuple = (10,)
    n_factors: int = 3
    degree: int = 3
    grid_quantiles: tuple | None = None
    grid_margin: float = GRID_MARGIN

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.stages:
            raise ValueError("at least one training stage is required")
        if self.batch_mode != "full":
            raise ValueError("only full-batch training is supported")
        if self.init not in ("random", "pca"):
            raise ValueError("init must be 'random' or 'pca'")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def quantiles(self) -> tuple:
        if self.grid_quantiles is not None:
            return tuple(self.grid_quantiles)
        return (0.0, 1.0) if self.init == "pca" else GRID_QUANTILES


def default_stages() -> list:
    """Grid schedule 3 -> 5 -> 10 with the spline penalty decaying 1e-3 -> 1e-4."""
    return [
        StageConfig(3, 1e-3, 0.1),
        StageConfig(5, 3e-4, 0.1),
        StageConfig(10, 1e-4, 0.1),
    ]


@dataclass(eq=False)
class KanPcaModel:
    encoder: list
    decoder: np.ndarray
    init: str = "random"
    seed: int = 0

    def __post_init__(self):
        if not self.encoder:
            raise ValueError("encoder needs at least one layer")
        for a, b in zip(self.encoder, self.encoder[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")
        if self.decoder.shape != (self.n_features, self.n_factors):
            raise ValueError(
                f"decoder must be {(self.n_features, self.n_factors)}, got {self.decoder.shape}"
            )

    @property
    def n_features(self) -> int:
        return self.encoder[0].n_in

    @property
    def n_factors(self) -> int:
        return self.encoder[-1].n_out

    @property
    def architecture(self) -> list:
        return [self.encoder[0].n_in] + [layer.n_out for layer in self.encoder] + [self.n_features]

    @property
    def mode(self) -> str:
        modes = {layer.mode for layer in self.encoder}
        return modes.pop() if len(modes) == 1 else "mixed"

    @property
    def affine(self) -> bool:
        return self.mode == AFFINE

    def named_parameters(self) -> list:
        out = []
        for idx, layer in enumerate(self.encoder):
            out.extend((f"encoder.{idx}.{name}", arr) for name, arr in layer.parameters().items())
        out.append(("decoder", self.decoder))
        return out

    def parameters(self) -> list:
        return [arr for _, arr in self.named_parameters()]

    def touch(self):
        for layer in self.encoder:
            layer.touch()

    def copy(self) -> "KanPcaModel":
        return KanPcaModel([layer.copy() for layer in self.encoder], self.decoder.copy(), self.init, self.seed)

    def encode(self, X) -> np.ndarray:
        return model_forward(self, X)[0]

    def reconstruct(self, X) -> np.ndarray:
        return model_forward(self, X)[1]

    def encoder_matrix(self) -> np.ndarray:
        """Matrix of the composed encoder; exact only when every layer is affine."""
        m = np.eye(self.n_features)
        for layer in self.encoder:
            slopes = layer.slope if layer.mode == AFFINE else affine_fit(layer)[0]
            m = slopes @ m
        return m


def build_model(
    n_features: int,
    hidden=(10,),
    n_factors: int = 3,
    *,
    degree: int = 3,
    grid_intervals: int = 3,
    affine: bool = False,
    seed=0,
) -> KanPcaModel:
    """Randomly initialised model with widths ``[n_features, *hidden, n_factors]``."""
    rng = np.random.default_rng(seed)
    widths = [int(n_features), *(int(h) for h in hidden), int(n_factors)]
    knots = uniform_grid(-1.0, 1.0, grid_intervals, degree)
    mode = AFFINE if affine else SPLINE
    encoder = [KanLayer.init(a, b, knots, rng=rng, mode=mode) for a, b in zip(widths, widths[1:])]
    bound = 1.0 / math.sqrt(n_factors)
    decoder = rng.uniform(-bound, bound, (n_features, n_factors))
    return KanPcaModel(encoder, decoder, "random", seed if isinstance(seed, int) else 0)


def model_forward(m: KanPcaModel, X, *, need_backward: bool = False):
    """Return ``(Z, X_hat, caches)`` with ``X_hat = Z @ W.T``.

    Pass ``need_backward=True`` when the caches will be used for gradients.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.n_features:
        raise ValueError(f"model expects (batch, {m.n_features}) input, got {X.shape}")
    caches = []
    h = X
    for idx, layer in enumerate(m.encoder):
        h, cache = layer_forward(layer, h, need_backward=need_backward)
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite activations after encoder layer {idx}")
        caches.append(cache)
    return h, h @ m.decoder.T, caches


def reconstruction_loss(X, X_hat) -> float:
    """Mean over rows of the squared Euclidean reconstruction error."""
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X.shape != X_hat.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {X_hat.shape}")
    r = X - X_hat
    return float(np.sum(r * r) / X.shape[0])


def _edge_magnitudes(layer: KanLayer) -> np.ndarray:
    return np.mean(np.abs(layer.coeffs), axis=2)


def regularization_penalty(m: KanPcaModel, spline_penalty: float, entropy_penalty: float) -> float:
    """Per layer: ``spline_penalty * L1 + entropy_penalty * H``.

    ``L1`` sums the mean absolute spline coefficient ``a_e`` of every edge and
    ``H`` is the entropy of the edge shares ``a_e / L1``. Affine layers
    contribute nothing.
    """
    total = 0.0
    for layer in m.encoder:
        if layer.mode == AFFINE:
            continue
        a = _edge_magnitudes(layer)
        l1 = float(a.sum())
        ent = 0.0
        if l1 > 0:
            p = a[a > 0] / l1
            ent = float(-np.sum(p * np.log(p)))
        total += spline_penalty * l1 + entropy_penalty * ent
    return total


def penalty_gradients(m: KanPcaModel, spline_penalty: float, entropy_penalty: float) -> dict:
    """Gradient of :func:`regularization_penalty` w.r.t. each layer's coefficients."""
    grads = {}
    for idx, layer in enumerate(m.encoder):
        if layer.mode == AFFINE:
            continue
        a = _edge_magnitudes(layer)
        l1 = a.sum()
        d_a = np.full(a.shape, spline_penalty)
        if l1 > 0 and entropy_penalty:
            with np.errstate(divide="ignore", invalid="ignore"):
                p = a / l1
                logp = np.where(p > 0, np.log(p), 0.0)
            ent = -np.sum(p * logp)
            # dH/da_e = -(log p_e + H) / L1
            d_a = d_a + entropy_penalty * np.where(p > 0, -(logp + ent) / l1, 0.0)
        nb = layer.coeffs.shape[2]
        grads[idx] = d_a[:, :, None] * np.sign(layer.coeffs) / nb
    return grads


def loss_and_gradients(m: KanPcaModel, X, spline_penalty: float = 0.0, entropy_penalty: float = 0.0):
    """Reconstruction loss, penalty, and the gradient list aligned with ``m.parameters()``."""
    X = np.asarray(X, dtype=np.float64)
    Z, X_hat, caches = model_forward(m, X, need_backward=True)
    loss = reconstruction_loss(X, X_hat)
    d_xhat = -2.0 * (X - X_hat) / X.shape[0]
    d_decoder = d_xhat.T @ Z
    d_h = d_xhat @ m.decoder
    layer_grads = [None] * len(m.encoder)
    for idx in range(len(m.encoder) - 1, -1, -1):
        g = layer_backward(m.encoder[idx], caches[idx], d_h)
        layer_grads[idx] = g
        d_h = g.d_input
    penalty = 0.0
    if spline_penalty or entropy_penalty:
        penalty = regularization_penalty(m, spline_penalty, entropy_penalty)
        for idx, d_c in penalty_gradients(m, spline_penalty, entropy_penalty).items():
            layer_grads[idx].d_coeffs = layer_grads[idx].d_coeffs + d_c
    grads = []
    for layer, g in zip(m.encoder, layer_grads):
        grads.extend(g.for_parameters(layer).values())
    grads.append(d_decoder)
    return loss, penalty, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after ``patience`` misses."""

    def __init__(self, patience: int, min_delta: float = IMPROVEMENT_TOL):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = None

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss``; returns True when training should stop."""
        if loss < self.best - self.min_delta:
            self.best = loss
            self.best_epoch = epoch
            return False
        return epoch - self.best_epoch >= self.patience

    def improved_at(self, epoch: int) -> bool:
        return self.best_epoch == epoch


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    stage: int
    grid_size: int
    train_loss: float
    val_loss: float
    penalty: float


@dataclass
class StageSummary:
    stage: int
    grid_size: int
    best_epoch: int
    best_val_loss: float
    stop_reason: str
    loss_before_extension: float | None = None
    loss_after_extension: float | None = None


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    stages: list = field(default_factory=list)

    @property
    def stop_reason(self) -> str | None:
        return self.stages[-1].stop_reason if self.stages else None

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,stage,train_loss,val_loss,penalty\n")
            for r in self.epochs:
                fh.write(f"{r.epoch},{r.stage},{r.train_loss!r},{r.val_loss!r},{r.penalty!r}\n")


def train_stage(
    m: KanPcaModel,
    train_X,
    val_X,
    stage: StageConfig,
    lr: float = 1e-3,
    *,
    stage_index: int = 0,
    history: TrainHistory | None = None,
):
    """Optimise one stage; returns the best-validation model and the history.

    Epoch 0 is the starting state; epoch ``e`` is the state after ``e`` Adam
    steps. The validation loss never includes the penalty.
    """
    history = history if history is not None else TrainHistory()
    model = m.copy()
    train_X = np.asarray(train_X, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    params = model.parameters()
    state = AdamState.zeros_like(params)
    stopper = EarlyStopping(stage.patience)
    best = model.copy()
    grid = model.encoder[0].knots.num_intervals
    reason = "max_epochs"
    for epoch in range(stage.max_epochs + 1):
        try:
            loss, penalty, grads = loss_and_gradients(model, train_X, stage.spline_penalty, stage.entropy_penalty)
            val_loss = reconstruction_loss(val_X, model_forward(model, val_X)[1])
        except NumericalError as exc:
            raise DivergenceError(f"training diverged at stage {stage_index}, epoch {epoch}: {exc}",
                                  stage_index, epoch) from exc
        if not math.isfinite(loss + penalty):
            raise DivergenceError(f"non-finite training loss at stage {stage_index}, epoch {epoch}",
                                  stage_index, epoch)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at stage {stage_index}, epoch {epoch}",
                                  stage_index, epoch)
        history.epochs.append(EpochRecord(epoch, stage_index, grid, loss, val_loss, penalty))
        stop = stopper.update(epoch, val_loss)
        if stopper.improved_at(epoch):
            best = model.copy()
        if stop:
            reason = "early_stopping"
            break
        if epoch == stage.max_epochs:
            break
        adam_step(params, grads, state, lr)
        model.touch()
    history.stages.append(StageSummary(stage_index, grid, stopper.best_epoch, stopper.best, reason))
    return best, history


def update_model_grids(m: KanPcaModel, source: TrainOnlyView, num_intervals: int | None = None,
                       *, quantiles=GRID_QUANTILES, margin: float = GRID_MARGIN) -> KanPcaModel:
    """Re-place every layer grid on its training activations.

    ``source`` must be a :class:`TrainOnlyView`; layer ``l`` is refitted on
    the outputs of the already-refitted layers ``< l``.
    """
    view = require_train_view(source)
    h = view.read("grid_update")
    layers = []
    for layer in m.encoder:
        new = update_grid_range(layer, h, num_intervals, quantiles=quantiles, margin=margin)
        layers.append(new)
        h = layer_forward(new, h, need_backward=False)[0]
    return KanPcaModel(layers, m.decoder.copy(), m.init, m.seed)


def _pca_slopes(widths: list, pca: PcaModel) -> list:
    """Per-layer matrices whose product is ``U_k^T``.

    The first layer takes as many leading eigenvectors as it has rows and the
    PCA provides (zero rows beyond that); each later layer passes its first
    coordinates straight through.
    """
    first = np.zeros((widths[1], widths[0]))
    r = min(widths[1], pca.k)
    first[:r] = pca.loadings[:, :r].T
    mats = [first]
    for a, b in zip(widths[1:], widths[2:]):
        sel = np.zeros((b, a))
        r = min(a, b)
        sel[:r, :r] = np.eye(r)
        mats.append(sel)
    return mats


def pca_init(m: KanPcaModel, pca: PcaModel, train: TrainOnlyView | None = None,
             *, margin: float = GRID_MARGIN) -> KanPcaModel:
    """Start from the PCA solution: encoder product ``U_k^T``, decoder ``U_k``.

    Affine layers take the slope matrices directly. Spline layers become
    exactly linear on their grid, so ``train`` is required to place each grid
    over the full range of its training activations.
    """
    widths = [m.n_features] + [layer.n_out for layer in m.encoder]
    if pca.n_features != m.n_features:
        raise ValueError(f"PCA has {pca.n_features} features, model has {m.n_features}")
    if m.n_factors > pca.k:
        raise ValueError(f"model needs {m.n_factors} factors, PCA has {pca.k}")
    if min(widths[1:]) < m.n_factors:
        raise ValueError("every encoder width must be at least the number of factors")
    mats = _pca_slopes(widths, pca)
    layers = []
    h = None
    if any(layer.mode == SPLINE for layer in m.encoder):
        if train is None:
            raise ValueError("spline-mode pca_init needs the training view to place the grids")
        h = require_train_view(train).read("pca_init")
    for layer, mat in zip(m.encoder, mats):
        if layer.mode == AFFINE:
            new = layer.copy(slope=mat.copy())
        else:
            lo, hi = float(h.min()), float(h.max())
            width = hi - lo
            lo, hi = (lo - margin * width, hi + margin * width) if width > 0 else (lo - 1.0, hi + 1.0)
            knots = uniform_grid(lo, hi, layer.knots.num_intervals, layer.knots.degree)
            new = linear_spline_layer(mat, knots)
        layers.append(new)
        if h is not None:
            h = h @ mat.T
    decoder = pca.loadings[:, : m.n_factors].copy()
    return KanPcaModel(layers, decoder, "pca", m.seed)


def fit_kan_pca(config: TrainConfig, train: TrainOnlyView, validation, *, audit=None):
    """Run the staged schedule; returns ``(model, history)``.

    ``validation`` is a validation :class:`~kanpca.pipeline.ReturnPanel` or a
    bare array. Grid statistics are drawn from ``train`` only.
    """
    from .linalg import pca_fit
    from .pipeline import ReturnPanel

    view = require_train_view(train)
    log = audit if audit is not None else view.audit
    if isinstance(validation, ReturnPanel):
        val_X = log.access(validation, "early_stopping")
    else:
        val_X = np.asarray(validation, dtype=np.float64)
    X = view.read("fit")
    quantiles = config.quantiles()
    model = build_model(
        X.shape[1], config.hidden, config.n_factors, degree=config.degree,
        grid_intervals=config.stages[0].grid_intervals, affine=config.affine, seed=config.seed,
    )
    if config.init == "pca":
        n_comp = max(config.n_factors, min(model.encoder[0].n_out, X.shape[1]))
        model = pca_init(model, pca_fit(X, n_comp), view, margin=config.grid_margin)
    history = TrainHistory()
    for idx, stage in enumerate(config.stages):
        before = reconstruction_loss(X, model_forward(model, X)[1]) if idx else None
        model = update_model_grids(model, view, stage.grid_intervals, quantiles=quantiles,
                                   margin=config.grid_margin)
        after = reconstruction_loss(X, model_forward(model, X)[1]) if idx else None
        model, history = train_stage(model, X, val_X, stage, config.learning_rate,
                                     stage_index=idx, history=history)
        history.stages[-1].loss_before_extension = before
        history.stages[-1].loss_after_extension = after
    model.seed = config.seed
    return model, history
