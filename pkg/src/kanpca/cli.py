"""Command-line driver: ``kanpca <command> [options]``.

Commands: fit-pca, fit-kan, benchmark, export-factors, export-edges, inspect.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .exceptions import DataError, LeakageError, NumericalError
from .linalg import PcaModel, pca_fit, pca_reconstruct, pca_transform, r_squared
from .modelfile import load_model, read_model_file, save_kan_model, save_pca_model, standardization_from, tickers_from
from .pipeline import (
    SCHEMAS,
    AuditLog,
    ReturnPanel,
    SplitPanels,
    TrainOnlyView,
    apply_standardization,
    chronological_split,
    load_csv,
    standardize,
    train_view,
    write_panel_csv,
)
from .train import KanPcaModel, TrainHistory, fit_kan_pca, model_forward

logger = logging.getLogger("kanpca")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
PCA_LABEL = "Classical PCA (train-fit)"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class Experiment:
    cfg: ExperimentConfig
    audit: AuditLog
    panel: ReturnPanel
    splits: SplitPanels
    view: TrainOnlyView
    started: float


def resolve_config(args) -> ExperimentConfig:
    """Config file (if any) with command-line overrides applied on top."""
    try:
        return _resolve_config(args)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc


def _resolve_config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if path and not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    cfg = ExperimentConfig.load(path)
    overrides = {}
    if getattr(args, "data", None):
        overrides["data"] = args.data
    if getattr(args, "schema", None):
        overrides["schema"] = args.schema
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        overrides["n_factors"] = args.k
    if getattr(args, "grid", None):
        overrides["grid"] = tuple(int(g) for g in args.grid.split(",") if g.strip())
    if getattr(args, "affine", False):
        overrides["affine"] = True
    if getattr(args, "init", None):
        overrides["init"] = args.init
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    cfg = replace(cfg, **overrides)
    if not cfg.data:
        raise UsageError("no data file given (use --data or [data] path)")
    cfg.train_config()
    return cfg


def prepare(cfg: ExperimentConfig) -> Experiment:
    started = time.perf_counter()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    audit = AuditLog(deterministic=cfg.deterministic)
    panel = load_csv(cfg.data, cfg.schema)
    splits = standardize(chronological_split(panel, cfg.fractions), audit)
    view = train_view(splits, audit)
    return Experiment(cfg, audit, panel, splits, view, started)


def _fit_pca(exp: Experiment) -> PcaModel:
    X = exp.view.read("pca_fit")
    if not 1 <= exp.cfg.n_factors <= X.shape[1]:
        raise UsageError(f"k must be between 1 and {X.shape[1]}")
    return pca_fit(X, exp.cfg.n_factors)


def _fit_kan(exp: Experiment) -> tuple[KanPcaModel, TrainHistory]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_kan_pca(exp.cfg.train_config(), exp.view, exp.splits.validation, audit=exp.audit)


def _reconstruct(model, X):
    if isinstance(model, PcaModel):
        return pca_reconstruct(model, pca_transform(model, X))
    return model_forward(model, X)[1]


def _encode(model, X):
    if isinstance(model, PcaModel):
        return pca_transform(model, X)
    return model_forward(model, X)[0]


def evaluate(exp: Experiment, model) -> dict:
    """R^2 on each split; only callable after the audit log marks fits complete."""
    if not exp.audit.fit_complete:
        raise LeakageError("evaluation requested before fitting completed")
    train = exp.view.read("evaluate")
    val = exp.audit.access(exp.splits.validation, "evaluate")
    test = exp.audit.access(exp.splits.test, "evaluate")
    return {
        "r2_train": r_squared(train, _reconstruct(model, train)),
        "r2_validation": r_squared(val, _reconstruct(model, val)),
        "r2_test": r_squared(test, _reconstruct(model, test)),
    }


def _kan_label(model: KanPcaModel) -> str:
    return "KAN-PCA (affine)" if model.affine else "KAN-PCA"


def _standardized_full(exp: Experiment) -> ReturnPanel:
    return apply_standardization(exp.panel, exp.splits.train.standardization)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def _write_pca_exports(exp: Experiment, pca: PcaModel):
    out = Path(exp.cfg.out)
    tickers = exp.splits.train.tickers
    stats = exp.splits.train.standardization
    save_pca_model(out / "pca_model.kpm", pca, standardization=stats, tickers=tickers)
    _write_csv(
        out / "loadings.csv",
        ["ticker", *(f"factor_{j + 1}" for j in range(pca.k))],
        [[t, *map(_fmt, row)] for t, row in zip(tickers, pca.loadings)],
    )
    total = pca.total_variance
    _write_csv(
        out / "eigen_shares.csv",
        ["component", "eigenvalue", "share"],
        [[i + 1, _fmt(lam), _fmt(lam / total if total else 0.0)] for i, lam in enumerate(pca.eigenvalues)],
    )


def _write_kan_exports(exp: Experiment, model: KanPcaModel, history: TrainHistory):
    out = Path(exp.cfg.out)
    stats = exp.splits.train.standardization
    meta = {"stop_reason": history.stop_reason or ""}
    save_kan_model(out / "kan_model.kpm", model, standardization=stats,
                   tickers=exp.splits.train.tickers, metadata=meta)
    history.to_csv(out / "history.csv")


def _kan_metadata(model: KanPcaModel, history: TrainHistory) -> dict:
    return {
        "mode": model.mode,
        "init": model.init,
        "architecture": model.architecture,
        "stages": [
            {
                "grid_size": s.grid_size,
                "best_epoch": s.best_epoch,
                "best_val_loss": s.best_val_loss,
                "stop_reason": s.stop_reason,
                "loss_before_extension": s.loss_before_extension,
                "loss_after_extension": s.loss_after_extension,
            }
            for s in history.stages
        ],
    }


def _report(exp: Experiment, rows: list, pca: PcaModel | None, extra: dict) -> dict:
    cfg = exp.cfg
    meta = {
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "deterministic": cfg.deterministic,
        "wall_time_s": None if cfg.deterministic else round(time.perf_counter() - exp.started, 3),
        "n_assets": exp.panel.n_assets,
        "split_sizes": list(exp.splits.sizes),
        "split_boundaries": list(exp.splits.boundaries),
        "standardization_fitted_on": exp.splits.train.standardization.fitted_on,
    }
    meta.update(extra)
    report = {"models": rows, "metadata": meta, "audit": exp.audit.summary()}
    if pca is not None:
        report["pca_eigenvalue_shares"] = [float(v) for v in pca.explained_ratios]
    return report


def format_table(rows: list) -> str:
    width = max(len(r["model"]) for r in rows) + 2
    head = f"{'Model':<{width}}{'R2 Train':>10}{'R2 Validation':>16}{'R2 Out-of-Sample':>19}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['model']:<{width}}{100 * r['r2_train']:>9.2f}%{100 * r['r2_validation']:>15.2f}%"
            f"{100 * r['r2_test']:>18.2f}%"
        )
    return "\n".join(lines) + "\n"


def _finish(exp: Experiment, report: dict):
    out = Path(exp.cfg.out)
    write_panel_csv(_standardized_full(exp), out / "standardized.csv")
    exp.audit.write(out / "audit.log")
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    table = format_table(report["models"])
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)


def cmd_fit_pca(args) -> int:
    exp = prepare(resolve_config(args))
    pca = _fit_pca(exp)
    exp.audit.mark_fit_complete()
    row = {"model": PCA_LABEL, **evaluate(exp, pca)}
    _write_pca_exports(exp, pca)
    _finish(exp, _report(exp, [row], pca, {}))
    return EXIT_OK


def cmd_fit_kan(args) -> int:
    exp = prepare(resolve_config(args))
    model, history = _fit_kan(exp)
    exp.audit.mark_fit_complete()
    row = {"model": _kan_label(model), **evaluate(exp, model)}
    _write_kan_exports(exp, model, history)
    _finish(exp, _report(exp, [row], None, {"kan": _kan_metadata(model, history)}))
    return EXIT_OK


def cmd_benchmark(args) -> int:
    exp = prepare(resolve_config(args))
    try:
        pca = _fit_pca(exp)
    except NumericalError as exc:
        raise NumericalError(f"benchmark: PCA fit failed: {exc}") from exc
    try:
        model, history = _fit_kan(exp)
    except NumericalError as exc:
        raise type(exc)(f"benchmark: KAN-PCA fit failed: {exc}") from exc
    exp.audit.mark_fit_complete()
    rows = [
        {"model": PCA_LABEL, **evaluate(exp, pca)},
        {"model": _kan_label(model), **evaluate(exp, model)},
    ]
    _write_pca_exports(exp, pca)
    _write_kan_exports(exp, model, history)
    _finish(exp, _report(exp, rows, pca, {"kan": _kan_metadata(model, history)}))
    return EXIT_OK


def cmd_export_factors(args) -> int:
    model, mf = load_model(args.model)
    stats = standardization_from(mf)
    if stats is None:
        raise DataError(f"{args.model} carries no standardization statistics")
    panel = load_csv(args.data, args.schema or "wide_returns")
    tickers = tickers_from(mf)
    if tickers is not None and tuple(panel.tickers) != tickers:
        raise DataError("panel tickers do not match the model's tickers")
    X = apply_standardization(panel, stats).values
    n_features = model.n_features
    if X.shape[1] != n_features:
        raise DataError(f"model expects {n_features} assets, panel has {X.shape[1]}")
    Z = _encode(model, X)
    _write_csv(
        args.out,
        ["date", *(f"factor_{j + 1}" for j in range(Z.shape[1]))],
        [[d, *map(_fmt, row)] for d, row in zip(panel.dates, Z)],
    )
    return EXIT_OK


def edge_samples(model: KanPcaModel, samples: int) -> list:
    """``(target_node, source_index, x, phi)`` rows for every first-layer edge."""
    layer = model.encoder[0]
    lo, hi = layer.knots.domain
    xs = np.linspace(lo, hi, samples)
    rows = []
    for j in range(layer.n_out):
        for i in range(layer.n_in):
            phi = layer.edge(j, i, xs)
            rows.extend((j, i, x, p) for x, p in zip(xs, phi))
    return rows


def cmd_export_edges(args) -> int:
    model, mf = load_model(args.model)
    if not isinstance(model, KanPcaModel):
        raise DataError("edge export needs a kan_pca model file")
    if args.samples < 2:
        raise UsageError("--samples must be at least 2")
    if model.encoder[0].mode == "affine":
        print(f"note: {args.model} is affine; every edge is a straight line", file=sys.stderr)
    rows = edge_samples(model, args.samples)
    _write_csv(args.out, ["target_node", "source_index", "x", "phi"],
               [[j, i, _fmt(x), _fmt(p)] for j, i, x, p in rows])
    return EXIT_OK


def cmd_inspect(args) -> int:
    mf = read_model_file(args.model)
    for key, value in mf.header.items():
        print(f"{key} = {value}")
    for name, arr in mf.blocks.items():
        print(f"block {name} {'x'.join(map(str, arr.shape)) or 'scalar'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kanpca", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment(name, func, help_text, kan=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--data", help="input CSV (overrides [data] path)")
        p.add_argument("--schema", choices=SCHEMAS)
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int, help="number of factors")
        det = p.add_mutually_exclusive_group()
        det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
        det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
        if kan:
            p.add_argument("--affine", action="store_true", help="affine-constrained encoder")
            p.add_argument("--grid", help="stage grid sizes, e.g. 3,5,10")
            p.add_argument("--init", choices=("random", "pca"))
        p.set_defaults(func=func)

    experiment("fit-pca", cmd_fit_pca, "fit classical PCA on the training split")
    experiment("fit-kan", cmd_fit_kan, "train KAN-PCA with the staged schedule", kan=True)
    experiment("benchmark", cmd_benchmark, "PCA vs KAN-PCA on identical splits", kan=True)

    p = sub.add_parser("export-factors", help="factor time series of a saved model")
    p.add_argument("model")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", choices=SCHEMAS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_factors)

    p = sub.add_parser("export-edges", help="sampled first-layer edge functions")
    p.add_argument("model")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=101)
    p.set_defaults(func=cmd_export_edges)

    p = sub.add_parser("inspect", help="print a model file header")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kanpca: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LeakageError, FileNotFoundError, ValueError) as exc:
        print(f"kanpca: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"kanpca: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
