"""Return panels: CSV ingestion, chronological splits, train-only standardisation.

Every fitting step reads data through a :class:`TrainOnlyView`, which only
holds the training rows. Reads of validation and test rows go through
:meth:`AuditLog.access`, which records them and refuses test reads until the
run has declared its fits complete.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import DataError, LeakageError

logger = logging.getLogger(__name__)

WIDE_PRICES = "wide_prices"
WIDE_RETURNS = "wide_returns"
SCHEMAS = (WIDE_PRICES, WIDE_RETURNS)

TRAIN, VALIDATION, TEST = "train", "validation", "test"
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)
MIN_ROWS = 10


@dataclass(frozen=True, eq=False)
class Standardization:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: str = TRAIN

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    """``T x N`` block of returns with its date labels.

    ``split`` tags which part of a chronological split the rows belong to
    (``None`` for an unsplit panel), and ``row_offset`` locates the block in
    the panel it was cut from.
    """

    dates: tuple
    tickers: tuple
    values: np.ndarray
    standardization: Standardization | None = None
    split: str | None = None
    row_offset: int = 0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"panel values must be 2-D, got shape {values.shape}")
        dates = tuple(str(d) for d in self.dates)
        tickers = tuple(str(t) for t in self.tickers)
        if values.shape != (len(dates), len(tickers)):
            raise DataError(
                f"values shape {values.shape} does not match {len(dates)} dates x {len(tickers)} tickers"
            )
        if any(a >= b for a, b in zip(dates, dates[1:])):
            raise DataError("dates must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise DataError("panel contains non-finite values")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "tickers", tickers)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_assets(self) -> int:
        return self.values.shape[1]

    @property
    def row_range(self) -> tuple[int, int]:
        return self.row_offset, self.row_offset + self.n_rows

    def slice(self, start: int, stop: int, split: str | None) -> "ReturnPanel":
        return ReturnPanel(
            self.dates[start:stop],
            self.tickers,
            self.values[start:stop],
            self.standardization,
            split,
            self.row_offset + start,
        )


@dataclass(frozen=True, eq=False)
class SplitPanels:
    train: ReturnPanel
    validation: ReturnPanel
    test: ReturnPanel

    @property
    def boundaries(self) -> tuple[str, str]:
        """First dates of the validation and test blocks."""
        return self.validation.dates[0], self.test.dates[0]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.train.n_rows, self.validation.n_rows, self.test.n_rows

    def __iter__(self):
        return iter((self.train, self.validation, self.test))


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    timestamp: str
    operation: str
    split: str
    row_start: int
    row_end: int
    date_start: str = ""
    date_end: str = ""

    def line(self) -> str:
        return (
            f"{self.timestamp}\t{self.operation}\t{self.split}\t"
            f"rows={self.row_start}:{self.row_end}\tdates={self.date_start}..{self.date_end}"
        )


@dataclass
class AuditLog:
    """Ordered record of every data access made while fitting and evaluating.

    With ``deterministic=True`` timestamps are replaced by sequence numbers
    so that the log is byte-reproducible.
    """

    deterministic: bool = False
    entries: list = field(default_factory=list)
    fit_complete: bool = False

    def _stamp(self) -> str:
        if self.deterministic:
            return f"seq={len(self.entries):06d}"
        return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + f"Z#{len(self.entries):06d}"

    def record(self, operation: str, panel: ReturnPanel, split: str | None = None) -> AuditEntry:
        split = split or panel.split or "full"
        start, end = panel.row_range
        entry = AuditEntry(
            len(self.entries),
            self._stamp(),
            operation,
            split,
            start,
            end,
            panel.dates[0] if panel.n_rows else "",
            panel.dates[-1] if panel.n_rows else "",
        )
        self.entries.append(entry)
        return entry

    def access(self, panel: ReturnPanel, operation: str) -> np.ndarray:
        """Read a panel's values, refusing test rows before fits are complete."""
        if panel.split == TEST and not self.fit_complete:
            raise LeakageError(f"test rows requested for {operation!r} before fitting completed")
        self.record(operation, panel)
        return panel.values

    def mark_fit_complete(self):
        self.fit_complete = True
        self.entries.append(AuditEntry(len(self.entries), self._stamp(), "fit_complete", "-", 0, 0))

    def entries_before_fit_complete(self) -> list:
        out = []
        for e in self.entries:
            if e.operation == "fit_complete":
                break
            out.append(e)
        return out

    def violations(self) -> list:
        """Accesses before fit completion that were not train reads or early stopping."""
        return [
            e
            for e in self.entries_before_fit_complete()
            if e.split != TRAIN and not (e.split == VALIDATION and e.operation == "early_stopping")
        ]

    def summary(self) -> dict:
        counts: dict = {}
        for e in self.entries:
            if e.operation == "fit_complete":
                continue
            key = f"{e.split}:{e.operation}"
            counts[key] = counts.get(key, 0) + 1
        pre = self.entries_before_fit_complete()
        return {
            "accesses": dict(sorted(counts.items())),
            "test_reads_before_fit_complete": sum(e.split == TEST for e in pre),
            "non_train_reads_before_fit_complete": sum(e.split != TRAIN for e in pre),
            "violations": len(self.violations()),
        }

    def lines(self) -> list[str]:
        return [e.line() for e in self.entries]

    def write(self, path):
        Path(path).write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")


class TrainOnlyView:
    """Handle on the training rows of a split and nothing else.

    The validation and test panels are never stored here, so no code path
    holding only a view can reach them. Reads are recorded in the audit log.
    """

    __slots__ = ("_panel", "_audit")

    def __init__(self, panel: ReturnPanel, audit: AuditLog | None = None):
        if panel.split not in (TRAIN, None):
            raise LeakageError(f"a train-only view cannot wrap {panel.split!r} rows")
        object.__setattr__(self, "_panel", replace(panel, split=TRAIN) if panel.split is None else panel)
        object.__setattr__(self, "_audit", audit if audit is not None else AuditLog(deterministic=True))

    @classmethod
    def from_array(cls, X, audit: AuditLog | None = None) -> "TrainOnlyView":
        """Wrap a bare training matrix (row labels are synthetic)."""
        X = np.asarray(X, dtype=np.float64)
        panel = ReturnPanel(
            tuple(f"{i:08d}" for i in range(X.shape[0])),
            tuple(f"x{j}" for j in range(X.shape[1])),
            X,
            split=TRAIN,
        )
        return cls(panel, audit)

    def __setattr__(self, name, value):
        raise AttributeError("TrainOnlyView is read-only")

    def __getattr__(self, name):
        if name in ("validation", "test", "val", "splits"):
            raise LeakageError(f"{name!r} rows are not reachable through a train-only view")
        raise AttributeError(name)

    def read(self, operation: str) -> np.ndarray:
        self._audit.record(operation, self._panel)
        return self._panel.values

    @property
    def values(self) -> np.ndarray:
        return self.read("read")

    @property
    def shape(self) -> tuple[int, int]:
        return self._panel.values.shape

    @property
    def dates(self) -> tuple:
        return self._panel.dates

    @property
    def tickers(self) -> tuple:
        return self._panel.tickers

    @property
    def standardization(self) -> Standardization | None:
        return self._panel.standardization

    @property
    def audit(self) -> AuditLog:
        return self._audit

    def __repr__(self):
        return f"TrainOnlyView(rows={self.shape[0]}, assets={self.shape[1]})"


def require_train_view(source) -> TrainOnlyView:
    """Reject anything that is not a :class:`TrainOnlyView`."""
    if isinstance(source, TrainOnlyView):
        return source
    split = getattr(source, "split", None)
    raise LeakageError(
        f"fitting statistics must come from a TrainOnlyView, got {type(source).__name__}"
        + (f" tagged {split!r}" if split else "")
    )


def _parse_cell(text: str, row: int, col: str):
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"unparseable cell {text!r} at row {row}, column {col!r}") from None
    if math.isinf(value):
        raise DataError(f"infinite value at row {row}, column {col!r}")
    return value


def load_csv(path, schema: str = WIDE_RETURNS, *, min_rows: int = MIN_ROWS) -> ReturnPanel:
    """Read a wide CSV (first column dates, header row of tickers).

    ``wide_prices`` files are converted to log-returns after dropping rows
    with missing prices; ``wide_returns`` files are used as they are, with
    incomplete rows dropped.
    """
    if schema not in SCHEMAS:
        raise ValueError(f"schema must be one of {SCHEMAS}, got {schema!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        tickers = [h.strip() for h in header[1:]]
        if not tickers:
            raise DataError(f"{path}: header has no ticker columns")
        if len(set(tickers)) != len(tickers):
            raise DataError(f"{path}: duplicate ticker columns")
        dates, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(rec)} cells, expected {len(header)}")
            dates.append(rec[0].strip())
            rows.append([_parse_cell(c, lineno, t) for c, t in zip(rec[1:], tickers)])

    for a, b in zip(dates, dates[1:]):
        if a == b:
            raise DataError(f"{path}: duplicate date {a}")
        if a > b:
            raise DataError(f"{path}: dates not increasing ({a} then {b})")

    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(tickers))
    complete = ~np.isnan(values).any(axis=1)
    dropped = int((~complete).sum())
    if dropped:
        logger.info("dropped %d incomplete row(s) from %s", dropped, path)
    dates = [d for d, ok in zip(dates, complete) if ok]
    values = values[complete]

    if schema == WIDE_PRICES:
        if np.any(values <= 0):
            raise DataError(f"{path}: prices must be positive")
        values = np.diff(np.log(values), axis=0)
        dates = dates[1:]
    if len(dates) < min_rows:
        raise DataError(f"{path}: only {len(dates)} usable rows, need at least {min_rows}")
    return ReturnPanel(tuple(dates), tuple(tickers), values)


def write_panel_csv(panel: ReturnPanel, path):
    """Write a wide-returns CSV; ``repr`` floats make the round trip exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.tickers])
        for d, row in zip(panel.dates, panel.values):
            w.writerow([d, *(repr(float(v)) for v in row)])


def split_sizes(n_rows: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f <= 0 for f in fr):
        raise ValueError(f"need three positive fractions, got {fractions!r}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)}")
    # the epsilon guards products such as 0.7 * 70 = 48.999...
    n_train = int(math.floor(fr[0] * n_rows + 1e-9))
    n_val = int(math.floor(fr[1] * n_rows + 1e-9))
    sizes = (n_train, n_val, n_rows - n_train - n_val)
    if min(sizes) < 1:
        raise DataError(f"split of {n_rows} rows with fractions {fr} leaves an empty block {sizes}")
    return sizes


def chronological_split(panel: ReturnPanel, fractions=DEFAULT_FRACTIONS) -> SplitPanels:
    """Cut a panel into consecutive train / validation / test blocks (no shuffling)."""
    n_train, n_val, _ = split_sizes(panel.n_rows, fractions)
    return SplitPanels(
        panel.slice(0, n_train, TRAIN),
        panel.slice(n_train, n_train + n_val, VALIDATION),
        panel.slice(n_train + n_val, panel.n_rows, TEST),
    )


def standardize(splits: SplitPanels, audit: AuditLog | None = None) -> SplitPanels:
    """Scale all three blocks with per-asset mean and std of the training block."""
    if any(p.standardization is not None for p in splits):
        raise DataError("splits are already standardized")
    train = splits.train
    if audit is not None:
        audit.record("standardize_fit", train)
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0)
    bad = [t for t, s in zip(train.tickers, std) if not s > 0]
    if bad:
        raise DataError(f"zero training variance for asset(s): {', '.join(bad)}")
    stats = Standardization(mean, std, TRAIN)
    return SplitPanels(*(_with_stats(p, stats) for p in splits))


def _with_stats(panel: ReturnPanel, stats: Standardization) -> ReturnPanel:
    return replace(panel, values=stats.apply(panel.values), standardization=stats)


def apply_standardization(panel: ReturnPanel, stats: Standardization) -> ReturnPanel:
    if panel.tickers and len(panel.tickers) != stats.mean.shape[0]:
        raise DataError(f"panel has {panel.n_assets} assets, statistics cover {stats.mean.shape[0]}")
    return _with_stats(panel, stats)


def train_view(splits: SplitPanels, audit: AuditLog | None = None) -> TrainOnlyView:
    if splits.train.standardization is None:
        raise DataError("standardize the splits before creating a training view")
    return TrainOnlyView(splits.train, audit)
