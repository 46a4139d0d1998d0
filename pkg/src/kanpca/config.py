"""Experiment configuration: INI-style sections of flat ``key = value`` pairs.

Every key has a default, so an empty file (or none at all) is valid::

    [data]
    path = returns.csv
    schema = wide_returns          ; or wide_prices
    fractions = 0.7, 0.1, 0.2

    [model]
    hidden = 10                    ; comma list, empty for a single layer
    factors = 3
    degree = 3
    affine = false
    init = random                  ; or pca

    [train]
    seed = 0
    learning_rate = 0.001
    grid = 3, 5, 10                ; one entry per stage
    spline_penalty = 1e-3, 3e-4, 1e-4
    entropy_penalty = 0.1          ; scalars apply to every stage
    max_epochs = 500
    patience = 20

    [output]
    dir = kanpca-out
    deterministic = true
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .pipeline import DEFAULT_FRACTIONS, WIDE_RETURNS
from .train import StageConfig, TrainConfig

DEFAULTS = {
    "data": {"path": "", "schema": WIDE_RETURNS, "fractions": "0.7, 0.1, 0.2"},
    "model": {"hidden": "10", "factors": "3", "degree": "3", "affine": "false", "init": "random"},
    "train": {
        "seed": "0",
        "learning_rate": "0.001",
        "grid": "3, 5, 10",
        "spline_penalty": "1e-3, 3e-4, 1e-4",
        "entropy_penalty": "0.1",
        "max_epochs": "500",
        "patience": "20",
    },
    "output": {"dir": "kanpca-out", "deterministic": "true"},
}


def _floats(text: str) -> list:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text: str) -> list:
    return [int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _per_stage(values: list, n: int, key: str) -> list:
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ValueError(f"{key} has {len(values)} entries for {n} stages")
    return values


@dataclass
class ExperimentConfig:
    data: str = ""
    schema: str = WIDE_RETURNS
    fractions: tuple = DEFAULT_FRACTIONS
    hidden: tuple = (10,)
    n_factors: int = 3
    degree: int = 3
    affine: bool = False
    init: str = "random"
    grid: tuple = (3, 5, 10)
    spline_penalty: tuple = (1e-3, 3e-4, 1e-4)
    entropy_penalty: tuple = (0.1,)
    max_epochs: tuple = (500,)
    patience: tuple = (20,)
    learning_rate: float = 1e-3
    seed: int = 0
    out: str = "kanpca-out"
    deterministic: bool = True

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        g = lambda s, k: cp.get(s, k, fallback=DEFAULTS[s][k])  # noqa: E731
        return cls(
            data=g("data", "path"),
            schema=g("data", "schema"),
            fractions=tuple(_floats(g("data", "fractions"))),
            hidden=tuple(_ints(g("model", "hidden"))),
            n_factors=int(g("model", "factors")),
            degree=int(g("model", "degree")),
            affine=cp.getboolean("model", "affine", fallback=False),
            init=g("model", "init"),
            grid=tuple(_ints(g("train", "grid"))),
            spline_penalty=tuple(_floats(g("train", "spline_penalty"))),
            entropy_penalty=tuple(_floats(g("train", "entropy_penalty"))),
            max_epochs=tuple(_ints(g("train", "max_epochs"))),
            patience=tuple(_ints(g("train", "patience"))),
            learning_rate=float(g("train", "learning_rate")),
            seed=int(g("train", "seed")),
            out=g("output", "dir"),
            deterministic=cp.getboolean("output", "deterministic", fallback=True),
        )

    @classmethod
    def load(cls, path=None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if path:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        unknown = [s for s in cp.sections() if s not in DEFAULTS]
        if unknown:
            raise ValueError(f"unknown config section(s): {', '.join(unknown)}")
        for section in cp.sections():
            bad = [k for k in cp[section] if k not in DEFAULTS[section]]
            if bad:
                raise ValueError(f"unknown key(s) in [{section}]: {', '.join(bad)}")
        return cls.from_parser(cp)

    def stages(self) -> list:
        n = len(self.grid)
        if n == 0:
            raise ValueError("grid must list at least one stage")
        cols = [
            _per_stage(list(self.spline_penalty), n, "spline_penalty"),
            _per_stage(list(self.entropy_penalty), n, "entropy_penalty"),
            _per_stage(list(self.max_epochs), n, "max_epochs"),
            _per_stage(list(self.patience), n, "patience"),
        ]
        return [StageConfig(g, sp, ep, me, pa) for g, sp, ep, me, pa in zip(self.grid, *cols)]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            stages=self.stages(),
            learning_rate=self.learning_rate,
            seed=self.seed,
            affine=self.affine,
            init=self.init,
            hidden=self.hidden,
            n_factors=self.n_factors,
            degree=self.degree,
        )

    def to_text(self) -> str:
        """Fully resolved config in the same INI format it is read from."""
        j = lambda xs: ", ".join(repr(x) if isinstance(x, float) else str(x) for x in xs)  # noqa: E731
        cp = configparser.ConfigParser()
        cp["data"] = {"path": self.data, "schema": self.schema, "fractions": j(self.fractions)}
        cp["model"] = {
            "hidden": j(self.hidden),
            "factors": str(self.n_factors),
            "degree": str(self.degree),
            "affine": str(self.affine).lower(),
            "init": self.init,
        }
        cp["train"] = {
            "seed": str(self.seed),
            "learning_rate": repr(self.learning_rate),
            "grid": j(self.grid),
            "spline_penalty": j(self.spline_penalty),
            "entropy_penalty": j(self.entropy_penalty),
            "max_epochs": j(self.max_epochs),
            "patience": j(self.patience),
        }
        cp["output"] = {"dir": self.out, "deterministic": str(self.deterministic).lower()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        """Short digest of every setting except the output directory."""
        text = self.to_text().replace(f"dir = {self.out}\n", "")
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
