import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from kanpca.datasets import make_factor_panel  # noqa: E402
from kanpca.pipeline import write_panel_csv  # noqa: E402

ACCEPTANCE = {}


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def returns_csv(tmp_path):
    panel = make_factor_panel(240, 6, noise=1.0, seed=3, as_panel=True)
    path = tmp_path / "returns.csv"
    write_panel_csv(panel, path)
    return path


@pytest.fixture
def quick_ini(tmp_path):
    path = tmp_path / "quick.ini"
    path.write_text(
        "[model]\nhidden = 4\nfactors = 2\n\n"
        "[train]\ngrid = 3, 5\nspline_penalty = 1e-3, 3e-4\nmax_epochs = 15\npatience = 5\n"
        "learning_rate = 0.01\n",
        encoding="utf-8",
    )
    return path


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number:>2}: {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
