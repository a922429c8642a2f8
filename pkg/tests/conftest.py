import os
from pathlib import Path

import pytest

from csrfhe import he_backend as he

ROOT = Path(__file__).resolve().parent.parent
DATA_PATH = Path(os.environ.get("CSRFHE_DATA", ROOT / "data" / "ml-100k" / "u.data"))


@pytest.fixture
def small_params():
    return he.HEParams(poly_degree=64, frac_bits=32, max_depth=40)


@pytest.fixture
def small_keys(small_params):
    return he.keygen(small_params, seed=7)


@pytest.fixture(scope="session")
def movielens():
    if not DATA_PATH.is_file():
        pytest.skip(f"MovieLens data missing at {DATA_PATH}; run scripts/fetch_movielens.py")
    from csrfhe.eval import load_movielens
    return load_movielens(DATA_PATH)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line PASS/FAIL for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
