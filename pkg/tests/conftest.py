from pathlib import Path

import numpy as np
import pytest

from ccbudget.cli import bundled_source_dir
from ccbudget.gaussian_select import GaussianModel
from ccbudget.patch_engine import SourceTree

FIXTURES = Path(__file__).parent / "fixtures"


def random_psd_model(rng: np.random.Generator, M: int, rank: int | None = None, ridge: float = 1e-6) -> GaussianModel:
    """Random covariance A A^T + ridge*I with a random mean."""
    rank = M if rank is None else rank
    a = rng.standard_normal((M, rank)) * rng.uniform(0.1, 2.0, size=(M, 1))
    sigma = a @ a.T + ridge * np.eye(M)
    return GaussianModel(rng.standard_normal(M) * 0.1, (sigma + sigma.T) / 2)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def source_tree() -> SourceTree:
    return SourceTree.load(bundled_source_dir())


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
