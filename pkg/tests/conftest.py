import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anisph.particles import create_table  # noqa: E402


def lattice_positions(m, spacing=1.0):
    g = np.arange(m) * spacing
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def lattice_table(m, spacing=1.0, mass=1.0, velocity=(0.0, 0.0, 0.0)):
    X = lattice_positions(m, spacing)
    n = X.shape[0]
    return create_table(np.full(n, mass), X, np.broadcast_to(velocity, (n, 3)))


def interior_mask(X, m, margin, spacing=1.0):
    return ((X >= margin * spacing) & (X <= (m - 1 - margin) * spacing)).all(axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


@pytest.fixture(scope="session")
def lattice16():
    return lattice_table(16)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
