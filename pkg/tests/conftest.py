"""Shared fixtures and the acceptance-criteria summary printer."""

import numpy as np
import pytest

from fovx import phantom
from fovx.core import Grid3

# (number, verdict, label, detail) rows appended by tests/test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num, ok, label, detail in sorted(ACCEPTANCE_RESULTS):
        line = f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {label}"
        if detail:
            line += f"  [{detail}]"
        tr.write_line(line)


@pytest.fixture(scope="session")
def scheme16():
    return phantom.default_scheme(16, 2)


@pytest.fixture(scope="session")
def slab32(scheme16):
    """Noiseless 32^3 slab phantom at 2 mm, 16+2 volumes."""
    grid = Grid3((32, 32, 32), (2.0, 2.0, 2.0))
    return phantom.generate(phantom.preset_spec("slab", grid, scheme16, seed=5))


@pytest.fixture(scope="session")
def noisy32(scheme16):
    """Same geometry with Rician sigma = 60 (s0 = 1000)."""
    grid = Grid3((32, 32, 32), (2.0, 2.0, 2.0))
    return phantom.generate(phantom.preset_spec("slab", grid, scheme16, sigma=60.0, seed=6))
