import itertools
import random

import pytest

from vaultlog.field import PrimeField, production_field


@pytest.fixture
def f13():
    return PrimeField(13)


@pytest.fixture
def f257():
    return PrimeField(257)


@pytest.fixture(scope="session")
def fbig():
    return production_field()


@pytest.fixture
def rng():
    return random.Random(20240611)


def det_mod(rows, p):
    """Leibniz-formula determinant; deliberately not elimination-based."""
    k = len(rows)
    total = 0
    for perm in itertools.permutations(range(k)):
        inversions = sum(1 for i in range(k) for j in range(i + 1, k) if perm[i] > perm[j])
        term = -1 if inversions % 2 else 1
        for r, c in enumerate(perm):
            term *= rows[r][c]
        total += term
    return total % p


_criteria: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        _criteria[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
