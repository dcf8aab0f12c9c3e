"""Shared generators for randomized tests."""

from __future__ import annotations

import numpy as np
import pytest

from lotflow.core import N_CATEGORIES, OwnerCategory, StateVector, TransitionMatrix


def random_matrix(rng: np.random.Generator, year: int = 0) -> TransitionMatrix:
    """A random valid transition matrix (Dirichlet rows, structural zeros)."""
    entries = np.zeros((N_CATEGORIES, N_CATEGORIES))
    for row in range(N_CATEGORIES - 1):
        cols = [c for c in range(N_CATEGORIES) if (row, c) not in ((0, 4), (3, 4))]
        entries[row, cols] = rng.dirichlet(np.ones(len(cols)))
    entries[OwnerCategory.PERMITS, OwnerCategory.PERMITS] = 1.0
    return TransitionMatrix(entries, year)


def random_state(rng: np.random.Generator, year: int = 0, total: float = 1000.0) -> StateVector:
    counts = rng.dirichlet(np.ones(N_CATEGORIES)) * total
    return StateVector(counts, year)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
