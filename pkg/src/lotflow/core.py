"""Markov state space for lot ownership.

A community's unpermitted lots are grouped by owner behavior into four
categories; permitted lots accumulate in a fifth, absorbing category.
The yearly evolution is a row-vector/matrix product: next year's counts
are this year's counts times a row-stochastic transition matrix whose
structure encodes that only builder- and prospect-held lots can be
permitted.

All types here are immutable values and all operations are pure
functions, so they are safe to share across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

N_CATEGORIES = 5

# Row sums may deviate from 1 by at most this much. Callers must
# normalize themselves; core never repairs a matrix silently.
ROW_SUM_TOL = 1e-9

# Relative tolerance for total-lot conservation checks.
CONSERVATION_RTOL = 1e-9


class OwnerCategory(enum.IntEnum):
    """Owner categories in canonical index order (F, B, P, A, R)."""

    FLIPPERS = 0
    BUILDERS = 1
    PROSPECTS = 2
    ADJACENTS = 3
    PERMITS = 4

    @property
    def code(self) -> str:
        """One-letter code used in files and scenario definitions."""
        return "FBPAR"[self.value]

    @classmethod
    def from_code(cls, code: str) -> "OwnerCategory":
        key = code.strip().upper()
        for member in cls:
            if key in (member.code, member.name):
                return member
        raise ValueError(f"unknown owner category code: {code!r}")


#: (row, col) positions with a structurally impossible transition:
#: flipper- and adjacent-held lots are never permitted directly.
STRUCTURAL_ZEROS: tuple[tuple[int, int], ...] = ((0, 4), (3, 4))

#: The 14 free (row, col) positions of a transition matrix, row-major.
#: Diagonals are determined by the row sums and the permits row is fixed,
#: leaving 3 free sell targets for the F and A rows and 4 (including the
#: permit column) for the B and P rows.
FREE_PARAMS: tuple[tuple[int, int], ...] = (
    (0, 1), (0, 2), (0, 3),
    (1, 0), (1, 2), (1, 3), (1, 4),
    (2, 0), (2, 1), (2, 3), (2, 4),
    (3, 0), (3, 1), (3, 2),
)

#: Free-parameter indices that feed the permit column (B->R, P->R).
PERMIT_FLOW_PARAMS: tuple[int, ...] = tuple(
    i for i, (r, c) in enumerate(FREE_PARAMS) if c == OwnerCategory.PERMITS
)

_FREE_ROWS = np.array([rc[0] for rc in FREE_PARAMS])
_FREE_COLS = np.array([rc[1] for rc in FREE_PARAMS])


@dataclass(frozen=True, eq=False)
class Violation:
    """One failed matrix invariant, with its location and magnitude."""

    rule: str
    row: int
    col: int | None
    deviation: float

    def __str__(self) -> str:
        where = f"row {self.row}" if self.col is None else f"({self.row},{self.col})"
        return f"{self.rule} at {where}: deviation {self.deviation:.3g}"


class ValidationError(ValueError):
    """A matrix or state violated a structural invariant."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class StateVector:
    """Lot counts per owner category for one calendar year.

    Counts are real-valued expected lots, not integers: the one-step
    update is a linear expectation update, and forecasts propagate
    fractional mass. The permits slot is cumulative.
    """

    counts: np.ndarray
    year: int

    def __post_init__(self) -> None:
        counts = _readonly(np.asarray(self.counts, dtype=float).reshape(-1))
        if counts.shape != (N_CATEGORIES,):
            raise ValidationError(
                [Violation("state_dimension", -1, None, float(counts.size))]
            )
        if not np.all(np.isfinite(counts)):
            raise ValidationError([Violation("state_finite", -1, None, float("nan"))])
        if np.any(counts < 0):
            bad = int(np.argmin(counts))
            raise ValidationError(
                [Violation("state_nonnegative", bad, None, float(-counts[bad]))]
            )
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def permits(self) -> float:
        return float(self.counts[OwnerCategory.PERMITS])

    def count(self, category: OwnerCategory) -> float:
        return float(self.counts[category])


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Row-stochastic 5x5 matrix for the step from `year` to `year + 1`."""

    entries: np.ndarray
    year: int

    def __post_init__(self) -> None:
        entries = _readonly(np.asarray(self.entries, dtype=float))
        if entries.shape != (N_CATEGORIES, N_CATEGORIES):
            raise ValidationError(
                [Violation("matrix_dimension", -1, None, float(entries.size))]
            )
        object.__setattr__(self, "entries", entries)

    def free_values(self) -> np.ndarray:
        """The 14 free parameters in canonical order."""
        return self.entries[_FREE_ROWS, _FREE_COLS].copy()


def raw_entries_from_free(values: np.ndarray) -> np.ndarray:
    """Unvalidated 5x5 entries from the 14 free parameters.

    Diagonals take the leftover row mass and may come out negative when
    a row's free parameters exceed 1; callers either validate or
    normalize the result.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape != (len(FREE_PARAMS),):
        raise ValueError(f"expected {len(FREE_PARAMS)} free parameters, got {values.size}")
    entries = np.zeros((N_CATEGORIES, N_CATEGORIES))
    entries[_FREE_ROWS, _FREE_COLS] = values
    for row in range(N_CATEGORIES - 1):
        leftover = 1.0 - entries[row].sum()
        if -1e-12 < leftover < 0.0:
            # Cancellation dust from a row whose free sum is exactly 1.
            leftover = 0.0
        entries[row, row] = leftover
    entries[OwnerCategory.PERMITS, OwnerCategory.PERMITS] = 1.0
    return entries


def from_free_parameters(values: np.ndarray, year: int = 0) -> TransitionMatrix:
    """Assemble a validated matrix from the 14 free parameters.

    Diagonals take the leftover mass (1 minus the row's free sum),
    structural zeros stay zero and the permits row is absorbing. Raises
    ValidationError if the result is not a valid matrix (e.g. a row's
    free parameters exceed 1).
    """
    matrix = TransitionMatrix(raw_entries_from_free(values), year)
    violations = validate(matrix)
    if violations:
        raise ValidationError(violations)
    return matrix


def validate(matrix: TransitionMatrix) -> list[Violation]:
    """Check every structural invariant; empty list means valid.

    Reported rules: entry_range (an entry outside [0, 1]), row_sum
    (a row away from 1 beyond tolerance), structural_zero (a forbidden
    permit transition carries mass) and absorbing_row (the permits row
    is not exactly [0, 0, 0, 0, 1]).
    """
    m = matrix.entries
    violations: list[Violation] = []
    if not np.all(np.isfinite(m)):
        violations.append(Violation("matrix_finite", -1, None, float("nan")))
        return violations
    for row in range(N_CATEGORIES):
        for col in range(N_CATEGORIES):
            v = m[row, col]
            if v < 0.0 or v > 1.0:
                violations.append(
                    Violation("entry_range", row, col, float(max(-v, v - 1.0)))
                )
    for row, col in STRUCTURAL_ZEROS:
        if m[row, col] != 0.0:
            violations.append(Violation("structural_zero", row, col, float(abs(m[row, col]))))
    absorbing = np.zeros(N_CATEGORIES)
    absorbing[OwnerCategory.PERMITS] = 1.0
    for col in range(N_CATEGORIES):
        if m[OwnerCategory.PERMITS, col] != absorbing[col]:
            violations.append(
                Violation(
                    "absorbing_row",
                    int(OwnerCategory.PERMITS),
                    col,
                    float(abs(m[OwnerCategory.PERMITS, col] - absorbing[col])),
                )
            )
    for row in range(N_CATEGORIES):
        dev = abs(m[row].sum() - 1.0)
        if dev > ROW_SUM_TOL:
            violations.append(Violation("row_sum", row, None, float(dev)))
    return violations


def step(state: StateVector, matrix: TransitionMatrix) -> StateVector:
    """One-year update: the row vector of counts times the matrix.

    Total lots are conserved and the permits count cannot decrease; the
    returned state carries `year + 1`.
    """
    violations = validate(matrix)
    if violations:
        raise ValidationError(violations)
    if state.year != matrix.year:
        raise ValueError(
            f"state year {state.year} does not match matrix year {matrix.year}"
        )
    return StateVector(state.counts @ matrix.entries, state.year + 1)


def annual_permits(prev: StateVector, nxt: StateVector) -> float:
    """Permits issued during the year between two consecutive states."""
    if nxt.year != prev.year + 1:
        raise ValueError(
            f"states are not consecutive: {prev.year} then {nxt.year}"
        )
    issued = nxt.permits - prev.permits
    if issued < 0:
        raise ValueError(f"permits decreased from {prev.permits} to {nxt.permits}")
    return issued


def buildout_pct(state: StateVector, platted: int) -> float:
    """Fraction of platted lots permitted: permits / platted, in [0, 1]."""
    if platted <= 0:
        raise ValueError(f"platted must be positive, got {platted}")
    if abs(state.total - platted) > CONSERVATION_RTOL * max(1.0, float(platted)):
        raise ValueError(
            f"state total {state.total} does not match platted {platted}"
        )
    return state.permits / platted
