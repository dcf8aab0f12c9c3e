"""Ground-truth synthetic market generator.

Simulates per-lot ownership trajectories from known transition matrices
and emits transaction records carrying evidence consistent with the
categorization rules, so the full ingest/estimate/forecast pipeline can
be validated against known truth.

Each lot draws from its own deterministic random substream, so parallel
and sequential simulation produce identical output.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from lotflow.core import (
    N_CATEGORIES,
    OwnerCategory,
    StateVector,
    TransitionMatrix,
    ValidationError,
    step,
    validate,
)
from lotflow.ingest import AnnualObservation, LotHistory, TransactionRecord


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic market.

    `initial_counts` are integer lots per category (sum = platted); the
    base matrix drives every year unless a regime change replaces it
    from a given year onward.
    """

    platted: int
    initial_counts: tuple[int, int, int, int, int]
    base_matrix: TransitionMatrix
    regime_changes: tuple[tuple[int, TransitionMatrix], ...] = ()
    first_year: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        counts = np.asarray(self.initial_counts)
        if counts.shape != (N_CATEGORIES,) or np.any(counts < 0):
            raise ValueError("initial_counts must be 5 non-negative integers")
        if int(counts.sum()) != self.platted:
            raise ValueError(
                f"initial_counts sum {int(counts.sum())} != platted {self.platted}"
            )
        for matrix in [self.base_matrix] + [m for _, m in self.regime_changes]:
            violations = validate(matrix)
            if violations:
                raise ValidationError(violations)

    def matrix_for(self, year: int) -> TransitionMatrix:
        """The true matrix governing the step from `year` to `year + 1`."""
        chosen = self.base_matrix
        for start, matrix in sorted(self.regime_changes):
            if year >= start:
                chosen = matrix
        return chosen


@dataclass(frozen=True, eq=False)
class SimResult:
    """Everything a simulation produced, including per-lot truth."""

    lots: list[LotHistory]
    observations: list[AnnualObservation]
    matrices: list[TransitionMatrix]
    labels: np.ndarray  # (n_lots, years + 1) int codes, -1 after data ends
    lot_ids: list[str]
    spec: SynthSpec


def _evidence(category: int, lot_idx: int, year: int) -> dict:
    """Buyer-evidence fields consistent with the categorization rules."""
    code = "fbpa"[category]
    buyer_id = f"{code}-{lot_idx:05d}-{year}"
    return {
        "buyer_id": buyer_id,
        "buyer_is_contractor": category == OwnerCategory.BUILDERS,
        "adjacent_to_owner_residence": category == OwnerCategory.ADJACENTS,
        "owner_lot_count": 2 + (lot_idx + year) % 3
        if category in (OwnerCategory.FLIPPERS, OwnerCategory.ADJACENTS)
        else 1,
    }


def _transaction(lot_id: str, lot_idx: int, year: int, category: int) -> TransactionRecord:
    ev = _evidence(category, lot_idx, year)
    return TransactionRecord(
        lot_id=lot_id,
        date=dt.date(year, 7, 1),
        instrument="deed",
        price=float(25_000 + (lot_idx % 50) * 1_000),
        **ev,
    )


def simulate(spec: SynthSpec, years: int) -> SimResult:
    """Sample every lot's trajectory for `years` one-year steps.

    Returns observations for `years + 1` calendar years (including the
    initial year) whose tallies equal the sampled trajectories exactly,
    plus the true matrix used for each step.
    """
    if years < 0:
        raise ValueError("years must be >= 0")
    n = spec.platted
    first = spec.first_year
    initial = np.repeat(np.arange(N_CATEGORIES), spec.initial_counts)
    labels = np.full((n, years + 1), -1, dtype=np.int8)
    labels[:, 0] = initial

    rows_by_step = [spec.matrix_for(first + t).entries for t in range(years)]
    lot_ids = [f"lot-{i:05d}" for i in range(n)]

    lots: list[LotHistory] = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i,)))
        cat = int(initial[i])
        lot_id = lot_ids[i]
        permit_year: int | None = None
        built_year: int | None = None
        if cat == OwnerCategory.PERMITS:
            # Pre-simulation permit, completed before the first year.
            permit_year = first - 2
            built_year = first - 1
            transactions = [_transaction(lot_id, i, first - 3, int(OwnerCategory.PROSPECTS))]
            labels[i, :] = OwnerCategory.PERMITS
        else:
            transactions = [_transaction(lot_id, i, first, cat)]
            for t in range(years):
                if cat == OwnerCategory.PERMITS:
                    labels[i, t + 1] = cat
                    continue
                nxt = int(rng.choice(N_CATEGORIES, p=rows_by_step[t][cat]))
                year = first + t + 1
                if nxt == OwnerCategory.PERMITS:
                    permit_year = year
                    built_year = year + 1
                elif nxt != cat:
                    transactions.append(_transaction(lot_id, i, year, nxt))
                cat = nxt
                labels[i, t + 1] = cat
        lots.append(
            LotHistory(
                lot_id=lot_id,
                transactions=tuple(transactions),
                permit_year=permit_year,
                built_year=built_year,
                adjacent_to_owner_residence=transactions[-1].adjacent_to_owner_residence,
                owner_lot_count=transactions[-1].owner_lot_count,
            )
        )

    observations = _observations_from_labels(spec, labels, years)
    matrices = [
        TransitionMatrix(rows_by_step[t], first + t) for t in range(years)
    ]
    return SimResult(lots, observations, matrices, labels, lot_ids, spec)


def _observations_from_labels(
    spec: SynthSpec, labels: np.ndarray, years: int
) -> list[AnnualObservation]:
    first = spec.first_year
    observations = []
    prev_permits = float(spec.initial_counts[OwnerCategory.PERMITS])
    for t in range(years + 1):
        year = first + t
        counts = np.bincount(labels[:, t], minlength=N_CATEGORIES).astype(float)
        permits = counts[OwnerCategory.PERMITS]
        issued = permits - prev_permits if t > 0 else 0.0
        prev_permits = permits
        # Houses completed this year were permitted the year before, by
        # the owner holding two years before.
        custom = 0
        total = 0
        if t >= 2:
            permitted_now = (labels[:, t - 1] == OwnerCategory.PERMITS) & (
                labels[:, t - 2] != OwnerCategory.PERMITS
            )
            for i in np.nonzero(permitted_now)[0]:
                total += 1
                if labels[i, t - 2] == OwnerCategory.PROSPECTS:
                    custom += 1
        observations.append(
            AnnualObservation(
                year=year,
                category_counts=StateVector(counts, year),
                permits_issued=float(issued),
                custom_ratio=(custom / total) if total else None,
                residual=0.0,
            )
        )
    return observations


def expected_trajectory(spec: SynthSpec, years: int) -> list[StateVector]:
    """Noise-free propagation of the initial counts through the true matrices.

    Returns `years + 1` states, including the initial one.
    """
    state = StateVector(np.asarray(spec.initial_counts, dtype=float), spec.first_year)
    states = [state]
    for t in range(years):
        matrix = TransitionMatrix(
            spec.matrix_for(spec.first_year + t).entries, spec.first_year + t
        )
        state = step(state, matrix)
        states.append(state)
    return states


def empirical_transitions(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (from, to) transition counts and row-wise frequencies.

    Frequencies of rows never observed are left at the identity row.
    """
    counts = np.zeros((N_CATEGORIES, N_CATEGORIES))
    for t in range(labels.shape[1] - 1):
        valid = labels[:, t] >= 0
        np.add.at(counts, (labels[valid, t], labels[valid, t + 1]), 1.0)
    freqs = np.eye(N_CATEGORIES)
    for row in range(N_CATEGORIES):
        total = counts[row].sum()
        if total > 0:
            freqs[row] = counts[row] / total
    return counts, freqs
