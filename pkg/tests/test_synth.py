import numpy as np
import pytest

from lotflow.core import OwnerCategory, StateVector, TransitionMatrix, from_free_parameters
from lotflow.ingest import annual_observations, parse_transactions
from lotflow.synth import (
    SynthSpec,
    empirical_transitions,
    expected_trajectory,
    simulate,
)


def mixing_matrix(year: int = 0) -> TransitionMatrix:
    """A well-mixed valid matrix with moderate permit flow."""
    free = np.array(
        [
            0.05, 0.10, 0.04,          # F -> B, P, A
            0.03, 0.06, 0.02, 0.20,    # B -> F, P, A, R
            0.02, 0.05, 0.03, 0.12,    # P -> F, B, A, R
            0.04, 0.05, 0.06,          # A -> F, B, P
        ]
    )
    return from_free_parameters(free, year)


def small_spec(**overrides) -> SynthSpec:
    kwargs = dict(
        platted=200,
        initial_counts=(50, 40, 60, 50, 0),
        base_matrix=mixing_matrix(),
        first_year=2000,
        seed=7,
    )
    kwargs.update(overrides)
    return SynthSpec(**kwargs)


class TestSimulate:
    def test_identity_matrix_freezes_everything(self):
        spec = small_spec(base_matrix=TransitionMatrix(np.eye(5), 0))
        result = simulate(spec, 5)
        assert all(len(lot.transactions) == 1 for lot in result.lots)
        assert all(lot.permit_year is None for lot in result.lots)
        for obs in result.observations:
            assert np.array_equal(obs.category_counts.counts, [50, 40, 60, 50, 0])
            assert obs.permits_issued == 0.0

    def test_certain_permit_from_prospects(self):
        free = np.zeros(14)
        free[10] = 1.0  # P -> R with certainty
        spec = SynthSpec(
            platted=30,
            initial_counts=(0, 0, 30, 0, 0),
            base_matrix=from_free_parameters(free),
            first_year=2000,
            seed=1,
        )
        result = simulate(spec, 3)
        assert all(lot.permit_year == 2001 for lot in result.lots)
        assert result.observations[1].permits_issued == 30.0
        assert result.observations[1].category_counts.permits == 30.0

    def test_empirical_frequencies_close_to_truth(self):
        spec = small_spec(platted=2000, initial_counts=(500, 400, 600, 500, 0), seed=11)
        result = simulate(spec, 10)
        counts, freqs = empirical_transitions(result.labels)
        truth = spec.base_matrix.entries
        for row in range(4):
            n = counts[row].sum()
            assert n > 100
            for col in range(5):
                p = truth[row, col]
                se = np.sqrt(max(p * (1 - p), 1e-12) / n)
                assert abs(freqs[row, col] - p) <= 3 * se + 1e-12, (row, col)

    def test_deterministic_given_seed(self):
        a = simulate(small_spec(), 5)
        b = simulate(small_spec(), 5)
        assert np.array_equal(a.labels, b.labels)
        assert a.lots == b.lots

    def test_observation_tallies_match_labels(self):
        result = simulate(small_spec(), 6)
        for t, obs in enumerate(result.observations):
            tally = np.bincount(result.labels[:, t], minlength=5)
            assert np.array_equal(obs.category_counts.counts, tally)

    def test_initial_permits_are_preserved(self):
        spec = small_spec(initial_counts=(50, 40, 60, 30, 20))
        result = simulate(spec, 3)
        assert result.observations[0].category_counts.permits == 20.0
        assert result.observations[0].permits_issued == 0.0


class TestRoundTrip:
    def test_ingestion_reproduces_observations_exactly(self, tmp_path):
        from lotflow.fileio import write_transactions_csv

        spec = small_spec(platted=600, initial_counts=(150, 120, 180, 150, 0), seed=3)
        result = simulate(spec, 8)
        path = tmp_path / "transactions.csv"
        write_transactions_csv(path, result.lots)
        lots = parse_transactions(path)
        obs = annual_observations(lots, 2000, 2008, platted=600)
        assert len(obs) == len(result.observations)
        for mine, truth in zip(obs, result.observations):
            assert mine.year == truth.year
            assert np.array_equal(
                mine.category_counts.counts, truth.category_counts.counts
            ), mine.year
            assert mine.permits_issued == truth.permits_issued
            assert mine.custom_ratio == truth.custom_ratio
            assert mine.residual == 0.0


class TestExpectedTrajectory:
    def test_identity_constant(self):
        spec = small_spec(base_matrix=TransitionMatrix(np.eye(5), 0))
        states = expected_trajectory(spec, 4)
        for s in states:
            assert np.array_equal(s.counts, [50, 40, 60, 50, 0])

    def test_one_step_hand_multiply(self):
        m = np.eye(5)
        m[1, 1] = 0.5
        m[1, 4] = 0.5
        spec = SynthSpec(
            platted=200,
            initial_counts=(10, 20, 30, 40, 100),
            base_matrix=TransitionMatrix(m, 0),
            first_year=2000,
        )
        states = expected_trajectory(spec, 1)
        assert np.allclose(states[1].counts, [10, 10, 30, 40, 110])

    def test_zero_lots(self):
        spec = SynthSpec(
            platted=0,
            initial_counts=(0, 0, 0, 0, 0),
            base_matrix=mixing_matrix(),
        )
        states = expected_trajectory(spec, 3)
        assert all(s.total == 0.0 for s in states)

    def test_law_of_large_numbers(self):
        losses = []
        for platted in (500, 5000):
            counts = (platted // 4, platted // 4, platted // 4, platted - 3 * (platted // 4), 0)
            spec = SynthSpec(
                platted=platted,
                initial_counts=counts,
                base_matrix=mixing_matrix(),
                seed=19,
            )
            result = simulate(spec, 8)
            expected = expected_trajectory(spec, 8)
            worst = 0.0
            for obs, exp in zip(result.observations, expected):
                diff = np.abs(obs.category_counts.counts - exp.counts) / platted
                worst = max(worst, float(diff.max()))
            losses.append(worst)
        assert losses[1] < losses[0]


class TestRegimeChanges:
    def test_matrix_for_switches(self):
        early = mixing_matrix()
        late = TransitionMatrix(np.eye(5), 0)
        spec = small_spec(regime_changes=((2005, late),))
        assert spec.matrix_for(2004) is early or np.array_equal(
            spec.matrix_for(2004).entries, early.entries
        )
        assert np.array_equal(spec.matrix_for(2005).entries, np.eye(5))
        result = simulate(spec, 8)
        assert len(result.matrices) == 8
        assert np.array_equal(result.matrices[5].entries, np.eye(5))
        assert np.array_equal(result.matrices[4].entries, early.entries)
