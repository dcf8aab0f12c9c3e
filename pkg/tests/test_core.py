import numpy as np
import pytest

from lotflow.core import (
    FREE_PARAMS,
    OwnerCategory,
    StateVector,
    TransitionMatrix,
    ValidationError,
    annual_permits,
    buildout_pct,
    from_free_parameters,
    step,
    validate,
)

from conftest import random_matrix, random_state


def identity_matrix(year: int = 0) -> TransitionMatrix:
    return TransitionMatrix(np.eye(5), year)


class TestCategories:
    def test_canonical_order(self):
        assert [c.value for c in OwnerCategory] == [0, 1, 2, 3, 4]
        assert OwnerCategory.PERMITS == 4

    def test_codes_roundtrip(self):
        for cat in OwnerCategory:
            assert OwnerCategory.from_code(cat.code) is cat
        assert OwnerCategory.from_code("builders") is OwnerCategory.BUILDERS
        with pytest.raises(ValueError):
            OwnerCategory.from_code("X")

    def test_free_params_shape(self):
        assert len(FREE_PARAMS) == 14
        rows = [rc[0] for rc in FREE_PARAMS]
        assert rows.count(0) == 3 and rows.count(3) == 3
        assert rows.count(1) == 4 and rows.count(2) == 4
        for r, c in FREE_PARAMS:
            assert r != c
            assert (r, c) not in ((0, 4), (3, 4))


class TestValidate:
    def test_identity_is_valid(self):
        assert validate(identity_matrix()) == []

    def test_structural_zero_violation(self):
        m = np.eye(5)
        m[0, 0] = 0.9
        m[0, 4] = 0.1
        violations = validate(TransitionMatrix(m, 0))
        assert any(v.rule == "structural_zero" and (v.row, v.col) == (0, 4) for v in violations)

    def test_row_sum_violation_magnitude(self):
        m = np.eye(5)
        m[1, 1] = 0.9
        (violation,) = validate(TransitionMatrix(m, 0))
        assert violation.rule == "row_sum"
        assert violation.row == 1
        assert violation.deviation == pytest.approx(0.1)

    def test_absorbing_row_required(self):
        m = np.eye(5)
        m[4, 4] = 0.5
        m[4, 0] = 0.5
        rules = {v.rule for v in validate(TransitionMatrix(m, 0))}
        assert "absorbing_row" in rules

    def test_entry_range(self):
        m = np.eye(5)
        m[0, 1] = -0.25
        m[0, 0] = 1.25
        rules = {v.rule for v in validate(TransitionMatrix(m, 0))}
        assert "entry_range" in rules

    def test_validate_accepts_iff_step_accepts(self, rng):
        state = random_state(rng)
        good = random_matrix(rng)
        assert validate(good) == []
        step(state, good)
        bad_entries = np.array(good.entries)
        bad_entries[2, 2] += 0.01
        bad = TransitionMatrix(bad_entries, 0)
        assert validate(bad) != []
        with pytest.raises(ValidationError):
            step(state, bad)


class TestStep:
    def test_identity_fixed_point(self):
        state = StateVector([10, 20, 30, 40, 100], 2000)
        out = step(state, identity_matrix(2000))
        assert np.array_equal(out.counts, state.counts)
        assert out.year == 2001

    def test_hand_multiplied_builder_permit(self):
        # x = [10,20,30,40,100], B row split half retain / half permit:
        # builders 20 -> 10 stay, 10 permitted.
        m = np.eye(5)
        m[1, 1] = 0.5
        m[1, 4] = 0.5
        out = step(StateVector([10, 20, 30, 40, 100], 0), TransitionMatrix(m, 0))
        assert np.allclose(out.counts, [10, 10, 30, 40, 110])

    def test_absorbing_state_fixed_point(self, rng):
        state = StateVector([0, 0, 0, 0, 200], 0)
        out = step(state, random_matrix(rng))
        assert np.allclose(out.counts, [0, 0, 0, 0, 200])

    def test_year_mismatch_rejected(self):
        with pytest.raises(ValueError, match="year"):
            step(StateVector([1, 1, 1, 1, 1], 1999), identity_matrix(2000))

    def test_invalid_matrix_names_invariant(self):
        m = np.eye(5)
        m[0, 4] = 0.1
        m[0, 0] = 0.9
        with pytest.raises(ValidationError, match="structural_zero"):
            step(StateVector([1, 1, 1, 1, 1], 0), TransitionMatrix(m, 0))

    def test_conservation_and_absorption_properties(self, rng):
        for _ in range(200):
            state = random_state(rng, total=float(rng.integers(100, 5000)))
            matrix = random_matrix(rng)
            out = step(state, matrix)
            assert abs(out.total - state.total) <= 1e-9 * state.total
            assert out.permits >= state.permits
            assert np.all(out.counts >= 0)

    def test_composition_matches_matrix_product(self, rng):
        for _ in range(50):
            state = random_state(rng)
            m1 = random_matrix(rng, year=0)
            m2 = random_matrix(rng, year=1)
            two_steps = step(step(state, m1), m2)
            direct = state.counts @ (m1.entries @ m2.entries)
            assert np.allclose(two_steps.counts, direct, rtol=1e-9)


class TestStateVector:
    def test_negative_count_rejected(self):
        with pytest.raises(ValidationError, match="state_nonnegative"):
            StateVector([1, -2, 3, 4, 5], 0)

    def test_wrong_dimension_rejected(self):
        with pytest.raises(ValidationError, match="state_dimension"):
            StateVector([1, 2, 3], 0)

    def test_counts_are_immutable(self):
        state = StateVector([1, 2, 3, 4, 5], 0)
        with pytest.raises(ValueError):
            state.counts[0] = 9.0


class TestAnnualPermits:
    def test_subtraction(self):
        prev = StateVector([10, 20, 30, 40, 100], 2000)
        nxt = StateVector([10, 10, 30, 40, 110], 2001)
        assert annual_permits(prev, nxt) == pytest.approx(10.0)

    def test_identical_states_zero(self):
        prev = StateVector([1, 2, 3, 4, 5], 0)
        nxt = StateVector([1, 2, 3, 4, 5], 1)
        assert annual_permits(prev, nxt) == 0.0

    def test_consistency_with_step(self):
        m = np.eye(5)
        m[1, 1] = 0.5
        m[1, 4] = 0.5
        prev = StateVector([10, 20, 30, 40, 100], 0)
        nxt = step(prev, TransitionMatrix(m, 0))
        assert annual_permits(prev, nxt) == pytest.approx(10.0)

    def test_non_consecutive_years_rejected(self):
        with pytest.raises(ValueError, match="consecutive"):
            annual_permits(StateVector([1, 2, 3, 4, 5], 0), StateVector([1, 2, 3, 4, 5], 2))


class TestBuildoutPct:
    def test_full_buildout(self):
        assert buildout_pct(StateVector([0, 0, 0, 0, 100], 0), 100) == 1.0

    def test_zero_buildout(self):
        assert buildout_pct(StateVector([25, 25, 25, 25, 0], 0), 100) == 0.0

    def test_partial(self):
        assert buildout_pct(StateVector([5, 4, 3, 5, 83], 0), 100) == pytest.approx(0.83)

    def test_platted_must_be_positive(self):
        with pytest.raises(ValueError, match="platted"):
            buildout_pct(StateVector([0, 0, 0, 0, 0], 0), 0)

    def test_sum_mismatch_rejected(self):
        with pytest.raises(ValueError, match="platted"):
            buildout_pct(StateVector([1, 1, 1, 1, 1], 0), 100)


class TestFreeParameters:
    def test_roundtrip(self, rng):
        matrix = random_matrix(rng)
        values = matrix.free_values()
        rebuilt = from_free_parameters(values, matrix.year)
        assert np.allclose(rebuilt.entries, matrix.entries, atol=1e-12)

    def test_zero_values_give_identity(self):
        assert np.array_equal(from_free_parameters(np.zeros(14)).entries, np.eye(5))

    def test_overfull_row_rejected(self):
        values = np.zeros(14)
        values[0] = 0.7
        values[1] = 0.7
        with pytest.raises(ValidationError):
            from_free_parameters(values)
