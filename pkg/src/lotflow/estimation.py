"""Constrained estimation of yearly transition matrices.

One year of aggregate category counts gives five equations in fourteen
free transition probabilities, so the per-year system is under-determined.
Each year is solved as a regularized constrained least-squares problem:
minimize the one-step fit error plus a Tikhonov pull toward the previous
year's matrix, over row-stochastic matrices with structural zeros,
scenario bounds and a soft custom-home-share constraint.

The solver is projected gradient descent on the 14 free parameters with
per-row Euclidean projection onto the box-intersected simplex (the
diagonal absorbs the slack). It uses no randomness: identical inputs
produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lotflow.core import (
    FREE_PARAMS,
    OwnerCategory,
    StateVector,
    TransitionMatrix,
    from_free_parameters,
    raw_entries_from_free,
)
from lotflow.ingest import AnnualObservation

#: Free-parameter positions grouped by matrix row.
_ROW_SLICES = ((0, 3), (3, 7), (7, 11), (11, 14))
_FREE_ROWS = np.array([rc[0] for rc in FREE_PARAMS])
_FREE_COLS = np.array([rc[1] for rc in FREE_PARAMS])
_B_TO_R = FREE_PARAMS.index((1, 4))
_P_TO_R = FREE_PARAMS.index((2, 4))

#: Weight of the custom-share penalty relative to the data term.
RATIO_PENALTY_WEIGHT = 10.0

#: Solver stopping rule: max free-parameter change per iteration.
CONVERGENCE_TOL = 1e-8
MAX_ITERATIONS = 10_000

#: Bound hits tighter than this are reported as active constraints.
ACTIVE_BOUND_TOL = 1e-9


class InfeasibleError(ValueError):
    """The scenario bounds admit no row-stochastic matrix."""

    def __init__(self, rows: list[int], detail: str, year: int | None = None):
        self.rows = rows
        self.detail = detail
        self.year = year
        prefix = f"year {year}: " if year is not None else ""
        super().__init__(f"{prefix}infeasible bounds on row(s) {rows}: {detail}")


@dataclass(frozen=True)
class BoundRule:
    """Lower/upper bound on one free transition, optionally year-ranged."""

    from_cat: OwnerCategory
    to_cat: OwnerCategory
    lo: float
    hi: float
    year_start: int | None = None
    year_end: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "from_cat", OwnerCategory(self.from_cat))
        object.__setattr__(self, "to_cat", OwnerCategory(self.to_cat))
        if (self.from_cat, self.to_cat) not in FREE_PARAMS:
            raise ValueError(
                f"({self.from_cat.code}->{self.to_cat.code}) is not a free transition"
            )
        if not (0.0 <= self.lo <= self.hi <= 1.0):
            raise ValueError(f"bounds must satisfy 0 <= lo <= hi <= 1, got [{self.lo}, {self.hi}]")
        if (
            self.year_start is not None
            and self.year_end is not None
            and self.year_start > self.year_end
        ):
            raise ValueError("year_start after year_end")

    def applies_to(self, year: int) -> bool:
        if self.year_start is not None and year < self.year_start:
            return False
        if self.year_end is not None and year > self.year_end:
            return False
        return True

    def overlaps(self, other: "BoundRule") -> bool:
        lo1 = self.year_start if self.year_start is not None else -(10**9)
        hi1 = self.year_end if self.year_end is not None else 10**9
        lo2 = other.year_start if other.year_start is not None else -(10**9)
        hi2 = other.year_end if other.year_end is not None else 10**9
        return lo1 <= hi2 and lo2 <= hi1


@dataclass(frozen=True)
class ConstraintScenario:
    """Bound rules plus the estimation knobs for one scenario.

    `lam` is the Tikhonov weight; None defers to 0.1 x total lots at
    solve time. `ratio_tol` is the allowed deviation of the implied
    custom-home share before the penalty engages.
    """

    rules: tuple[BoundRule, ...] = ()
    ratio_tol: float = 0.1
    lam: float | None = None

    def __post_init__(self) -> None:
        if self.ratio_tol < 0:
            raise ValueError("ratio_tol must be >= 0")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        by_transition: dict[tuple[int, int], list[BoundRule]] = {}
        for rule in self.rules:
            by_transition.setdefault((rule.from_cat, rule.to_cat), []).append(rule)
        for (f, t), rules in by_transition.items():
            for i in range(len(rules)):
                for j in range(i + 1, len(rules)):
                    if rules[i].overlaps(rules[j]):
                        raise ValueError(
                            f"overlapping year ranges for "
                            f"{OwnerCategory(f).code}->{OwnerCategory(t).code}"
                        )

    def bounds_for(self, year: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-free-parameter [lo, hi] arrays effective in `year`."""
        lo = np.zeros(len(FREE_PARAMS))
        hi = np.ones(len(FREE_PARAMS))
        for rule in self.rules:
            if rule.applies_to(year):
                k = FREE_PARAMS.index((rule.from_cat, rule.to_cat))
                lo[k] = rule.lo
                hi[k] = rule.hi
        return lo, hi

    def widened(self, factor: float) -> "ConstraintScenario":
        """Each bound interval scaled about its midpoint by `factor`."""
        if factor < 1.0:
            raise ValueError("relax factor must be >= 1")
        rules = []
        for rule in self.rules:
            mid = 0.5 * (rule.lo + rule.hi)
            half = 0.5 * (rule.hi - rule.lo) * factor
            rules.append(
                BoundRule(
                    rule.from_cat,
                    rule.to_cat,
                    max(0.0, mid - half),
                    min(1.0, mid + half),
                    rule.year_start,
                    rule.year_end,
                )
            )
        return ConstraintScenario(tuple(rules), self.ratio_tol, self.lam)


def scenario_from_dict(raw: dict) -> ConstraintScenario:
    """Build a scenario from its JSON form.

    Expected shape: {"bounds": [{"from": "B", "to": "R", "lo": .., "hi": ..,
    "year_start": .., "year_end": ..}, ...], "lambda": .., "ratio_tol": ..}
    with year bounds optional.
    """
    rules = []
    for entry in raw.get("bounds", []):
        rules.append(
            BoundRule(
                from_cat=OwnerCategory.from_code(str(entry["from"])),
                to_cat=OwnerCategory.from_code(str(entry["to"])),
                lo=float(entry["lo"]),
                hi=float(entry["hi"]),
                year_start=entry.get("year_start"),
                year_end=entry.get("year_end"),
            )
        )
    return ConstraintScenario(
        rules=tuple(rules),
        ratio_tol=float(raw.get("ratio_tol", 0.1)),
        lam=(float(raw["lambda"]) if raw.get("lambda") is not None else None),
    )


def scenario_to_dict(scenario: ConstraintScenario) -> dict:
    return {
        "bounds": [
            {
                "from": r.from_cat.code,
                "to": r.to_cat.code,
                "lo": r.lo,
                "hi": r.hi,
                "year_start": r.year_start,
                "year_end": r.year_end,
            }
            for r in scenario.rules
        ],
        "ratio_tol": scenario.ratio_tol,
        "lambda": scenario.lam,
    }


@dataclass(frozen=True)
class ActiveBound:
    """A scenario bound sitting at its limit in the solution."""

    from_cat: OwnerCategory
    to_cat: OwnerCategory
    limit: str  # "lo" or "hi"
    value: float

    def __str__(self) -> str:
        return f"{self.from_cat.code}->{self.to_cat.code}@{self.limit}={self.value:g}"


@dataclass(frozen=True, eq=False)
class EstimationResult:
    """Matrices for each historical step plus fit diagnostics."""

    matrices: tuple[TransitionMatrix, ...]
    residuals: tuple[float, ...]
    active_constraints: tuple[tuple[ActiveBound, ...], ...]


def custom_ratio_constraint(
    x_t: StateVector, matrix: TransitionMatrix, ratio: float, tol: float
) -> float:
    """Violation magnitude of the custom-home-share constraint.

    The custom share implied by the matrix is the prospect permit flow
    over the total permit flow. Returns how far the share sits outside
    the +/- tol band around `ratio` (0 when inside, or when there is no
    permit flow at all).
    """
    custom_flow = x_t.count(OwnerCategory.PROSPECTS) * matrix.entries[2, 4]
    spec_flow = x_t.count(OwnerCategory.BUILDERS) * matrix.entries[1, 4]
    total = custom_flow + spec_flow
    if total <= 0:
        return 0.0
    return max(0.0, abs(custom_flow / total - ratio) - tol)


def _pad_rows(values: np.ndarray, pad_value: float) -> np.ndarray:
    """14 free parameters as a (4, 4) array, short rows padded."""
    out = np.full((4, 4), pad_value)
    for row, (a, b) in enumerate(_ROW_SLICES):
        out[row, : b - a] = values[a:b]
    return out


def _unpad_rows(padded: np.ndarray) -> np.ndarray:
    out = np.empty(len(FREE_PARAMS))
    for row, (a, b) in enumerate(_ROW_SLICES):
        out[a:b] = padded[row, : b - a]
    return out


def project_free_parameters(
    values: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Euclidean projection of free parameters onto the feasible set.

    Feasible per row: lo <= u <= hi and sum(u) <= 1, the diagonal taking
    the leftover mass. Rows whose clipped values already fit are only
    clipped; otherwise the unique shift that lands the row sum on 1 is
    found by bisection (deterministic, ~1e-16 accuracy).
    """
    y = _pad_rows(np.asarray(values, dtype=float), 0.0)
    lo_p = _pad_rows(lo, 0.0)
    hi_p = _pad_rows(hi, 0.0)
    v = np.clip(y, lo_p, hi_p)
    sums = v.sum(axis=1)
    over = sums > 1.0
    if np.any(over):
        mu_lo = np.zeros(4)
        mu_hi = np.max(y - lo_p, axis=1)
        for _ in range(64):
            mid = 0.5 * (mu_lo + mu_hi)
            g = np.clip(y - mid[:, None], lo_p, hi_p).sum(axis=1)
            too_big = g > 1.0
            mu_lo = np.where(too_big, mid, mu_lo)
            mu_hi = np.where(too_big, mu_hi, mid)
        shifted = np.clip(y - mu_hi[:, None], lo_p, hi_p)
        v = np.where(over[:, None], shifted, v)
    return _unpad_rows(v)


def check_feasibility(lo: np.ndarray, hi: np.ndarray, year: int | None = None) -> None:
    """Raise InfeasibleError when a row's lower bounds exceed the simplex."""
    bad_rows = []
    details = []
    for row, (a, b) in enumerate(_ROW_SLICES):
        total = lo[a:b].sum()
        if total > 1.0 + 1e-12:
            bad_rows.append(row)
            details.append(f"row {row} ({OwnerCategory(row).code}) lower bounds sum to {total:.6g}")
    if bad_rows:
        raise InfeasibleError(bad_rows, "; ".join(details), year)


_assemble_entries = raw_entries_from_free


class _Objective:
    """Fit error + Tikhonov pull + soft custom-share penalty."""

    def __init__(
        self,
        x: np.ndarray,
        y: np.ndarray,
        lam: float,
        prior_entries: np.ndarray,
        ratio: float | None,
        ratio_tol: float,
    ):
        self.x = x
        self.y = y
        self.lam = lam
        self.prior = prior_entries
        self.ratio = ratio
        self.ratio_tol = ratio_tol
        self.scale = float(x.sum())
        self.penalty_weight = RATIO_PENALTY_WEIGHT

    def _ratio_violation(self, entries: np.ndarray) -> tuple[float, float, float, float]:
        """(signed deviation past tol, custom flow, spec flow, total)."""
        custom = self.x[2] * entries[2, 4]
        spec = self.x[1] * entries[1, 4]
        total = custom + spec
        if self.ratio is None or total <= 0:
            return 0.0, custom, spec, total
        dev = custom / total - self.ratio
        excess = abs(dev) - self.ratio_tol
        if excess <= 0:
            return 0.0, custom, spec, total
        return float(np.sign(dev)) * excess, custom, spec, total

    def value(self, values: np.ndarray) -> float:
        entries = _assemble_entries(values)
        r = self.x @ entries - self.y
        total = float(r @ r)
        diff = entries - self.prior
        total += self.lam * float((diff * diff).sum())
        signed, *_ = self._ratio_violation(entries)
        if signed != 0.0:
            total += self.penalty_weight * (self.scale * abs(signed)) ** 2
        return total

    def gradient(self, values: np.ndarray) -> np.ndarray:
        entries = _assemble_entries(values)
        r = self.x @ entries - self.y
        # d/du_(i,j) with the diagonal absorbing: moves r_j up, r_i down.
        grad = 2.0 * self.x[_FREE_ROWS] * (r[_FREE_COLS] - r[_FREE_ROWS])
        diff = entries - self.prior
        grad += 2.0 * self.lam * (
            diff[_FREE_ROWS, _FREE_COLS] - diff[_FREE_ROWS, _FREE_ROWS]
        )
        signed, custom, spec, total = self._ratio_violation(entries)
        if signed != 0.0:
            coeff = 2.0 * self.penalty_weight * self.scale**2 * signed
            grad[_P_TO_R] += coeff * (spec / total**2) * self.x[2]
            grad[_B_TO_R] += coeff * (-custom / total**2) * self.x[1]
        return grad


def estimate_year(
    x_t: StateVector,
    x_next: StateVector,
    scenario: ConstraintScenario,
    prior: TransitionMatrix | None = None,
    custom_ratio: float | None = None,
) -> TransitionMatrix:
    """One year's transition matrix by projected gradient descent.

    Minimizes |x_t P - x_next|^2 + lam * |P - prior|_F^2 over the
    feasible set. Without a prior, the pull is toward the maximally
    diagonal feasible matrix (every free parameter at its lower bound).
    The optional `custom_ratio` engages the soft custom-share penalty.
    """
    if x_next.year != x_t.year + 1:
        raise ValueError(
            f"states are not consecutive: {x_t.year} then {x_next.year}"
        )
    if abs(x_t.total - x_next.total) > 1e-9 * max(1.0, x_t.total):
        raise ValueError(
            f"total lots differ between years: {x_t.total} vs {x_next.total}"
        )
    if x_next.permits < x_t.permits:
        raise ValueError("permits may not decrease between years")

    year = x_t.year
    lo, hi = scenario.bounds_for(year)
    check_feasibility(lo, hi, year)

    lam = scenario.lam if scenario.lam is not None else 0.1 * x_t.total
    if prior is not None:
        prior_entries = prior.entries
        start = prior.free_values()
    else:
        prior_entries = _assemble_entries(lo.copy())
        start = lo.copy()

    objective = _Objective(
        x_t.counts, x_next.counts, lam, prior_entries, custom_ratio, scenario.ratio_tol
    )
    u = project_free_parameters(start, lo, hi)
    value = objective.value(u)
    grad = objective.gradient(u)
    # Barzilai-Borwein steps with a monotone halving safeguard; the
    # curvature-based seed keeps the very first move stable.
    step_size = 1.0 / max(1.0, 4.0 * (float(x_t.counts @ x_t.counts) + lam))
    for _ in range(MAX_ITERATIONS):
        accepted = False
        t = step_size
        for _ in range(80):
            candidate = project_free_parameters(u - t * grad, lo, hi)
            cand_value = objective.value(candidate)
            if cand_value < value:
                accepted = True
                break
            t *= 0.5
            if t < 1e-20:
                break
        if not accepted:
            break
        new_grad = objective.gradient(candidate)
        du = candidate - u
        dg = new_grad - grad
        curvature = float(du @ dg)
        if curvature > 1e-30:
            step_size = min(max(float(du @ du) / curvature, 1e-12), 1e6)
        else:
            step_size = min(t * 2.0, 1e6)
        delta = float(np.max(np.abs(du)))
        u = candidate
        value = cand_value
        grad = new_grad
        if delta < CONVERGENCE_TOL:
            break
    return from_free_parameters(u, year)


def active_scenario_bounds(
    matrix: TransitionMatrix, scenario: ConstraintScenario
) -> tuple[ActiveBound, ...]:
    """Scenario bounds the solution sits on (within tolerance)."""
    values = matrix.free_values()
    active = []
    for rule in scenario.rules:
        if not rule.applies_to(matrix.year):
            continue
        k = FREE_PARAMS.index((rule.from_cat, rule.to_cat))
        if abs(values[k] - rule.lo) <= ACTIVE_BOUND_TOL:
            active.append(ActiveBound(rule.from_cat, rule.to_cat, "lo", rule.lo))
        elif abs(values[k] - rule.hi) <= ACTIVE_BOUND_TOL:
            active.append(ActiveBound(rule.from_cat, rule.to_cat, "hi", rule.hi))
    return tuple(active)


def estimate_sequence(
    observations: list[AnnualObservation],
    scenario: ConstraintScenario,
    initial_prior: TransitionMatrix | None = None,
) -> EstimationResult:
    """Chained yearly estimation across consecutive observations.

    Each year's solution becomes the next year's prior, which encodes
    the temporal-smoothness assumption that resolves the per-year
    under-determination. `initial_prior` anchors the first year (e.g. a
    matrix of observed one-hop sale frequencies); without it the first
    year pulls toward the maximally diagonal feasible matrix.
    """
    if len(observations) < 2:
        raise ValueError("need at least 2 observations")
    years = [o.year for o in observations]
    if years != list(range(years[0], years[0] + len(years))):
        raise ValueError(f"observation years are not consecutive: {years}")

    matrices: list[TransitionMatrix] = []
    residuals: list[float] = []
    active: list[tuple[ActiveBound, ...]] = []
    prior: TransitionMatrix | None = initial_prior
    for prev, nxt in zip(observations, observations[1:]):
        x_t = prev.category_counts
        x_next = nxt.category_counts
        try:
            matrix = estimate_year(
                x_t, x_next, scenario, prior=prior, custom_ratio=prev.custom_ratio
            )
        except InfeasibleError as exc:
            raise InfeasibleError(exc.rows, exc.detail, year=prev.year) from exc
        matrices.append(matrix)
        residuals.append(float(np.linalg.norm(x_t.counts @ matrix.entries - x_next.counts)))
        active.append(active_scenario_bounds(matrix, scenario))
        prior = matrix
    return EstimationResult(tuple(matrices), tuple(residuals), tuple(active))
