"""Probability smoothing, stochastic forecasting and Monte Carlo bands.

Historical transition-probability series are exponentially smoothed;
future matrices evolve each free parameter by blending a noisy draw
around the previous smoothed value back into the smoothing recursion,
then restoring row-stochasticity with a three-step normalization
(rescale, clip negatives, rescale). States propagate through the
forecast matrices, and confidence bands come from Monte Carlo replicates
whose parameters are perturbed in proportion to their size.

Replicates draw from per-index random substreams, so chunked or parallel
execution reproduces the sequential result bit for bit.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from lotflow.core import (
    FREE_PARAMS,
    N_CATEGORIES,
    OwnerCategory,
    ROW_SUM_TOL,
    StateVector,
    TransitionMatrix,
    ValidationError,
    annual_permits,
    raw_entries_from_free,
    step,
    validate,
)

_B_TO_R = FREE_PARAMS.index((1, 4))
_P_TO_R = FREE_PARAMS.index((2, 4))

#: Row sums at or below this are degenerate and fall back to retention.
DEGENERATE_ROW_SUM = 1e-12


@dataclass(frozen=True)
class ForecastSettings:
    """Knobs for smoothing, stochastic forecasting and Monte Carlo bands."""

    horizon: int
    alpha: float = 0.15
    noise_sd: float = 0.05
    scale_factor: float = 1.0
    mc_runs: int = 1000
    mc_sd_fraction: float = 0.20
    seed: int = 0
    history_window: int = 4

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.scale_factor < 0:
            raise ValueError("scale_factor must be >= 0")
        if self.mc_runs < 0:
            raise ValueError("mc_runs must be >= 0")
        if self.mc_sd_fraction < 0:
            raise ValueError("mc_sd_fraction must be >= 0")
        if self.history_window < 1:
            raise ValueError("history_window must be >= 1")


@dataclass(frozen=True)
class ProbabilitySeries:
    """One free transition probability across years, raw and smoothed."""

    from_cat: OwnerCategory
    to_cat: OwnerCategory
    years: tuple[int, ...]
    values: tuple[float, ...]
    smoothed: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.years) == len(self.values) == len(self.smoothed)):
            raise ValueError("years, values and smoothed must share an index")
        if self.smoothed and self.smoothed[0] != self.values[0]:
            raise ValueError("smoothing must start at the first raw value")


@dataclass(frozen=True)
class ForecastPoint:
    """Annual permits and buildout for one year, with optional 95% bands."""

    year: int
    phase: str  # "historical" or "forecast"
    permits: float
    buildout: float
    permits_lo: float | None = None
    permits_hi: float | None = None
    buildout_lo: float | None = None
    buildout_hi: float | None = None

    def __post_init__(self) -> None:
        if self.phase not in ("historical", "forecast"):
            raise ValueError(f"unknown phase {self.phase!r}")
        for lo, point, hi in (
            (self.permits_lo, self.permits, self.permits_hi),
            (self.buildout_lo, self.buildout, self.buildout_hi),
        ):
            if lo is not None and hi is not None and not (lo <= point <= hi):
                raise ValueError(f"band [{lo}, {hi}] must contain the point {point}")


@dataclass(frozen=True)
class ForecastSeries:
    points: tuple[ForecastPoint, ...]


def ema_smooth(values, alpha: float) -> np.ndarray:
    """Exponential smoothing: s[i] = alpha*v[i] + (1-alpha)*s[i-1]."""
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must be in (0, 1]")
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("values must be non-empty")
    out = np.empty_like(values)
    out[0] = values[0]
    for i in range(1, values.size):
        out[i] = alpha * values[i] + (1.0 - alpha) * out[i - 1]
    return out


def _row_is_valid(row: np.ndarray) -> bool:
    return bool(np.all(row >= 0.0) and abs(row.sum() - 1.0) <= ROW_SUM_TOL)


def normalize_rows(raw, year: int = 0) -> TransitionMatrix:
    """Three-step row normalization: rescale, clip negatives, rescale.

    Expects the permits row already absorbing and structural zeros
    already zero. Rows that are already valid pass through untouched,
    which makes the procedure exactly idempotent. A degenerate row (sum
    ~ 0 before or after clipping) falls back to full self-retention and
    records a warning.
    """
    entries = np.array(raw, dtype=float)
    if entries.shape != (N_CATEGORIES, N_CATEGORIES):
        raise ValueError(f"expected a 5x5 matrix, got {entries.shape}")
    absorbing = np.zeros(N_CATEGORIES)
    absorbing[OwnerCategory.PERMITS] = 1.0
    if not np.array_equal(entries[OwnerCategory.PERMITS], absorbing):
        raise ValueError("permits row must be absorbing before normalization")
    for r, c in ((0, 4), (3, 4)):
        if entries[r, c] != 0.0:
            raise ValueError(f"structural zero ({r},{c}) must be zero before normalization")

    for r in range(N_CATEGORIES - 1):
        row = entries[r]
        if _row_is_valid(row):
            continue
        total = row.sum()
        if total <= DEGENERATE_ROW_SUM:
            warnings.warn(f"degenerate row {r} (sum {total:.3g}); using self-retention")
            entries[r] = np.eye(N_CATEGORIES)[r]
            continue
        row = row / total
        row = np.maximum(row, 0.0)
        clipped_total = row.sum()
        if clipped_total <= DEGENERATE_ROW_SUM:
            warnings.warn(f"degenerate row {r} after clipping; using self-retention")
            entries[r] = np.eye(N_CATEGORIES)[r]
            continue
        entries[r] = row / clipped_total
    matrix = TransitionMatrix(entries, year)
    violations = validate(matrix)
    if violations:  # unreachable unless inputs are non-finite
        raise ValidationError(violations)
    return matrix


def _normalize_entries_batch(entries: np.ndarray) -> np.ndarray:
    """Vectorized three-step normalization over (..., 5, 5) entries.

    Same per-row arithmetic as normalize_rows, including the pass-
    through of already-valid rows, so unperturbed input comes back
    bit-identical.
    """
    out = np.array(entries, dtype=float)
    for r in range(N_CATEGORIES - 1):
        row = out[..., r, :]
        valid = (row >= 0.0).all(axis=-1) & (
            np.abs(row.sum(axis=-1) - 1.0) <= ROW_SUM_TOL
        )
        total = row.sum(axis=-1)
        degenerate = total <= DEGENERATE_ROW_SUM
        safe_total = np.where(degenerate, 1.0, total)
        scaled = row / safe_total[..., None]
        clipped = np.maximum(scaled, 0.0)
        clipped_total = clipped.sum(axis=-1)
        degenerate = degenerate | (clipped_total <= DEGENERATE_ROW_SUM)
        safe_clipped = np.where(degenerate, 1.0, clipped_total)
        normalized = clipped / safe_clipped[..., None]
        result = np.where(valid[..., None], row, normalized)
        result = np.where(degenerate[..., None], np.eye(N_CATEGORIES)[r], result)
        out[..., r, :] = result
    return out


def scale_permit_flows(matrix: TransitionMatrix, scale_factor: float) -> TransitionMatrix:
    """Scenario scaling of the permit-flow parameters (B->R, P->R).

    The removed or added mass is absorbed by the diagonal, then the
    rows are re-normalized, so a factor above 1 cannot push a row out
    of the simplex.
    """
    free = matrix.free_values()
    free[_B_TO_R] *= scale_factor
    free[_P_TO_R] *= scale_factor
    return normalize_rows(raw_entries_from_free(free), matrix.year)


def forecast_probabilities(
    last_smoothed: TransitionMatrix,
    settings: ForecastSettings,
    rng: np.random.Generator | int | None = None,
) -> list[TransitionMatrix]:
    """Stochastic forecast of transition matrices over the horizon.

    Each future year draws, per free parameter, a value around the
    previous smoothed one (sd = noise_sd) and blends it in with weight
    alpha; diagonals are recomputed from the row leftovers and the
    three-step normalization restores validity. The permit-flow scaling
    factor is applied once, to the starting matrix.
    """
    violations = validate(last_smoothed)
    if violations:
        raise ValidationError(violations)
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(settings.seed if rng is None else rng)
    start = scale_permit_flows(last_smoothed, settings.scale_factor)
    previous = start.free_values()
    matrices: list[TransitionMatrix] = []
    for h in range(settings.horizon):
        draws = rng.normal(loc=previous, scale=settings.noise_sd)
        # Incremental blend: exact fixed point when the draw equals the
        # previous value (noise_sd = 0).
        blended = previous + settings.alpha * (draws - previous)
        matrix = normalize_rows(
            raw_entries_from_free(blended), last_smoothed.year + 1 + h
        )
        previous = matrix.free_values()
        matrices.append(matrix)
    return matrices


def smooth_matrix_series(
    matrices: list[TransitionMatrix],
    alpha: float,
    window: int | None = None,
) -> tuple[list[ProbabilitySeries], list[TransitionMatrix]]:
    """Exponentially smooth each free-parameter series across years.

    Restricts to the trailing `window` years first when given. Returns
    the per-transition series and the re-assembled smoothed matrices.
    """
    if not matrices:
        raise ValueError("need at least one matrix")
    years = [m.year for m in matrices]
    if years != list(range(years[0], years[0] + len(years))):
        raise ValueError(f"matrix years are not consecutive: {years}")
    if window is not None:
        matrices = matrices[-window:]
        years = years[-window:]
    raw = np.array([m.free_values() for m in matrices])  # (T, 14)
    smoothed = np.empty_like(raw)
    for k in range(raw.shape[1]):
        smoothed[:, k] = ema_smooth(raw[:, k], alpha)
    series = [
        ProbabilitySeries(
            from_cat=OwnerCategory(r),
            to_cat=OwnerCategory(c),
            years=tuple(years),
            values=tuple(raw[:, k]),
            smoothed=tuple(smoothed[:, k]),
        )
        for k, (r, c) in enumerate(FREE_PARAMS)
    ]
    out_matrices = [
        normalize_rows(raw_entries_from_free(smoothed[t]), years[t])
        for t in range(len(years))
    ]
    return series, out_matrices


def forecast_states(
    x0: StateVector, matrices: list[TransitionMatrix]
) -> list[StateVector]:
    """Propagate the state through the forecast matrices, year by year."""
    states = []
    state = x0
    for matrix in matrices:
        state = step(state, matrix)
        states.append(state)
    return states


_FREE_ROWS = np.array([rc[0] for rc in FREE_PARAMS])
_FREE_COLS = np.array([rc[1] for rc in FREE_PARAMS])


def _replicate_paths(
    replicate_indices: range,
    base_entries: np.ndarray,
    base_free: np.ndarray,
    x0: StateVector,
    settings: ForecastSettings,
    seed_entropy: int,
    permits_out: np.ndarray,
    buildout_out: np.ndarray,
    platted: float,
) -> None:
    horizon = base_free.shape[0]
    for r in replicate_indices:
        rng = np.random.default_rng(np.random.SeedSequence(seed_entropy, spawn_key=(r,)))
        z = rng.standard_normal((horizon, len(FREE_PARAMS)))
        perturbed_free = base_free + (settings.mc_sd_fraction * base_free) * z
        perturbed = base_entries.copy()
        perturbed[:, _FREE_ROWS, _FREE_COLS] = perturbed_free
        normalized = _normalize_entries_batch(perturbed)
        counts = x0.counts
        prev_permits = counts[OwnerCategory.PERMITS]
        for h in range(horizon):
            counts = counts @ normalized[h]
            permits_out[r, h] = counts[OwnerCategory.PERMITS] - prev_permits
            buildout_out[r, h] = counts[OwnerCategory.PERMITS] / platted
            prev_permits = counts[OwnerCategory.PERMITS]


def monte_carlo(
    x0: StateVector,
    base_matrices: list[TransitionMatrix],
    settings: ForecastSettings,
    rng: int | None = None,
    platted: float | None = None,
    workers: int = 1,
) -> ForecastSeries:
    """Forecast with 95% Monte Carlo bands around the point propagation.

    Every replicate perturbs each free parameter of each year's matrix
    by a normal with sd = mc_sd_fraction times the parameter, re-
    normalizes, and propagates. Bands are the 2.5/97.5 percentiles of
    annual permits and buildout across replicates, widened if needed to
    contain the point forecast; with mc_runs = 0 the bands are omitted.
    """
    if platted is None:
        platted = x0.total
    if platted <= 0:
        raise ValueError("platted must be positive")
    seed_entropy = settings.seed if rng is None else rng

    states = forecast_states(x0, base_matrices)
    horizon = len(states)
    point_permits = []
    point_buildout = []
    prev = x0
    for state in states:
        point_permits.append(annual_permits(prev, state))
        point_buildout.append(state.permits / platted)
        prev = state

    if settings.mc_runs == 0 or horizon == 0:
        points = tuple(
            ForecastPoint(
                year=state.year,
                phase="forecast",
                permits=point_permits[h],
                buildout=point_buildout[h],
            )
            for h, state in enumerate(states)
        )
        return ForecastSeries(points)

    base_entries = np.array([m.entries for m in base_matrices])
    base_free = np.array([m.free_values() for m in base_matrices])
    permits_mc = np.empty((settings.mc_runs, horizon))
    buildout_mc = np.empty((settings.mc_runs, horizon))

    if workers <= 1:
        chunks = [range(settings.mc_runs)]
    else:
        bounds = np.linspace(0, settings.mc_runs, workers + 1, dtype=int)
        chunks = [range(a, b) for a, b in zip(bounds, bounds[1:]) if a < b]
    if len(chunks) == 1:
        _replicate_paths(
            chunks[0], base_entries, base_free, x0, settings, seed_entropy,
            permits_mc, buildout_mc, platted,
        )
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(
                    _replicate_paths, chunk, base_entries, base_free, x0, settings,
                    seed_entropy, permits_mc, buildout_mc, platted,
                )
                for chunk in chunks
            ]
            for future in futures:
                future.result()

    permits_band = np.percentile(permits_mc, [2.5, 97.5], axis=0)
    buildout_band = np.percentile(buildout_mc, [2.5, 97.5], axis=0)
    points = []
    for h, state in enumerate(states):
        points.append(
            ForecastPoint(
                year=state.year,
                phase="forecast",
                permits=point_permits[h],
                buildout=point_buildout[h],
                permits_lo=min(float(permits_band[0, h]), point_permits[h]),
                permits_hi=max(float(permits_band[1, h]), point_permits[h]),
                buildout_lo=min(float(buildout_band[0, h]), point_buildout[h]),
                buildout_hi=max(float(buildout_band[1, h]), point_buildout[h]),
            )
        )
    return ForecastSeries(tuple(points))
