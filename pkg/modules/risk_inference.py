"""Actual allocations from block records, inferred risk, and the per-miner fit.

A miner's observed allocation is the EWMA of its hourly block counts per chain,
scaled by each chain's difficulty so that it is proportional to hash rate.
Fitting searches the lookback grid and, for each lookback, 8 risk values
between the 25th and 75th percentiles of the inferred risk, keeping the cell
whose economic allocation best matches the observed one by the two-sample
Kolmogorov-Smirnov statistic.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats

from modules.market_data import HOUR, blocks_frame, rolling_expected_profit, rolling_volatility
from modules.portfolio_core import PIPELINE_POLICY, inferred_risk_batch, solve_max_profit_batch
from utils.config import settings
from utils.errors import ConfigError, EmptyInput, InsufficientHistory, UnknownMiner, ValidationError
from utils.logger import logger

DEFAULT_HALF_LIFE_HOURS = 10
RISK_CANDIDATES = 8
GRID_COLUMNS = ["lookback_hours", "risk", "ks", "mae", "clamped_hours", "samples"]


class KsMode(str, Enum):
    DISTRIBUTION = "distribution"
    PAIRED = "paired"


@dataclass(frozen=True)
class ActualAllocationSeries:
    """Observed hourly allocation of one miner; frame rows sum to 1."""
    miner_id: str
    frame: pd.DataFrame
    half_life_hours: float = DEFAULT_HALF_LIFE_HOURS


@dataclass(frozen=True)
class HashWeightSeries:
    """Hash weight per hour, in difficulty units per hour."""
    miner_id: str
    weights: pd.Series


@dataclass(frozen=True)
class MinerParams:
    miner_id: str
    lookback_hours: int
    risk: float
    fit_statistic: float = float("nan")
    mean_abs_error: float = float("nan")

    def __post_init__(self):
        if not self.risk > 0:
            raise ValidationError(f"{self.miner_id}: fitted risk must be > 0, got {self.risk}")

    def to_json(self):
        return {
            "miner": self.miner_id,
            "lookback_hours": int(self.lookback_hours),
            "risk": float(self.risk),
            "ks": float(self.fit_statistic),
            "mae": float(self.mean_abs_error),
        }


@dataclass(frozen=True)
class EconomicPath:
    """Hourly economic allocation for one (lookback, risk) pair; NaN rows lack history."""
    frame: pd.DataFrame
    risk_clamped_hours: int
    weights_clamped_hours: int
    singular_hours: int


def lookback_candidates():
    return sorted(set(range(4, 25, 6)) | set(range(24, 145, 24)) | set(range(168, 1345, 168)))


def ewma_decay(half_life_hours):
    if not half_life_hours > 0:
        raise ValidationError(f"half life must be > 0, got {half_life_hours}")
    return 2.0 ** (-1.0 / half_life_hours)


def _as_blocks_frame(blocks):
    return blocks if isinstance(blocks, pd.DataFrame) else blocks_frame(blocks)


def _block_rates(blocks, difficulties, miner_id, chains, half_life_hours):
    """EWMA block rate b_i(t) and difficulty D_i(t) per hour for one miner."""
    frame = _as_blocks_frame(blocks)
    mined = frame[frame["miner"] == miner_id]
    if mined.empty:
        raise UnknownMiner(f"no blocks for miner {miner_id!r}")
    if chains is None:
        chains = list(dict.fromkeys(frame["chain"]))

    start = int(frame["timestamp"].min()) // HOUR * HOUR
    end = int(frame["timestamp"].max()) // HOUR * HOUR
    hours = np.arange(start, end + HOUR, HOUR, dtype="int64")
    counts = (
        mined.assign(hour=mined["timestamp"] // HOUR * HOUR)
        .groupby(["hour", "chain"]).size()
        .unstack(fill_value=0)
        .reindex(index=hours, columns=chains, fill_value=0)
        .astype(float)
    )
    # a leading zero row makes b(t0) = (1 - alpha) c(t0)
    padded = pd.concat([pd.DataFrame(0.0, index=[start - HOUR], columns=chains), counts])
    rates = padded.ewm(alpha=1.0 - ewma_decay(half_life_hours), adjust=False).mean().iloc[1:]
    rates.index.name = "timestamp"

    difficulty = difficulties.at_hour_close(hours, chains, strict=False)
    difficulty.index = rates.index
    return rates, difficulty


def actual_allocation_series(blocks, difficulties, miner_id, half_life_hours=DEFAULT_HALF_LIFE_HOURS, chains=None):
    """Observed allocation w_i(t) = b_i(t) D_i(t) / sum_k b_k(t) D_k(t).

    Hours with no score, or before every chain has a difficulty, emit no sample.
    """
    rates, difficulty = _block_rates(blocks, difficulties, miner_id, chains, half_life_hours)
    scores = rates * difficulty
    total = scores.sum(axis=1, skipna=False)
    keep = np.isfinite(total) & (total > 0)
    allocation = scores[keep].div(total[keep], axis=0)
    logger.debug(f"{miner_id}: {int(keep.sum())} hourly allocation samples")
    return ActualAllocationSeries(miner_id, allocation, half_life_hours)


def hash_weight_series(blocks, difficulties, miner_id, half_life_hours=DEFAULT_HALF_LIFE_HOURS, chains=None):
    """Hash weight sum_i b_i(t) D_i(t)."""
    rates, difficulty = _block_rates(blocks, difficulties, miner_id, chains, half_life_hours)
    weights = (rates * difficulty).sum(axis=1, skipna=False).dropna()
    return HashWeightSeries(miner_id, weights)


def _market_moments(market, lookback_hours, cooldown_hours):
    return (
        rolling_expected_profit(market, lookback_hours),
        rolling_volatility(market, lookback_hours, cooldown_hours),
    )


def _actual_on_market(actual, market):
    """Actual allocations on the hours also present in the market series, in market chain order."""
    frame = actual.frame.reindex(columns=market.chains, fill_value=0.0)
    common = frame.index.intersection(market.frame.index)
    positions = market.frame.index.get_indexer(common)
    return frame.loc[common], positions


def infer_risk_series(actual, market, lookback_hours, cooldown_hours):
    """rho(t) = w_act(t)' Sigma(t) w_act(t) on every hour with enough history."""
    frame, positions = _actual_on_market(actual, market)
    sigma = rolling_volatility(market, lookback_hours, cooldown_hours)[positions]
    risk = pd.Series(inferred_risk_batch(frame.to_numpy(), sigma), index=frame.index, name="risk").dropna()
    if risk.empty:
        raise InsufficientHistory(
            f"{actual.miner_id}: no hours with {lookback_hours}h lookback and {cooldown_hours}h cooldown of history"
        )
    return risk


def inferred_root_risk_series(actual, market, lookback_hours, cooldown_hours):
    return np.sqrt(infer_risk_series(actual, market, lookback_hours, cooldown_hours)).rename("root_risk")


def _allocations_from_moments(mu, sigma, risk, chains, index, policy=PIPELINE_POLICY):
    outcome = solve_max_profit_batch(mu, sigma, risk, policy)
    weights = outcome.weights
    if outcome.singular.any():
        # singular rows fall back to equal weights
        weights[outcome.singular] = 1.0 / len(chains)
    frame = pd.DataFrame(weights, index=index, columns=chains)
    return frame, outcome


def economic_allocation_path(market, lookback_hours, risk, cooldown_hours, policy=PIPELINE_POLICY):
    """Economic allocation at every hour of the market series for one parameter pair."""
    mu, sigma = _market_moments(market, lookback_hours, cooldown_hours)
    frame, outcome = _allocations_from_moments(mu, sigma, risk, market.chains, market.frame.index, policy)
    singular = int(outcome.singular.sum())
    if singular:
        logger.warning(f"Equal-weight fallback on {singular} hour(s) with a singular volatility matrix")
    return EconomicPath(
        frame=frame,
        risk_clamped_hours=int(outcome.risk_clamped.sum()),
        weights_clamped_hours=int(outcome.weights_clamped.sum()),
        singular_hours=singular,
    )


def ks_statistic(xs, ys):
    """Two-sample Kolmogorov-Smirnov statistic sup |F_x - F_y|."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size == 0 or ys.size == 0:
        raise EmptyInput("KS statistic needs two non-empty samples")
    return float(stats.ks_2samp(xs, ys, method="asymp").statistic)


def paired_ks_statistic(economic, actual):
    """KS distance between the residuals economic - actual and a point mass at 0."""
    economic = np.asarray(economic, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if economic.shape != actual.shape:
        raise ValidationError(f"paired series differ in length: {economic.size} vs {actual.size}")
    return ks_statistic(economic - actual, [0.0])


def _fit_statistic(economic, actual, ks_mode):
    if KsMode(ks_mode) is KsMode.PAIRED:
        return paired_ks_statistic(economic, actual)
    return ks_statistic(economic, actual)


def risk_candidates(risk):
    """8 equally spaced values from the 25th to the 75th percentile, positive only."""
    low, high = np.percentile(np.asarray(risk, dtype=float), [25, 75])
    candidates = np.linspace(low, high, RISK_CANDIDATES)
    return candidates[candidates > 0]


def _evaluate_lookback(task):
    """All risk cells for one lookback; a pure function of its arguments."""
    actual_frame, market, lookback_hours, cooldown_hours, focus_chain, ks_mode = task
    rows = []
    chains = market.chains
    mu, sigma = _market_moments(market, lookback_hours, cooldown_hours)
    positions = market.frame.index.get_indexer(actual_frame.index)
    mu, sigma = mu[positions], sigma[positions]
    usable = np.isfinite(mu).all(axis=1) & np.isfinite(sigma).all(axis=(1, 2))
    if not usable.any():
        return rows
    mu, sigma = mu[usable], sigma[usable]
    observed = actual_frame.to_numpy()[usable]

    inferred = inferred_risk_batch(observed, sigma)
    if not np.any(inferred > 0):
        return rows
    focus = chains.index(focus_chain)
    actual_focus = observed[:, focus]
    for risk in risk_candidates(inferred):
        economic, outcome = _allocations_from_moments(mu, sigma, risk, chains, actual_frame.index[usable])
        economic_focus = economic.to_numpy()[:, focus]
        rows.append({
            "lookback_hours": lookback_hours,
            "risk": float(risk),
            "ks": _fit_statistic(economic_focus, actual_focus, ks_mode),
            "mae": float(np.mean(np.abs(economic_focus - actual_focus))),
            "clamped_hours": int(outcome.risk_clamped.sum() + outcome.weights_clamped.sum()),
            "samples": int(usable.sum()),
        })
    return rows


def evaluate_grid(actual, market, cooldown_hours, ks_mode=KsMode.DISTRIBUTION, focus_chain=None,
                  lookbacks=None, workers=1):
    """Scores every (lookback, risk) cell; one task per lookback.

    Lookbacks with no usable hour, or whose inferred risk is zero throughout,
    contribute no cells.
    """
    focus_chain = focus_chain or settings.focus_chain
    if focus_chain not in market.chains:
        raise ConfigError(f"focus chain {focus_chain!r} is not one of {market.chains}")
    ks_mode = KsMode(ks_mode)
    actual_frame, _ = _actual_on_market(actual, market)
    if actual_frame.empty:
        raise InsufficientHistory(f"{actual.miner_id}: actual allocations do not overlap the market series")

    tasks = [
        (actual_frame, market, lookback, cooldown_hours, focus_chain, ks_mode)
        for lookback in (lookbacks or lookback_candidates())
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_evaluate_lookback, tasks))
    else:
        results = [_evaluate_lookback(task) for task in tasks]

    grid = pd.DataFrame([row for rows in results for row in rows], columns=GRID_COLUMNS)
    logger.info(f"{actual.miner_id}: evaluated {len(grid)} grid cells over {len(tasks)} lookbacks")
    return grid


def select_best_cell(grid):
    """Smallest KS; ties go to the smaller lookback, then the smaller risk."""
    scored = grid.dropna(subset=["ks"])
    if scored.empty:
        raise InsufficientHistory("no grid cell could be evaluated")
    ordered = scored.sort_values(["ks", "lookback_hours", "risk"], kind="mergesort")
    return ordered.iloc[0]


def fit_parameters(actual, market, cooldown_hours, ks_mode=KsMode.DISTRIBUTION, focus_chain=None,
                   workers=1, min_history_days=None):
    """Fits (lookback, risk) for one miner by minimum KS over the full grid."""
    min_days = settings.min_history_days if min_history_days is None else min_history_days
    overlap = actual.frame.index.intersection(market.frame.index)
    if len(overlap) < min_days * 24:
        raise InsufficientHistory(
            f"{actual.miner_id}: {len(overlap)} overlapping hours, need {min_days * 24}"
        )
    grid = evaluate_grid(actual, market, cooldown_hours, ks_mode, focus_chain, workers=workers)
    best = select_best_cell(grid)
    params = MinerParams(
        miner_id=actual.miner_id,
        lookback_hours=int(best["lookback_hours"]),
        risk=float(best["risk"]),
        fit_statistic=float(best["ks"]),
        mean_abs_error=float(best["mae"]),
    )
    logger.info(
        f"{params.miner_id}: lookback {params.lookback_hours}h, risk {params.risk:.3g}, "
        f"KS {params.fit_statistic:.3f}, MAE {params.mean_abs_error:.3f}"
    )
    return params


def fit_results_payload(params):
    return [p.to_json() for p in params]
