"""Aggregate allocations, baselines, inter-block-time prediction and metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from modules.market_data import HOUR, blocks_frame
from modules.portfolio_core import Allocation
from modules.risk_inference import economic_allocation_path
from utils.config import settings
from utils.errors import (
    ConfigError,
    DegenerateVariance,
    DimensionMismatch,
    EmptyInput,
    InsufficientHistory,
    NonPositiveInput,
    ZeroAllocationAfter,
    ZeroTotalWeight,
)
from utils.logger import logger

DEFAULT_PERIOD_HOURS = 6
DEFAULT_ROLLING_DAYS = 7
ALLOCATION_SUFFIX = "_allocation"
IBT_PREFIX = "ibt_change_"


@dataclass(frozen=True)
class AggregateSeries:
    """Hourly aggregate allocation (rows sum to 1) plus per-miner allocations."""
    frame: pd.DataFrame
    miners: Tuple[str, ...]
    per_miner: Optional[dict] = None

    @property
    def chains(self):
        return list(self.frame.columns)

    def to_csv_frame(self):
        """`timestamp,<chain>_allocation,...` then `<miner>.<chain>_allocation` columns."""
        out = self.frame.add_suffix(ALLOCATION_SUFFIX)
        for miner, frame in (self.per_miner or {}).items():
            out = out.join(frame.add_prefix(f"{miner}.").add_suffix(ALLOCATION_SUFFIX))
        out.index.name = "timestamp"
        return out


@dataclass(frozen=True)
class IbtPrediction:
    """Predicted IBT change ratio per chain and bucket, after the trailing rolling mean."""
    frame: pd.DataFrame
    period_hours: int = DEFAULT_PERIOD_HOURS
    rolling_window_days: int = DEFAULT_ROLLING_DAYS

    def predicted_ibt_seconds(self, targets):
        return self.frame.mul(np.asarray(targets, dtype=float), axis=1)

    def to_csv_frame(self):
        out = self.frame.add_prefix(IBT_PREFIX)
        out.index.name = "period_start"
        return out


def aggregate_allocation(per_miner):
    """Hash-weighted mean of allocations: w = sum_j w_j h_j / sum_j h_j."""
    if not per_miner:
        raise EmptyInput("no miners to aggregate")
    allocations = [np.asarray(getattr(w, "weights", w), dtype=float) for w, _ in per_miner]
    weights = np.array([h for _, h in per_miner], dtype=float)
    if len({a.size for a in allocations}) != 1:
        raise DimensionMismatch("allocations have different numbers of chains")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise NonPositiveInput("hash weights must be finite and >= 0")
    total = weights.sum()
    if not total > 0:
        raise ZeroTotalWeight("hash weights sum to zero")
    return Allocation(weights @ np.vstack(allocations) / total)


def _aggregate_frames(frames, weights, hours, require_all):
    """Vectorized hash-weighted mean over hours.

    frames are per-miner allocation frames, weights per-miner hash-weight Series
    carried forward to each hour. With require_all an hour is emitted only when
    every miner has both; otherwise missing miners drop out of that hour.
    """
    W = np.stack([f.reindex(hours).to_numpy() for f in frames])
    H = np.stack([w.reindex(w.index.union(hours)).ffill().reindex(hours).to_numpy() for w in weights])
    present = np.isfinite(W).all(axis=2) & np.isfinite(H)
    if require_all:
        keep = present.all(axis=0)
    else:
        keep = present.any(axis=0)
    H = np.where(present, H, 0.0)
    W = np.where(present[:, :, None], W, 0.0)
    total = H.sum(axis=0)
    keep &= total > 0
    aggregate = np.einsum("mt,mtn->tn", H, W)[keep] / total[keep, None]
    aggregate /= aggregate.sum(axis=1, keepdims=True)
    return pd.DataFrame(aggregate, index=pd.Index(hours[keep], name="timestamp"), columns=frames[0].columns)


def _uniform_weights(hours, count):
    return [pd.Series(1.0, index=hours) for _ in range(count)]


def economic_allocation_series(params, market, hash_weights, cooldown_hours):
    """Solves every miner with its own (lookback, risk) each hour and aggregates by hash weight.

    hash_weights may be None, in which case miners are weighted equally.
    """
    if not params:
        raise EmptyInput("no miner parameters")
    hours = market.frame.index
    per_miner = {}
    for p in params:
        path = economic_allocation_path(market, p.lookback_hours, p.risk, cooldown_hours)
        per_miner[p.miner_id] = path.frame
        if path.risk_clamped_hours or path.weights_clamped_hours:
            logger.warning(
                f"{p.miner_id}: risk clamped on {path.risk_clamped_hours} hour(s), "
                f"weights clamped on {path.weights_clamped_hours} hour(s)"
            )

    if hash_weights is None:
        weights = _uniform_weights(hours, len(params))
    else:
        by_miner = {w.miner_id: w.weights for w in hash_weights}
        missing = [p.miner_id for p in params if p.miner_id not in by_miner]
        if missing:
            raise ConfigError(f"no hash weights for miner(s) {', '.join(missing)}")
        weights = [by_miner[p.miner_id] for p in params]

    frame = _aggregate_frames(list(per_miner.values()), weights, hours, require_all=True)
    if frame.empty:
        longest = max(p.lookback_hours for p in params)
        raise InsufficientHistory(f"market history does not cover a {longest}h lookback plus {cooldown_hours}h cooldown")
    trimmed = {miner: f.loc[frame.index] for miner, f in per_miner.items()}
    logger.info(f"Aggregated {len(params)} miner(s) over {len(frame)} hours")
    return AggregateSeries(frame, tuple(per_miner), trimmed)


def actual_aggregate_series(actual_series, hash_weights):
    """Hash-weighted mean of observed allocations; miners with no sample in an hour drop out."""
    if not actual_series:
        raise EmptyInput("no actual allocation series")
    by_miner = {w.miner_id: w.weights for w in hash_weights}
    chains = list(actual_series[0].frame.columns)
    frames = [a.frame.reindex(columns=chains, fill_value=0.0) for a in actual_series]
    hours = frames[0].index
    for f in frames[1:]:
        hours = hours.union(f.index)
    weights = [by_miner.get(a.miner_id, pd.Series(dtype=float)) for a in actual_series]
    frame = _aggregate_frames(frames, weights, hours, require_all=False)
    return AggregateSeries(frame, tuple(a.miner_id for a in actual_series))


# --- baselines ---

def baseline_dari_allocation(rewards, difficulties):
    """Allocation proportional to each chain's coinbase value over difficulty."""
    R = np.asarray(rewards, dtype=float)
    D = np.asarray(difficulties, dtype=float)
    if R.shape != D.shape:
        raise DimensionMismatch(f"rewards {R.shape} and difficulties {D.shape} differ")
    if not (np.all(R > 0) and np.all(D > 0) and np.all(np.isfinite(R / D))):
        raise NonPositiveInput("rewards and difficulties must be finite and > 0")
    return Allocation.normalized(R / D)


def baseline_price_allocation(prices):
    P = np.asarray(prices, dtype=float)
    if P.size == 0 or not (np.all(P > 0) and np.all(np.isfinite(P))):
        raise NonPositiveInput("prices must be finite and > 0")
    return Allocation.normalized(P)


def dari_baseline_series(market):
    if market.rewards is None or market.difficulties is None:
        raise ConfigError("profit series carries no reward/difficulty inputs")
    dari = market.rewards / market.difficulties
    return dari.div(dari.sum(axis=1), axis=0)


def price_baseline_series(prices, chains):
    frame = prices.frame[list(chains)]
    return frame.div(frame.sum(axis=1), axis=0)


# --- inter-block time ---

def predict_ibt_change(w_before, w_after, targets):
    """delta T_i = (w_before_i / w_after_i) T_i."""
    before = np.asarray(getattr(w_before, "weights", w_before), dtype=float)
    after = np.asarray(getattr(w_after, "weights", w_after), dtype=float)
    T = np.asarray(targets, dtype=float)
    if not (before.shape == after.shape == T.shape):
        raise DimensionMismatch(f"shapes differ: {before.shape}, {after.shape}, {T.shape}")
    zero = np.flatnonzero(after <= 0)
    if zero.size:
        raise ZeroAllocationAfter(int(zero[0]))
    return before / after * T


def _contiguous(buckets, width):
    """Buckets with no data come back as NaN rows so ratios only pair adjacent buckets."""
    if buckets.empty:
        return buckets
    starts = np.arange(buckets.index.min(), buckets.index.max() + width, width)
    return buckets.reindex(pd.Index(starts, name="period_start"))


def bucket_means(frame, period_hours):
    """Mean of hourly rows per non-overlapping bucket aligned to multiples of period_hours."""
    width = period_hours * HOUR
    starts = (np.asarray(frame.index) // width) * width
    means = frame.groupby(starts).mean()
    means.index.name = "period_start"
    return _contiguous(means, width)


def _ratio_series(buckets, rolling_days, period_hours):
    window = rolling_days * 24 // period_hours
    if len(buckets) < window:
        raise InsufficientHistory(f"need {window} ratios for a {rolling_days}-day rolling mean, got {len(buckets)}")
    smoothed = buckets.rolling(window, min_periods=window).mean().dropna(how="all")
    if smoothed.empty:
        raise InsufficientHistory(f"no run of {window} adjacent ratios for a {rolling_days}-day rolling mean")
    return smoothed


def predict_ibt_series(agg, targets=None, period_hours=DEFAULT_PERIOD_HOURS, rolling_days=DEFAULT_ROLLING_DAYS):
    """Ratio w(prev bucket) / w(next bucket), smoothed by a trailing rolling mean.

    Each row is stamped with the start of the later bucket. A zero next-bucket
    allocation yields an infinite ratio rather than being dropped.
    """
    frame = agg.frame if isinstance(agg, AggregateSeries) else agg
    if targets is not None and len(targets) != frame.shape[1]:
        raise DimensionMismatch(f"{len(targets)} targets for {frame.shape[1]} chains")
    buckets = bucket_means(frame, period_hours)
    with np.errstate(divide="ignore"):
        ratios = (buckets.shift(1) / buckets).iloc[1:]
    unbounded = np.isinf(ratios.to_numpy()).any(axis=1)
    if unbounded.any():
        logger.warning(f"{int(unbounded.sum())} bucket(s) have a zero allocation after the change; IBT change is unbounded")
    smoothed = _ratio_series(ratios, rolling_days, period_hours)
    return IbtPrediction(smoothed, period_hours, rolling_days)


def observed_ibt_change_series(blocks, chains, period_hours=DEFAULT_PERIOD_HOURS, rolling_days=DEFAULT_ROLLING_DAYS):
    """Observed IBT(next bucket) / IBT(prev bucket) from block timestamps, same smoothing."""
    frame = blocks if isinstance(blocks, pd.DataFrame) else blocks_frame(blocks)
    width = period_hours * HOUR
    columns = {}
    for chain in chains:
        chain_blocks = frame[frame["chain"] == chain].sort_values("height")
        if len(chain_blocks) < 2:
            raise InsufficientHistory(f"{chain}: fewer than 2 blocks")
        ibt = chain_blocks["timestamp"].diff().iloc[1:]
        starts = (chain_blocks["timestamp"].iloc[1:] // width) * width
        columns[chain] = ibt.groupby(starts.to_numpy()).mean()
    buckets = pd.DataFrame(columns)
    buckets.index.name = "period_start"
    buckets = _contiguous(buckets, width)
    ratios = (buckets / buckets.shift(1)).iloc[1:]
    return IbtPrediction(_ratio_series(ratios, rolling_days, period_hours), period_hours, rolling_days)


# --- metrics ---

def _paired(xs, ys, minimum):
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape:
        raise DimensionMismatch(f"series differ in length: {x.size} vs {y.size}")
    if x.size < minimum:
        raise EmptyInput(f"need at least {minimum} paired values, got {x.size}")
    return x, y


def pearson(xs, ys):
    x, y = _paired(xs, ys, 2)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateVariance("Pearson correlation is undefined for a constant series")
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


def mean_abs_error(xs, ys):
    x, y = _paired(xs, ys, 1)
    return float(np.mean(np.abs(x - y)))


def compare_series(actual, predicted):
    """{pearson, mae} over the shared, finite index of two Series."""
    joined = pd.concat([actual.rename("actual"), predicted.rename("predicted")], axis=1, join="inner")
    joined = joined[np.isfinite(joined).all(axis=1)]
    return {
        "pearson": pearson(joined["predicted"], joined["actual"]),
        "mae": mean_abs_error(joined["predicted"], joined["actual"]),
    }


def compare_allocations(actual, predicted, focus_chain=None):
    """Compares the focus-chain fraction of two aggregate series over common hours."""
    chain = focus_chain or settings.focus_chain
    a = actual.frame if isinstance(actual, AggregateSeries) else actual
    p = predicted.frame if isinstance(predicted, AggregateSeries) else predicted
    if chain not in a.columns or chain not in p.columns:
        raise ConfigError(f"focus chain {chain!r} missing from the allocation series")
    return compare_series(a[chain], p[chain])


def price_change_ratio_series(prices, lag_hours=24, focus_chain=None):
    """q(t) / q(t - lag) with q the focus chain's share of the summed prices."""
    chain = focus_chain or settings.focus_chain
    frame = prices.frame
    if chain not in frame.columns or frame.shape[1] < 2:
        raise ConfigError(f"need {chain!r} and at least one other chain")
    if len(frame) <= lag_hours:
        raise InsufficientHistory(f"need more than {lag_hours} hours of prices, got {len(frame)}")
    share = frame[chain] / frame.sum(axis=1)
    return (share / share.shift(lag_hours)).dropna().rename("price_change_ratio")
