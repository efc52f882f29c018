"""Price, difficulty and block ingestion plus the hourly profit statistics.

All timestamps are UTC unix seconds. Hourly series are indexed by the start
of each hour and contain no gaps once loaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional

import numpy as np
import pandas as pd

from modules.portfolio_core import ProfitVector, VolatilityMatrix
from utils.config import settings
from utils.errors import (
    ConfigError,
    DimensionMismatch,
    DuplicateBlock,
    GapTooLong,
    InsufficientHistory,
    MissingDifficulty,
    NonPositiveInput,
    NonPositivePrice,
    ParseError,
    UnknownChain,
    UnsortedTimestamps,
)
from utils.logger import logger

HOUR = 3600
# 101-block coinbase maturity at 6 blocks per hour
DEFAULT_COOLDOWN_HOURS = 101 // 6

PRICE_COLUMNS = ["timestamp", "chain", "price_usd"]
DIFFICULTY_COLUMNS = ["timestamp", "chain", "difficulty"]
BLOCK_COLUMNS = ["chain", "height", "timestamp", "miner", "difficulty"]
HASH_WEIGHT_COLUMNS = ["timestamp", "miner", "weight"]


class DaaKind(str, Enum):
    PER_BLOCK_WINDOW = "per_block_window"
    EPOCH = "epoch"


@dataclass(frozen=True)
class ChainSpec:
    chain_id: str
    target_ibt: float = 600.0
    coinbase_subsidy: float = 12.5
    cooldown_hours: int = DEFAULT_COOLDOWN_HOURS
    daa_kind: DaaKind = DaaKind.EPOCH

    def __post_init__(self):
        if not self.chain_id:
            raise ConfigError("chain_id must be non-empty")
        if not self.target_ibt > 0:
            raise ConfigError(f"{self.chain_id}: target_ibt must be > 0")
        if not self.coinbase_subsidy > 0:
            raise ConfigError(f"{self.chain_id}: coinbase_subsidy must be > 0")
        if int(self.cooldown_hours) != self.cooldown_hours or self.cooldown_hours < 0:
            raise ConfigError(f"{self.chain_id}: cooldown_hours must be a non-negative integer")
        try:
            object.__setattr__(self, "daa_kind", DaaKind(self.daa_kind))
        except ValueError:
            raise ConfigError(f"{self.chain_id}: unknown daa_kind {self.daa_kind!r}") from None


DEFAULT_CHAINS = (
    ChainSpec("BTC", daa_kind=DaaKind.EPOCH),
    ChainSpec("BCH", daa_kind=DaaKind.PER_BLOCK_WINDOW),
)


def load_chain_specs(path):
    """Reads a chains JSON file: {"schema_version": 1, "chains": [...]}."""
    try:
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"could not read chain specs from {path}: {e}") from e
    if payload.get("schema_version") != 1:
        raise ConfigError(f"{path}: unsupported schema_version {payload.get('schema_version')!r}")
    entries = payload.get("chains")
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: 'chains' must be a non-empty list")
    allowed = {"chain_id", "target_ibt", "coinbase_subsidy", "cooldown_hours", "daa_kind"}
    specs = []
    for entry in entries:
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown chain keys {sorted(unknown)}")
        specs.append(ChainSpec(**entry))
    ids = [s.chain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}: duplicate chain ids")
    return specs


@dataclass(frozen=True)
class PriceSeries:
    """Hourly USD quotes, one column per chain; treat the frame as read-only."""
    frame: pd.DataFrame

    @property
    def chains(self):
        return list(self.frame.columns)

    @property
    def hours(self):
        return self.frame.index.to_numpy()


@dataclass(frozen=True)
class DifficultySeries:
    """Per-chain difficulty observations, sorted by timestamp."""
    observations: Dict[str, pd.Series]

    @property
    def chains(self):
        return list(self.observations)

    def at_hours(self, hours, chains, strict=True):
        """Last observation at or before each hour, per chain.

        Hours before a chain's first observation raise MissingDifficulty, or
        come back as NaN when strict is False.
        """
        hours = np.asarray(hours)
        columns = {}
        for chain in chains:
            series = self.observations.get(chain)
            if series is None or series.empty:
                raise MissingDifficulty(f"no difficulty observations for {chain}")
            idx = np.searchsorted(series.index.to_numpy(), hours, side="right") - 1
            before = idx < 0
            if before.any() and strict:
                first = int(hours[np.argmax(before)])
                raise MissingDifficulty(f"no difficulty for {chain} at or before {first}")
            values = series.to_numpy(dtype=float)[np.maximum(idx, 0)]
            columns[chain] = np.where(before, np.nan, values)
        return pd.DataFrame(columns, index=pd.Index(hours, name="timestamp"))

    def at_hour_close(self, hours, chains, strict=True):
        """Difficulty in force by the last second of each hour, indexed by hour start."""
        hours = np.asarray(hours)
        frame = self.at_hours(hours + HOUR - 1, chains, strict=strict)
        frame.index = pd.Index(hours, name="timestamp")
        return frame


@dataclass(frozen=True)
class BlockRecord:
    chain_id: str
    height: int
    timestamp: int
    miner_id: str
    difficulty: float


@dataclass(frozen=True)
class ProfitSeries:
    """pi(t) per hour. rewards/difficulties hold the inputs of the profit normalization when known."""
    frame: pd.DataFrame
    rewards: Optional[pd.DataFrame] = None
    difficulties: Optional[pd.DataFrame] = None

    @property
    def chains(self):
        return list(self.frame.columns)

    @property
    def hours(self):
        return self.frame.index.to_numpy()

    def vector_at(self, t):
        return ProfitVector(self.frame.loc[t].to_numpy())


# --- CSV ingestion ---

def _read_table(path, expected_columns):
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True, encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("file not found", path=path) from None
    except pd.errors.EmptyDataError:
        raise ParseError("file is empty", line=1, path=path) from None
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed CSV: {e}", path=path) from e

    columns = [str(c).strip().lower() for c in frame.columns]
    if columns != expected_columns:
        raise ParseError(f"expected header {','.join(expected_columns)}, got {','.join(columns)}", line=1, path=path)
    frame.columns = columns
    for column in columns:
        frame[column] = frame[column].fillna("").str.strip()
    # data rows start on line 2
    frame.index = pd.RangeIndex(2, 2 + len(frame), name="line")
    return frame


def _numeric_column(frame, column, path, integral=False):
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = ~np.isfinite(values.to_numpy(dtype=float))
    if integral:
        with np.errstate(invalid="ignore"):
            bad |= values.to_numpy(dtype=float) != np.floor(values.to_numpy(dtype=float))
    if bad.any():
        line = int(frame.index[np.argmax(bad)])
        kind = "integer" if integral else "number"
        raise ParseError(f"{column} is not a valid {kind}: {frame.at[line, column]!r}", line=line, path=path)
    return values.astype("int64") if integral else values.astype(float)


def _text_column(frame, column, path):
    empty = frame[column] == ""
    if empty.any():
        line = int(frame.index[np.argmax(empty.to_numpy())])
        raise ParseError(f"{column} is empty", line=line, path=path)
    return frame[column]


def _check_increasing(frame, path, key="chain"):
    """Timestamps must strictly increase per key (chain or miner), in file order."""
    previous = frame.groupby(key, sort=False)["timestamp"].shift()
    bad = previous.notna() & (frame["timestamp"] <= previous)
    if bad.any():
        line = int(frame.index[np.argmax(bad.to_numpy())])
        raise UnsortedTimestamps(f"timestamp {frame.at[line, 'timestamp']} does not increase for {frame.at[line, key]}", line=line, path=path)


def load_price_csv(path, max_fill_hours=None):
    """Loads `timestamp,chain,price_usd` rows into a gap-free hourly PriceSeries.

    Missing hours are forward-filled up to max_fill_hours consecutive hours;
    longer gaps, and chains that start after the first hour, are rejected.
    """
    max_fill = settings.max_fill_hours if max_fill_hours is None else max_fill_hours
    raw = _read_table(path, PRICE_COLUMNS)
    if raw.empty:
        raise ParseError("no price rows", line=2, path=path)

    frame = pd.DataFrame(index=raw.index)
    frame["timestamp"] = _numeric_column(raw, "timestamp", path, integral=True)
    frame["chain"] = _text_column(raw, "chain", path)
    frame["price_usd"] = _numeric_column(raw, "price_usd", path)

    non_positive = frame["price_usd"] <= 0
    if non_positive.any():
        line = int(frame.index[np.argmax(non_positive.to_numpy())])
        raise NonPositivePrice(f"price must be > 0, got {frame.at[line, 'price_usd']}", line=line, path=path)
    unaligned = frame["timestamp"] % HOUR != 0
    if unaligned.any():
        line = int(frame.index[np.argmax(unaligned.to_numpy())])
        raise ParseError(f"timestamp {frame.at[line, 'timestamp']} is not aligned to a whole hour", line=line, path=path)
    _check_increasing(frame, path)

    wide = frame.pivot(index="timestamp", columns="chain", values="price_usd")
    wide = wide[list(dict.fromkeys(frame["chain"]))]
    hours = np.arange(wide.index.min(), wide.index.max() + HOUR, HOUR, dtype="int64")
    wide = wide.reindex(hours)

    for chain in wide.columns:
        column = wide[chain]
        if pd.isna(column.iloc[0]):
            raise GapTooLong(f"{chain} has no price at the first hour {hours[0]}; leading gaps cannot be filled", path=path)
        missing = int(column.isna().sum())
        filled = column.ffill(limit=max_fill) if max_fill > 0 else column
        if filled.isna().any():
            hour = int(filled.index[np.argmax(filled.isna().to_numpy())])
            raise GapTooLong(f"{chain} is missing more than {max_fill} consecutive hours at {hour}", path=path)
        if missing:
            logger.warning(f"Forward-filled {missing} missing hour(s) for {chain} in {path}")
        wide[chain] = filled

    wide.index.name = "timestamp"
    wide.columns.name = None
    logger.info(f"Loaded {len(wide)} hourly prices for {', '.join(wide.columns)} from {path}")
    return PriceSeries(wide)


def load_difficulty_csv(path):
    """Loads `timestamp,chain,difficulty` observations."""
    raw = _read_table(path, DIFFICULTY_COLUMNS)
    if raw.empty:
        raise ParseError("no difficulty rows", line=2, path=path)
    frame = pd.DataFrame(index=raw.index)
    frame["timestamp"] = _numeric_column(raw, "timestamp", path, integral=True)
    frame["chain"] = _text_column(raw, "chain", path)
    frame["difficulty"] = _numeric_column(raw, "difficulty", path)
    non_positive = frame["difficulty"] <= 0
    if non_positive.any():
        line = int(frame.index[np.argmax(non_positive.to_numpy())])
        raise ParseError(f"difficulty must be > 0, got {frame.at[line, 'difficulty']}", line=line, path=path)
    _check_increasing(frame, path)

    observations = {
        chain: pd.Series(group["difficulty"].to_numpy(), index=group["timestamp"].to_numpy())
        for chain, group in frame.groupby("chain", sort=False)
    }
    logger.info(f"Loaded {len(frame)} difficulty observations for {', '.join(observations)} from {path}")
    return DifficultySeries(observations)


def load_hash_weights_csv(path):
    """Loads `timestamp,miner,weight` rows into one weight series per miner, in file order."""
    raw = _read_table(path, HASH_WEIGHT_COLUMNS)
    if raw.empty:
        raise ParseError("no hash weight rows", line=2, path=path)
    frame = pd.DataFrame(index=raw.index)
    frame["timestamp"] = _numeric_column(raw, "timestamp", path, integral=True)
    frame["miner"] = _text_column(raw, "miner", path)
    frame["weight"] = _numeric_column(raw, "weight", path)
    negative = frame["weight"] < 0
    if negative.any():
        line = int(frame.index[np.argmax(negative.to_numpy())])
        raise ParseError(f"hash weight must be >= 0, got {frame.at[line, 'weight']}", line=line, path=path)
    _check_increasing(frame, path, key="miner")

    weights = {
        miner: pd.Series(group["weight"].to_numpy(), index=group["timestamp"].to_numpy())
        for miner, group in frame.groupby("miner", sort=False)
    }
    logger.info(f"Loaded {len(frame)} hash weights for {len(weights)} miner(s) from {path}")
    return weights


def load_blocks_csv(path, chains=None):
    """Loads `chain,height,timestamp,miner,difficulty` rows as BlockRecords.

    chains limits the accepted chain ids (default: the configured chains).
    """
    known = {spec.chain_id for spec in (chains or DEFAULT_CHAINS)}
    raw = _read_table(path, BLOCK_COLUMNS)
    frame = pd.DataFrame(index=raw.index)
    frame["chain"] = _text_column(raw, "chain", path)
    frame["height"] = _numeric_column(raw, "height", path, integral=True)
    frame["timestamp"] = _numeric_column(raw, "timestamp", path, integral=True)
    frame["miner"] = _text_column(raw, "miner", path)
    frame["difficulty"] = _numeric_column(raw, "difficulty", path)

    unknown = ~frame["chain"].isin(known)
    if unknown.any():
        line = int(frame.index[np.argmax(unknown.to_numpy())])
        raise UnknownChain(f"unknown chain {frame.at[line, 'chain']!r}", line=line, path=path)
    negative = frame["height"] < 0
    if negative.any():
        line = int(frame.index[np.argmax(negative.to_numpy())])
        raise ParseError("height must be >= 0", line=line, path=path)
    non_positive = frame["difficulty"] <= 0
    if non_positive.any():
        line = int(frame.index[np.argmax(non_positive.to_numpy())])
        raise ParseError("difficulty must be > 0", line=line, path=path)
    duplicated = frame.duplicated(subset=["chain", "height"])
    if duplicated.any():
        line = int(frame.index[np.argmax(duplicated.to_numpy())])
        raise DuplicateBlock(f"duplicate block {frame.at[line, 'chain']} height {frame.at[line, 'height']}", line=line, path=path)

    blocks = [
        BlockRecord(row.chain, int(row.height), int(row.timestamp), row.miner, float(row.difficulty))
        for row in frame.itertuples(index=False)
    ]
    logger.info(f"Loaded {len(blocks)} blocks from {path}")
    return blocks


def blocks_frame(blocks):
    """BlockRecords as a DataFrame with columns chain, height, timestamp, miner, difficulty."""
    return pd.DataFrame(
        {
            "chain": [b.chain_id for b in blocks],
            "height": np.array([b.height for b in blocks], dtype="int64"),
            "timestamp": np.array([b.timestamp for b in blocks], dtype="int64"),
            "miner": [b.miner_id for b in blocks],
            "difficulty": np.array([b.difficulty for b in blocks], dtype=float),
        }
    )


def difficulty_from_blocks(blocks):
    """Difficulty observations taken from the blocks themselves."""
    frame = blocks_frame(blocks)
    if frame.empty:
        raise MissingDifficulty("no blocks to take difficulty from")
    frame = frame.sort_values(["chain", "timestamp", "height"], kind="mergesort")
    frame = frame.drop_duplicates(subset=["chain", "timestamp"], keep="last")
    return DifficultySeries({
        chain: pd.Series(group["difficulty"].to_numpy(), index=group["timestamp"].to_numpy())
        for chain, group in frame.groupby("chain", sort=False)
    })


# --- profit statistics ---

def profit_vector(rewards, difficulties):
    """pi = R/D * (e'D)/(e'R)."""
    R = np.asarray(rewards, dtype=float)
    D = np.asarray(difficulties, dtype=float)
    if R.ndim != 1 or R.shape != D.shape or R.size == 0:
        raise DimensionMismatch(f"rewards {R.shape} and difficulties {D.shape} must be equal-length vectors")
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(D)) and np.all(R > 0) and np.all(D > 0)):
        raise NonPositiveInput("rewards and difficulties must be finite and > 0")
    return ProfitVector((R / D) * (D.sum() / R.sum()))


def profit_series(prices, difficulties, specs):
    """Hourly pi(t) with R_i(t) = subsidy_i * price_i(t) and D_i(t) the difficulty in force at the close of hour t."""
    chains = [spec.chain_id for spec in specs]
    missing = [c for c in chains if c not in prices.frame.columns]
    if missing:
        raise UnknownChain(f"no prices for chain(s) {', '.join(missing)}")
    subsidies = pd.Series({spec.chain_id: spec.coinbase_subsidy for spec in specs})
    rewards = prices.frame[chains].mul(subsidies[chains], axis=1)
    difficulty = difficulties.at_hour_close(prices.hours, chains)
    frame = (rewards / difficulty).mul(difficulty.sum(axis=1) / rewards.sum(axis=1), axis=0)
    frame.index.name = "timestamp"
    logger.debug(f"Computed {len(frame)} hourly profit vectors over {', '.join(chains)}")
    return ProfitSeries(frame, rewards=rewards, difficulties=difficulty)


def _check_window(series, start, t):
    hours = series.frame.index
    if len(hours) == 0 or start < hours[0] or t > hours[-1]:
        raise InsufficientHistory(f"profit series does not cover [{start}, {t}]")


def expected_profit_vector(series, t, lookback_hours):
    """Mean of pi over the closed window [t - lookback, t]."""
    start = t - lookback_hours * HOUR
    _check_window(series, start, t)
    window = series.frame.loc[start:t]
    if window.empty:
        raise InsufficientHistory(f"no profit samples in [{start}, {t}]")
    return ProfitVector(window.mean().to_numpy())


def volatility_matrix(series, t, lookback_hours, cooldown_hours):
    """Sample covariance (divisor m-1) of pi(x) - pi(x - cooldown) for x in [t - lookback, t]."""
    start = t - lookback_hours * HOUR
    _check_window(series, start - cooldown_hours * HOUR, t)
    diffs = (series.frame - series.frame.shift(cooldown_hours)).loc[start:t]
    if len(diffs) < 2:
        raise InsufficientHistory(f"need at least 2 difference vectors in [{start}, {t}], got {len(diffs)}")
    cov = np.atleast_2d(np.cov(diffs.to_numpy(), rowvar=False, ddof=1))
    return VolatilityMatrix(0.5 * (cov + cov.T))


def rolling_expected_profit(series, lookback_hours):
    """E[pi(t)] at every hour, NaN until a full window is available. Shape (T, n)."""
    window = lookback_hours + 1
    return series.frame.rolling(window, min_periods=window).mean().to_numpy()


def rolling_volatility(series, lookback_hours, cooldown_hours):
    """Sigma(t) at every hour, NaN until a full window is available. Shape (T, n, n)."""
    frame = series.frame
    T, n = frame.shape
    window = lookback_hours + 1
    if window < 2:
        return np.full((T, n, n), np.nan)
    diffs = frame - frame.shift(cooldown_hours)
    cov = diffs.rolling(window, min_periods=window).cov().to_numpy().reshape(T, n, n)
    return 0.5 * (cov + cov.transpose(0, 2, 1))
