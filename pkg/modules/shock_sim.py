"""Monte Carlo block-generation experiment for a single step shock in one chain's price.

Each trial builds an hourly synthetic price series (base price plus uniform
noise, with the shocked chain stepping to p*x at the shock hour), then runs a
continuous-time event loop: every chain's next block arrives after an
exponential delay whose mean is D_i * kappa / (H * w_i). The aggregate
economic allocation w is re-solved at every hour boundary and after every
block that moves a difficulty, with the current hour repriced at the new
difficulties. Each chain runs its difficulty adjustment after every block.
Trials are independent and seeded from (master_seed, trial_index).
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional, Tuple

import numpy as np
import pandas as pd

from modules.aggregate import aggregate_allocation
from modules.market_data import DEFAULT_CHAINS, HOUR, ChainSpec, DaaKind, PriceSeries, profit_vector
from modules.portfolio_core import PIPELINE_POLICY, solve_max_profit
from modules.risk_inference import MinerParams
from utils.config import settings
from utils.errors import ConfigError, InsufficientHistory, SingularVolatility
from utils.file_utils import write_csv
from utils.logger import logger

BCH_WINDOW_BLOCKS = 144
BTC_EPOCH_BLOCKS = 2016
DAA_CLAMP = 4.0
SCHEMA_VERSION = 1

DEFAULT_MINERS = (
    MinerParams("ViaBTC", 144, 6.42e-4),
    MinerParams("BTC.TOP", 16, 8.54e-5),
    MinerParams("AntPool", 10, 3.33e-5),
    MinerParams("BTC.com", 4, 3.81e-6),
)


@dataclass(frozen=True)
class ShockConfig:
    shock_multiplier: float = 1.0
    shock_chain: str = "BCH"
    base_prices: Tuple[float, ...] = (9500.0, 1400.0)
    noise_fraction: float = 0.1
    price_floor_fraction: float = 0.01
    trials: int = 180
    warmup_days: int = 21
    horizon_days: int = 14
    report_pre_hours: int = 48
    bucket_hours: int = 6
    miners: Tuple[MinerParams, ...] = DEFAULT_MINERS
    hash_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    master_seed: Optional[int] = None
    chains: Tuple[ChainSpec, ...] = DEFAULT_CHAINS
    initial_difficulty: float = 1.0e6
    median_of_three: bool = False
    inelastic_fraction: float = 0.0
    allocation_floor: float = 1e-6

    def __post_init__(self):
        if not 0 < self.shock_multiplier <= 4:
            raise ConfigError(f"shock multiplier must be in (0, 4], got {self.shock_multiplier}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 0 <= self.noise_fraction < 1:
            raise ConfigError("noise_fraction must be in [0, 1)")
        if not 0 < self.price_floor_fraction < 1:
            raise ConfigError("price_floor_fraction must be in (0, 1)")
        chain_ids = [c.chain_id for c in self.chains]
        if self.shock_chain not in chain_ids:
            raise ConfigError(f"shock chain {self.shock_chain!r} is not one of {chain_ids}")
        if len(self.base_prices) != len(self.chains) or min(self.base_prices) <= 0:
            raise ConfigError("base_prices needs one positive price per chain")
        if not self.miners:
            raise ConfigError("at least one miner is required")
        if len(self.hash_weights) != len(self.miners) or min(self.hash_weights) < 0 or sum(self.hash_weights) <= 0:
            raise ConfigError("hash_weights needs one non-negative weight per miner, not all zero")
        if self.bucket_hours < 1 or self.horizon_days < 1 or self.report_pre_hours < 0:
            raise ConfigError("bucket_hours and horizon_days must be >= 1, report_pre_hours >= 0")
        if not 0 <= self.inelastic_fraction < 1:
            raise ConfigError("inelastic_fraction must be in [0, 1)")
        if not 0 <= self.allocation_floor < 1.0 / len(self.chains):
            raise ConfigError("allocation_floor must be in [0, 1/n)")
        if not self.initial_difficulty > 0:
            raise ConfigError("initial_difficulty must be > 0")
        if self.warmup_days * 24 < self.prefix_hours + self.settle_hours:
            raise ConfigError(
                f"warmup of {self.warmup_days} days is shorter than {self.prefix_hours}h of price history "
                f"plus {self.settle_hours}h of difficulty settling"
            )
        if self.report_pre_hours > self.warmup_days * 24 - self.prefix_hours:
            raise ConfigError("report_pre_hours reaches back before the first simulated block")

    @property
    def cooldown_hours(self):
        return max(c.cooldown_hours for c in self.chains)

    @property
    def prefix_hours(self):
        """Hours of price history generated before the first block."""
        return max(m.lookback_hours for m in self.miners) + self.cooldown_hours

    @property
    def settle_hours(self):
        blocks = max(BTC_EPOCH_BLOCKS, 2 * BCH_WINDOW_BLOCKS)
        return math.ceil(blocks * max(c.target_ibt for c in self.chains) / HOUR)

    @property
    def shock_hour(self):
        return self.warmup_days * 24

    @property
    def total_hours(self):
        return (self.warmup_days + self.horizon_days) * 24

    @property
    def chain_ids(self):
        return [c.chain_id for c in self.chains]


def load_shock_config(path=None, **overrides):
    """Reads a schema_version 1 JSON config; keyword overrides win over the file."""
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"could not read shock config {path}: {e}") from e
        if payload.pop("schema_version", None) != SCHEMA_VERSION:
            raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
        known = {f.name for f in fields(ShockConfig)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        values.update(payload)
        if "miners" in values:
            values["miners"] = tuple(_miner_from_json(m) for m in values["miners"])
        if "chains" in values:
            values["chains"] = tuple(_chain_from_json(c) for c in values["chains"])
        for key in ("base_prices", "hash_weights"):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    if "miners" in values and "hash_weights" not in values:
        values["hash_weights"] = tuple(1.0 for _ in values["miners"])
    try:
        return ShockConfig(**values)
    except TypeError as e:
        raise ConfigError(f"invalid shock config: {e}") from e


def _miner_from_json(entry):
    try:
        return MinerParams(str(entry["miner"]), int(entry["lookback_hours"]), float(entry["risk"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"miner entries need miner, lookback_hours and risk: {entry!r}") from e


def _chain_from_json(entry):
    try:
        return ChainSpec(**entry)
    except TypeError as e:
        raise ConfigError(f"invalid chain entry {entry!r}: {e}") from e


def config_to_json(config):
    """Canonical JSON form of a config, used for the run manifest digest."""
    return {
        "schema_version": SCHEMA_VERSION,
        "shock_multiplier": config.shock_multiplier,
        "shock_chain": config.shock_chain,
        "base_prices": list(config.base_prices),
        "noise_fraction": config.noise_fraction,
        "price_floor_fraction": config.price_floor_fraction,
        "trials": config.trials,
        "warmup_days": config.warmup_days,
        "horizon_days": config.horizon_days,
        "report_pre_hours": config.report_pre_hours,
        "bucket_hours": config.bucket_hours,
        "miners": [{"miner": m.miner_id, "lookback_hours": m.lookback_hours, "risk": m.risk} for m in config.miners],
        "hash_weights": list(config.hash_weights),
        "master_seed": config.master_seed,
        "chains": [
            {
                "chain_id": c.chain_id,
                "target_ibt": c.target_ibt,
                "coinbase_subsidy": c.coinbase_subsidy,
                "cooldown_hours": c.cooldown_hours,
                "daa_kind": c.daa_kind.value,
            }
            for c in config.chains
        ],
        "initial_difficulty": config.initial_difficulty,
        "median_of_three": config.median_of_three,
        "inelastic_fraction": config.inelastic_fraction,
        "allocation_floor": config.allocation_floor,
    }


# --- seeding ---

def trial_seed_sequence(master_seed, trial_index):
    return np.random.SeedSequence(master_seed, spawn_key=(trial_index,))


def _trial_streams(config, trial_index):
    if config.master_seed is None:
        raise ConfigError("a master seed is required")
    price_seq, block_seq = trial_seed_sequence(config.master_seed, trial_index).spawn(2)
    return price_seq, np.random.default_rng(block_seq)


# --- prices ---

def generate_shock_prices(config, trial_seed):
    """Hourly prices from hour 0 through total_hours, timestamps in simulated seconds.

    The shocked chain quotes p before shock_hour and p*x from it on; every chain
    gets independent uniform noise in [-f*p, f*p] and a floor of
    price_floor_fraction * p * x.
    """
    rng = np.random.default_rng(trial_seed)
    hours = np.arange(config.total_hours + 1)
    n = len(config.chains)
    base = np.asarray(config.base_prices, dtype=float)
    noise = rng.uniform(-1.0, 1.0, size=(hours.size, n)) * config.noise_fraction * base

    level = np.tile(base, (hours.size, 1))
    multiplier = np.ones(n)
    shocked = config.chain_ids.index(config.shock_chain)
    multiplier[shocked] = config.shock_multiplier
    level[hours >= config.shock_hour, shocked] *= config.shock_multiplier

    floor = config.price_floor_fraction * base * multiplier
    prices = np.maximum(level + noise, floor)
    frame = pd.DataFrame(prices, index=pd.Index(hours * HOUR, name="timestamp"), columns=config.chain_ids)
    return PriceSeries(frame)


# --- difficulty adjustment ---

class SimBlock(NamedTuple):
    height: int
    timestamp: float
    difficulty: float


def _median_timestamp(history, position):
    """Median of the timestamps at position and the two blocks before it, when they exist."""
    if position - 2 < -len(history):
        return history[position].timestamp
    return float(np.median([history[position - k].timestamp for k in range(3)]))


def bch_daa_next_difficulty(history, target_ibt=600.0, window=BCH_WINDOW_BLOCKS, median_of_three=False):
    """Rolling-window retarget over the last `window` blocks.

    history holds at least window + 1 blocks; the elapsed time is measured
    between the first and last of the final window + 1 and clamped to
    [window*target/4, window*target*4].
    """
    if len(history) < window + 1:
        raise InsufficientHistory(f"need {window + 1} blocks, got {len(history)}")
    history = list(history)
    if median_of_three:
        elapsed = _median_timestamp(history, -1) - _median_timestamp(history, -(window + 1))
    else:
        elapsed = history[-1].timestamp - history[-(window + 1)].timestamp
    expected = window * target_ibt
    elapsed = min(max(elapsed, expected / DAA_CLAMP), expected * DAA_CLAMP)
    mean_difficulty = float(np.mean([b.difficulty for b in history[-window:]]))
    return mean_difficulty * expected / elapsed


def btc_daa_next_difficulty(epoch, target_ibt=600.0, epoch_blocks=BTC_EPOCH_BLOCKS):
    """Epoch retarget: D * (epoch_blocks*target / elapsed) with the factor clamped to [1/4, 4]."""
    if len(epoch) < epoch_blocks + 1:
        raise InsufficientHistory(f"need {epoch_blocks + 1} blocks, got {len(epoch)}")
    epoch = list(epoch)
    elapsed = epoch[-1].timestamp - epoch[-(epoch_blocks + 1)].timestamp
    factor = epoch_blocks * target_ibt / elapsed if elapsed > 0 else DAA_CLAMP
    factor = min(max(factor, 1.0 / DAA_CLAMP), DAA_CLAMP)
    return epoch[-1].difficulty * factor


@dataclass
class SimChainState:
    spec: ChainSpec
    difficulty: float
    history: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    height: int = 0

    def __post_init__(self):
        if not self.difficulty > 0:
            raise ConfigError(f"{self.spec.chain_id}: difficulty must be > 0")
        self._keep = max(BCH_WINDOW_BLOCKS + 3, BTC_EPOCH_BLOCKS + 1)

    def add_block(self, timestamp):
        previous = self.history[-1].timestamp
        self.height += 1
        block = SimBlock(self.height, timestamp, self.difficulty)
        self.history.append(block)
        if len(self.history) > self._keep:
            del self.history[0]
        self.blocks.append((self.height, timestamp, self.difficulty, timestamp - previous))

    def retarget(self, median_of_three=False):
        """Runs the chain's DAA after a block; difficulty is held until enough history exists."""
        if self.spec.daa_kind is DaaKind.PER_BLOCK_WINDOW:
            try:
                self.difficulty = bch_daa_next_difficulty(self.history, self.spec.target_ibt, median_of_three=median_of_three)
            except InsufficientHistory:
                pass
        elif self.height % BTC_EPOCH_BLOCKS == 0:
            self.difficulty = btc_daa_next_difficulty(self.history, self.spec.target_ibt)


# --- trial ---

@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    blocks: dict
    allocations: pd.DataFrame
    shock_hour: int
    floor_binding_hours: int = 0


def _window_moments(pi, end, lookback, cooldown):
    """Mean of pi over rows [end-lookback, end] and covariance of the cooldown-lagged differences."""
    window = pi[end - lookback:end + 1]
    diffs = window - pi[end - lookback - cooldown:end + 1 - cooldown]
    cov = np.atleast_2d(np.cov(diffs, rowvar=False, ddof=1))
    return window.mean(axis=0), 0.5 * (cov + cov.T)


def _economic_allocation(config, pi, hour):
    per_miner = []
    n = pi.shape[1]
    for miner, weight in zip(config.miners, config.hash_weights):
        mu, sigma = _window_moments(pi, hour, miner.lookback_hours, config.cooldown_hours)
        try:
            w = solve_max_profit(mu, sigma, miner.risk, PIPELINE_POLICY).allocation.weights
        except SingularVolatility:
            w = np.full(n, 1.0 / n)
        per_miner.append((w, weight))
    return aggregate_allocation(per_miner).weights


def _apply_floor(w, floor):
    if floor <= 0 or np.all(w >= floor):
        return w, False
    w = np.maximum(w, floor)
    return w / w.sum(), True


def run_trial(config, trial_index):
    """One Monte Carlo trial; bit-identical for the same (master_seed, trial_index)."""
    price_seq, rng = _trial_streams(config, trial_index)
    prices = generate_shock_prices(config, price_seq).frame.to_numpy()
    specs = config.chains
    n = len(specs)
    subsidies = np.array([c.coinbase_subsidy for c in specs])
    targets = np.array([c.target_ibt for c in specs])

    rewards = subsidies * np.asarray(config.base_prices)
    initial = config.initial_difficulty * rewards / rewards.sum()
    equilibrium = (initial / targets) / np.sum(initial / targets)
    kappa = 1.0 / np.sum(initial / targets)

    start_hour = config.prefix_hours
    end_time = config.total_hours * HOUR
    pi = np.full((config.total_hours + 1, n), np.nan)
    for h in range(start_hour + 1):
        pi[h] = profit_vector(subsidies * prices[h], initial).values

    states = [SimChainState(spec, float(d)) for spec, d in zip(specs, initial)]
    for state in states:
        state.history.append(SimBlock(0, float(start_hour * HOUR), state.difficulty))

    queue = []
    sequence = itertools.count()
    versions = [0] * n

    def schedule(i, now, w):
        versions[i] += 1
        if w[i] <= 0:
            return
        delay = rng.exponential(states[i].difficulty * kappa / w[i])
        heapq.heappush(queue, (now + delay, next(sequence), i, versions[i]))

    def allocation_at(hour):
        w = _economic_allocation(config, pi, hour)
        w = (1.0 - config.inelastic_fraction) * w + config.inelastic_fraction * equilibrium
        return _apply_floor(w, config.allocation_floor)

    floor_hours = set()

    def resolve(hour):
        """Reprices the current hour at the current difficulties and re-solves the allocation."""
        difficulties = np.array([s.difficulty for s in states])
        pi[hour] = profit_vector(subsidies * prices[hour], difficulties).values
        w, floored = allocation_at(hour)
        if floored:
            floor_hours.add(hour)
        return w

    hour = start_hour
    w = resolve(hour)
    allocation_rows = [(hour, *w)]
    for i in range(n):
        schedule(i, hour * HOUR, w)

    while True:
        while queue and queue[0][3] != versions[queue[0][2]]:
            heapq.heappop(queue)
        next_hour = (hour + 1) * HOUR
        if not queue or queue[0][0] >= next_hour:
            hour += 1
            if hour * HOUR >= end_time:
                break
            w = resolve(hour)
            allocation_rows.append((hour, *w))
            for i in range(n):
                schedule(i, hour * HOUR, w)
            continue

        when, _, i, _ = heapq.heappop(queue)
        state = states[i]
        previous = state.difficulty
        state.add_block(when)
        state.retarget(config.median_of_three)
        if state.difficulty == previous:
            # same hour, same difficulties: the allocation cannot change
            schedule(i, when, w)
            continue
        w = resolve(hour)
        for j in range(n):
            schedule(j, when, w)

    if floor_hours:
        logger.warning(f"Trial {trial_index}: allocation floor bound on {len(floor_hours)} hour(s)")
    allocations = pd.DataFrame(allocation_rows, columns=["hour", *config.chain_ids]).set_index("hour")
    blocks = {
        s.spec.chain_id: pd.DataFrame(s.blocks, columns=["height", "timestamp", "difficulty", "ibt"])
        for s in states
    }
    return TrialResult(trial_index, blocks, allocations, config.shock_hour, len(floor_hours))


def bucket_trial(result, config):
    """Per-bucket mean allocation of the shocked chain, plus IBT sums and block counts per chain."""
    width = config.bucket_hours
    starts = np.arange(-(config.report_pre_hours // width) * width, config.horizon_days * 24, width)
    relative = result.allocations.index.to_numpy() - result.shock_hour
    allocation = result.allocations[config.shock_chain].groupby(relative // width * width).mean()

    frame = pd.DataFrame(index=pd.Index(starts, name="bucket_start_hours_from_shock"))
    frame["allocation"] = allocation.reindex(starts).to_numpy()
    for chain, blocks in result.blocks.items():
        hours = blocks["timestamp"].to_numpy() / HOUR - result.shock_hour
        bucket = np.floor(hours / width).astype("int64") * width
        grouped = blocks["ibt"].groupby(bucket)
        frame[f"{chain}_ibt_sum"] = grouped.sum().reindex(starts, fill_value=0.0).to_numpy()
        frame[f"{chain}_blocks"] = grouped.size().reindex(starts, fill_value=0).to_numpy()
    return frame


def summarize_buckets(buckets, chain_ids):
    """Median allocation across trials and the pooled mean IBT of every block in each bucket.

    Buckets are reduced in trial order. A bucket with no block in any trial
    has no IBT and stays NaN.
    """
    index = buckets[0].index
    frame = pd.DataFrame(index=index)
    allocation = np.stack([b["allocation"].to_numpy() for b in buckets])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        frame["allocation"] = np.nanmedian(allocation, axis=0)
    pooled = pd.concat(buckets).groupby(level=0, sort=False).sum().reindex(index)
    for chain in chain_ids:
        count = pooled[f"{chain}_blocks"]
        frame[chain] = (pooled[f"{chain}_ibt_sum"] / count.where(count > 0)).to_numpy()
    return frame


def dump_trace(result, config, trace_dir):
    os.makedirs(trace_dir, exist_ok=True)
    prefix = os.path.join(trace_dir, f"trial_{result.trial_index:04d}")
    for chain, blocks in result.blocks.items():
        write_csv(blocks, f"{prefix}_{chain}_blocks.csv")
    write_csv(result.allocations, f"{prefix}_allocations.csv", index=True)


def _run_and_bucket(task):
    config, trial_index, trace_dir = task
    result = run_trial(config, trial_index)
    if trace_dir:
        dump_trace(result, config, trace_dir)
    return bucket_trial(result, config), result.floor_binding_hours


@dataclass(frozen=True)
class ExperimentSummary:
    """Median shocked-chain allocation and pooled mean IBT per chain, per bucket relative to the shock."""
    frame: pd.DataFrame
    trials: int
    shock_chain: str
    floor_binding_hours: int = 0

    def to_csv_frame(self):
        focus = self.shock_chain
        chains = [focus] + [c for c in self.frame.columns if c not in ("allocation", focus)]
        out = pd.DataFrame(index=self.frame.index)
        out[f"median_{focus.lower()}_allocation"] = self.frame["allocation"]
        for chain in chains:
            out[f"mean_{chain.lower()}_ibt_seconds"] = self.frame[chain]
        out["trials"] = self.trials
        return out


def run_experiment(config, workers=None, trace_dir=None):
    """Runs every trial (in parallel when workers > 1) and reduces in trial order."""
    workers = settings.workers if workers is None else workers
    if config.master_seed is None:
        raise ConfigError("a master seed is required")
    tasks = [(config, i, trace_dir) for i in range(config.trials)]
    logger.info(f"Running {config.trials} trial(s) at x={config.shock_multiplier} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_run_and_bucket, tasks))
    else:
        results = [_run_and_bucket(task) for task in tasks]

    frame = summarize_buckets([r[0] for r in results], config.chain_ids)
    floor_hours = sum(r[1] for r in results)
    logger.info(f"Finished {config.trials} trial(s)")
    return ExperimentSummary(frame, config.trials, config.shock_chain, floor_hours)
