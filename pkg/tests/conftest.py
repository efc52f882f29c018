import os

os.environ.setdefault("HASHALLOC_LOG_FILE", "")

import numpy as np
import pandas as pd
import pytest

from modules.market_data import HOUR, ProfitSeries

BASE_PRICES = {"BTC": 9500.0, "BCH": 1400.0}


def synthetic_prices(hours, seed=0, bch_walk=0.02, noise=0.01):
    """Hourly BTC/BCH prices: BTC with small uniform noise, BCH on a log random walk."""
    rng = np.random.default_rng(seed)
    btc = BASE_PRICES["BTC"] * (1.0 + noise * rng.uniform(-1, 1, hours))
    bch = BASE_PRICES["BCH"] * np.exp(np.cumsum(bch_walk * rng.standard_normal(hours)))
    index = pd.Index(np.arange(hours, dtype="int64") * HOUR, name="timestamp")
    return pd.DataFrame({"BTC": btc, "BCH": bch}, index=index)


def parity_difficulties(scale=1.0e6):
    rewards = np.array([12.5 * BASE_PRICES["BTC"], 12.5 * BASE_PRICES["BCH"]])
    shares = rewards / rewards.sum()
    return {"BTC": scale * shares[0], "BCH": scale * shares[1]}


def synthetic_market(hours, seed=0, difficulty_walk=0.005, **kwargs):
    """Profit series over synthetic prices and slowly drifting difficulties.

    Difficulties must move: with both held fixed the lagged profit differences
    are orthogonal to D and the volatility matrix is singular.
    """
    prices = synthetic_prices(hours, seed, **kwargs)
    difficulty = parity_difficulties()
    rewards = prices * 12.5
    drift = np.random.default_rng(seed + 10_000).standard_normal((hours, 2))
    D = pd.DataFrame(
        {c: difficulty[c] * np.exp(np.cumsum(difficulty_walk * drift[:, k])) for k, c in enumerate(prices.columns)},
        index=prices.index,
    )
    frame = (rewards / D).mul(D.sum(axis=1) / rewards.sum(axis=1), axis=0)
    return ProfitSeries(frame, rewards=rewards, difficulties=D)


def write_price_csv(path, prices):
    rows = [
        f"{ts},{chain},{float(prices.at[ts, chain])!r}"
        for ts in prices.index
        for chain in prices.columns
    ]
    path.write_text("timestamp,chain,price_usd\n" + "\n".join(rows) + "\n")
    return path


def write_difficulty_csv(path, difficulties, timestamp=0):
    rows = [f"{timestamp},{chain},{float(value)!r}" for chain, value in difficulties.items()]
    path.write_text("timestamp,chain,difficulty\n" + "\n".join(rows) + "\n")
    return path


@pytest.fixture
def market():
    return synthetic_market(24 * 40, seed=1)
