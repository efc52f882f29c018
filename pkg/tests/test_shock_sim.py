import functools
import json
import os

import numpy as np
import pandas as pd
import pytest

from modules.market_data import DEFAULT_CHAINS, HOUR, ProfitSeries, volatility_matrix
from modules import shock_sim
from modules.risk_inference import MinerParams
from modules.shock_sim import (
    DEFAULT_MINERS,
    ShockConfig,
    SimBlock,
    SimChainState,
    bch_daa_next_difficulty,
    btc_daa_next_difficulty,
    bucket_trial,
    config_to_json,
    generate_shock_prices,
    load_shock_config,
    run_experiment,
    run_trial,
    summarize_buckets,
)
from utils.errors import ConfigError, InsufficientHistory

BTC_SPEC, BCH_SPEC = DEFAULT_CHAINS


def small_config(**overrides):
    values = dict(
        miners=(MinerParams("A", 4, 1e-4),),
        hash_weights=(1.0,),
        warmup_days=15,
        horizon_days=1,
        report_pre_hours=24,
        trials=2,
        master_seed=7,
    )
    values.update(overrides)
    return ShockConfig(**values)


def test_default_config_matches_fitted_miners():
    config = ShockConfig()

    assert [m.miner_id for m in config.miners] == ["ViaBTC", "BTC.TOP", "AntPool", "BTC.com"]
    assert config.prefix_hours == 144 + 16
    assert config.shock_hour == 21 * 24


@pytest.mark.parametrize("multiplier", [0.5, 2.0])
def test_noiseless_prices_are_a_step(multiplier):
    config = small_config(noise_fraction=0.0, shock_multiplier=multiplier)

    prices = generate_shock_prices(config, 3).frame

    assert len(prices) == config.total_hours + 1
    assert prices.index[1] - prices.index[0] == HOUR
    assert (prices["BTC"] == 9500.0).all()
    before = prices.index < config.shock_hour * HOUR
    assert (prices.loc[before, "BCH"] == 1400.0).all()
    np.testing.assert_allclose(prices.loc[~before, "BCH"], 1400.0 * multiplier)


def test_noisy_prices_stay_in_band_and_repeat_per_seed():
    config = small_config(shock_multiplier=0.5)

    prices = generate_shock_prices(config, 11).frame
    post = prices.index >= config.shock_hour * HOUR

    assert prices["BTC"].between(9500.0 * 0.9, 9500.0 * 1.1).all()
    assert prices.loc[post, "BCH"].between(700.0 - 140.0, 700.0 + 140.0).all()
    pd.testing.assert_frame_equal(prices, generate_shock_prices(config, 11).frame)
    assert not prices.equals(generate_shock_prices(config, 12).frame)


def test_price_floor_holds_under_extreme_noise():
    config = small_config(shock_multiplier=0.1, noise_fraction=0.999)

    prices = generate_shock_prices(config, 5).frame

    assert (prices["BCH"] >= 0.01 * 1400.0 * 0.1).all()
    assert (prices["BTC"] >= 0.01 * 9500.0).all()


def spaced_blocks(count, spacing, difficulty):
    return [SimBlock(h, float(h * spacing), difficulty) for h in range(count)]


@pytest.mark.parametrize("spacing,expected", [(600.0, 1.0), (300.0, 2.0), (6000.0, 0.25)])
def test_window_daa_examples(spacing, expected):
    d = 5.0e5

    assert bch_daa_next_difficulty(spaced_blocks(145, spacing, d)) == pytest.approx(expected * d)
    # medians of three need two extra blocks before the window
    assert bch_daa_next_difficulty(spaced_blocks(147, spacing, d), median_of_three=True) == pytest.approx(expected * d)


def test_window_daa_needs_a_full_window():
    with pytest.raises(InsufficientHistory):
        bch_daa_next_difficulty(spaced_blocks(144, 600.0, 1.0))


@pytest.mark.parametrize("spacing,factor", [(600.0, 1.0), (300.0, 2.0), (60.0, 4.0), (6000.0, 0.25)])
def test_epoch_daa_examples(spacing, factor):
    assert btc_daa_next_difficulty(spaced_blocks(2017, spacing, 8.0)) == pytest.approx(8.0 * factor)


def test_window_chain_holds_difficulty_until_history_exists():
    state = SimChainState(BCH_SPEC, 100.0)
    state.history.append(SimBlock(0, 0.0, 100.0))

    for k in range(1, 144):
        state.add_block(k * 300.0)
        state.retarget()
    assert state.difficulty == 100.0

    state.add_block(144 * 300.0)
    state.retarget()
    assert state.difficulty == pytest.approx(200.0)


@pytest.mark.parametrize("overrides", [
    dict(shock_multiplier=5.0),
    dict(shock_multiplier=0.0),
    dict(warmup_days=10),
    dict(report_pre_hours=400),
    dict(shock_chain="LTC"),
    dict(hash_weights=(1.0, 2.0)),
    dict(inelastic_fraction=1.0),
])
def test_invalid_configs_are_rejected(overrides):
    with pytest.raises(ConfigError):
        small_config(**overrides)


def test_load_shock_config(tmp_path):
    path = tmp_path / "shock.json"
    path.write_text(json.dumps({
        "schema_version": 1,
        "miners": [{"miner": "A", "lookback_hours": 4, "risk": 1e-4}],
        "warmup_days": 15,
        "horizon_days": 1,
        "report_pre_hours": 24,
    }))

    config = load_shock_config(path, shock_multiplier=0.5, trials=None, master_seed=9)

    assert config.hash_weights == (1.0,)
    assert config.shock_multiplier == 0.5
    assert config.trials == 180
    assert config.master_seed == 9
    assert [m.miner_id for m in load_shock_config().miners] == [m.miner_id for m in DEFAULT_MINERS]
    assert config_to_json(config)["miners"] == [{"miner": "A", "lookback_hours": 4, "risk": 1e-4}]


@pytest.mark.parametrize("payload", [
    {"miners": []},
    {"schema_version": 2},
    {"schema_version": 1, "colour": "red"},
    {"schema_version": 1, "chains": [{"chain_id": "BTC", "era": 1}]},
])
def test_load_shock_config_rejects_bad_files(tmp_path, payload):
    path = tmp_path / "shock.json"
    path.write_text(json.dumps(payload))

    with pytest.raises(ConfigError):
        load_shock_config(path)


def test_trial_requires_a_seed():
    with pytest.raises(ConfigError):
        run_trial(small_config(master_seed=None), 0)


def test_trial_is_deterministic_per_seed_and_index():
    config = small_config(shock_multiplier=0.5)

    first, again, other = run_trial(config, 0), run_trial(config, 0), run_trial(config, 1)

    for chain in config.chain_ids:
        pd.testing.assert_frame_equal(first.blocks[chain], again.blocks[chain])
    pd.testing.assert_frame_equal(first.allocations, again.allocations)
    assert not first.blocks["BCH"].equals(other.blocks["BCH"])


def test_trial_traces_are_well_formed():
    config = small_config(shock_multiplier=2.0)

    result = run_trial(config, 0)

    np.testing.assert_allclose(result.allocations.sum(axis=1), 1.0, atol=1e-12)
    assert (result.allocations.to_numpy() >= 0.99 * config.allocation_floor).all()
    assert result.allocations.index[0] == config.prefix_hours
    for blocks in result.blocks.values():
        assert len(blocks) > 0
        assert (blocks["difficulty"] > 0).all()
        assert (blocks["ibt"] > 0).all()
        assert blocks["height"].tolist() == list(range(1, len(blocks) + 1))
        assert blocks["timestamp"].max() < config.total_hours * HOUR


def test_inelastic_hash_stays_near_equilibrium():
    config = small_config(inelastic_fraction=0.999)

    allocations = run_trial(config, 0).allocations

    np.testing.assert_allclose(allocations["BCH"], 1400.0 / 10900.0, atol=2e-3)


def test_bucket_trial_is_relative_to_the_shock():
    config = small_config()

    frame = bucket_trial(run_trial(config, 0), config)

    assert frame.index.tolist() == list(range(-24, 24, 6))
    assert frame.columns.tolist() == ["allocation", "BTC_ibt_sum", "BTC_blocks", "BCH_ibt_sum", "BCH_blocks"]
    assert frame.notna().all().all()
    assert (frame["BCH_blocks"] > 0).all()


def trial_buckets(allocation, bch_ibts):
    """One trial's buckets at -6 and 0 with the given BCH IBTs and steady 600 s BTC blocks."""
    index = pd.Index([-6, 0], name="bucket_start_hours_from_shock")
    return pd.DataFrame({
        "allocation": allocation,
        "BTC_ibt_sum": [3600.0, 3600.0],
        "BTC_blocks": [6, 6],
        "BCH_ibt_sum": [sum(ibts) for ibts in bch_ibts],
        "BCH_blocks": [len(ibts) for ibts in bch_ibts],
    }, index=index)


def test_bucket_ibt_is_pooled_over_blocks_not_averaged_per_trial():
    buckets = [
        trial_buckets([0.1, 0.2], [[1200.0], []]),
        trial_buckets([0.3, 0.4], [[400.0, 400.0, 400.0], []]),
        trial_buckets([0.2, np.nan], [[600.0, 600.0], []]),
    ]

    frame = summarize_buckets(buckets, ["BTC", "BCH"])

    # the slow trial's one block counts once, not as a whole trial
    assert frame.loc[-6, "BCH"] == pytest.approx(3600.0 / 6)
    assert np.isnan(frame.loc[0, "BCH"])
    np.testing.assert_allclose(frame["BTC"], 600.0)
    np.testing.assert_allclose(frame["allocation"], [0.2, 0.3])


def test_allocation_is_resolved_after_every_retarget(monkeypatch):
    config = small_config()
    calls = []
    solve = shock_sim._economic_allocation

    def recording(config, pi, hour):
        calls.append((hour, pi[hour].copy()))
        return solve(config, pi, hour)

    monkeypatch.setattr(shock_sim, "_economic_allocation", recording)
    result = run_trial(config, 0)

    # one solve per hour plus one per BCH block after the first full window
    bch_retargets = len(result.blocks["BCH"]) - 143
    assert len(calls) >= len(result.allocations) + bch_retargets
    repriced = [
        hour for (hour, row), (next_hour, next_row) in zip(calls, calls[1:])
        if hour == next_hour and not np.array_equal(row, next_row)
    ]
    assert repriced


def test_experiment_does_not_depend_on_worker_count():
    config = small_config(shock_multiplier=0.5)

    serial = run_experiment(config, workers=1)
    parallel = run_experiment(config, workers=2)

    pd.testing.assert_frame_equal(serial.frame, parallel.frame)
    assert serial.to_csv_frame().columns.tolist() == [
        "median_bch_allocation", "mean_bch_ibt_seconds", "mean_btc_ibt_seconds", "trials",
    ]
    assert (serial.to_csv_frame()["trials"] == 2).all()


def test_experiment_writes_traces(tmp_path):
    run_experiment(small_config(trials=1), workers=1, trace_dir=tmp_path)

    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["trial_0000_BCH_blocks.csv", "trial_0000_BTC_blocks.csv", "trial_0000_allocations.csv"]


def constant_hash_ibts(spec, blocks, start_difficulty, seed):
    """IBTs of a chain whose hash is fixed so that difficulty 1e6 means the target IBT."""
    rng = np.random.default_rng(seed)
    seconds_per_difficulty = spec.target_ibt / 1.0e6
    state = SimChainState(spec, start_difficulty)
    state.history.append(SimBlock(0, 0.0, start_difficulty))
    now = 0.0
    for _ in range(blocks):
        now += rng.exponential(state.difficulty * seconds_per_difficulty)
        state.add_block(now)
        state.retarget()
    return np.array([b[3] for b in state.blocks])


@pytest.mark.slow
@pytest.mark.parametrize("spec", [BTC_SPEC, BCH_SPEC], ids=["epoch", "window"])
def test_difficulty_adjustment_reaches_the_target_ibt(spec):
    ibts = constant_hash_ibts(spec, 100_000, 1.5e6, seed=21)

    settled = ibts[4032:]
    assert 588.0 <= settled.mean() <= 612.0


@pytest.mark.slow
def test_volatility_returns_to_baseline_once_the_shock_leaves_the_window():
    config = ShockConfig(shock_multiplier=0.5, master_seed=1)
    lookback, cooldown = 144, 16
    shock = config.shock_hour
    base = np.asarray(config.base_prices)
    pre, post, during = [], [], []

    def bch_variance(series, hour):
        return volatility_matrix(series, hour * HOUR, lookback, cooldown).entries[1, 1]

    for seed in range(40):
        series = ProfitSeries(generate_shock_prices(config, seed).frame / base)
        pre.append(bch_variance(series, shock - 1))
        post.append(bch_variance(series, shock + lookback + cooldown + 1))
        during.append(bch_variance(series, shock + cooldown))
    pre, post = np.array(pre), np.array(post)

    standard_error = np.sqrt(pre.var(ddof=1) / pre.size + post.var(ddof=1) / post.size)
    assert abs(post.mean() - pre.mean()) <= 3.0 * standard_error
    assert np.mean(during) > 2.0 * pre.mean()


@pytest.mark.slow
def test_unshocked_experiment_is_flat():
    config = ShockConfig(shock_multiplier=1.0, trials=8, horizon_days=4, master_seed=3)

    summary = run_experiment(config, workers=1).frame
    pre = summary.index < 0

    assert abs(summary.loc[~pre, "allocation"].mean() - summary.loc[pre, "allocation"].mean()) < 0.05
    for chain in config.chain_ids:
        assert summary[chain].mean() == pytest.approx(600.0, rel=0.1)


@functools.lru_cache(maxsize=None)
def default_experiment(multiplier):
    config = ShockConfig(shock_multiplier=multiplier, master_seed=2018)
    return run_experiment(config, workers=os.cpu_count() or 1).frame


def hours_from_shock(frame, start, end):
    return frame[(frame.index >= start) & (frame.index < end)]


@pytest.mark.slow
def test_half_price_shock_slows_bch_for_a_day():
    ibt = default_experiment(0.5)["BCH"]
    target = BCH_SPEC.target_ibt

    assert hours_from_shock(ibt, 0, 24).mean() >= 1.4 * target
    assert 1.5 * target <= ibt[ibt.index >= 0].max() <= 2.5 * target
    assert hours_from_shock(ibt, 72, 96).mean() == pytest.approx(target, rel=0.1)


@pytest.mark.slow
@pytest.mark.parametrize("multiplier", [
    0.5,
    pytest.param(2.0, marks=pytest.mark.xfail(
        reason="a price step leaves the minimum-variance point at the difficulty share, "
               "so a BCH price rise tilts the two-chain allocation towards BCH",
        strict=False,
    )),
])
def test_allocation_dips_on_the_first_day_after_a_shock(multiplier):
    allocation = default_experiment(multiplier)["allocation"]

    pre = allocation[allocation.index < 0].median()

    assert hours_from_shock(allocation, 0, 24).median() < pre


@pytest.mark.slow
def test_allocation_rises_once_the_longest_lookback_clears_the_shock():
    allocation = default_experiment(0.5)["allocation"]
    expiry = max(m.lookback_hours for m in DEFAULT_MINERS) + BCH_SPEC.cooldown_hours

    before = hours_from_shock(allocation, expiry - 24, expiry - 6).mean()
    after = hours_from_shock(allocation, expiry + 6, expiry + 24).mean()

    assert after > before
