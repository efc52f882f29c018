import numpy as np
import pandas as pd
import pytest

from conftest import synthetic_market
from modules.market_data import (
    DEFAULT_CHAINS,
    HOUR,
    BlockRecord,
    DifficultySeries,
    PriceSeries,
    ProfitSeries,
    profit_series,
    rolling_expected_profit,
    rolling_volatility,
    volatility_matrix,
)
from modules.portfolio_core import PIPELINE_POLICY, inferred_risk, solve_max_profit_batch
from modules.risk_inference import (
    ActualAllocationSeries,
    MinerParams,
    actual_allocation_series,
    economic_allocation_path,
    evaluate_grid,
    ewma_decay,
    fit_parameters,
    fit_results_payload,
    hash_weight_series,
    infer_risk_series,
    inferred_root_risk_series,
    ks_statistic,
    lookback_candidates,
    paired_ks_statistic,
    risk_candidates,
    select_best_cell,
)
from utils.errors import EmptyInput, InsufficientHistory, UnknownMiner

CHAINS = ["BTC", "BCH"]


def constant_difficulty(btc, bch):
    return DifficultySeries({"BTC": pd.Series([btc], index=[0]), "BCH": pd.Series([bch], index=[0])})


def hourly_blocks(miner, chain_pattern, hours, start=0):
    """One block per listed chain per hour, mined a minute into the hour."""
    blocks = []
    heights = {"BTC": 0, "BCH": 0}
    for h in range(hours):
        for chain in chain_pattern:
            heights[chain] += 1
            blocks.append(BlockRecord(chain, heights[chain], start + h * HOUR + 60, miner, 1.0))
    return blocks


def test_lookback_candidates():
    candidates = lookback_candidates()

    assert len(candidates) == 18
    assert candidates[0] == 4
    assert candidates == sorted(set(candidates))
    assert {4, 10, 16, 22, 144, 1008, 1344} <= set(candidates)


def test_ewma_half_life():
    alpha = ewma_decay(10)

    assert alpha == pytest.approx(0.9330329915, abs=1e-10)
    assert alpha ** 10 == pytest.approx(0.5, abs=1e-12)


def test_pure_chain_miner_has_unit_allocation_for_any_difficulty():
    blocks = hourly_blocks("ViaBTC", ["BCH"], 48) + hourly_blocks("Other", ["BTC"], 48)

    for difficulty in (constant_difficulty(10.0, 10.0), constant_difficulty(1e9, 3.0)):
        actual = actual_allocation_series(blocks, difficulty, "ViaBTC", chains=CHAINS)
        assert (actual.frame["BCH"] == 1.0).all()
        assert (actual.frame["BTC"] == 0.0).all()


@pytest.mark.parametrize("btc,bch,expected", [(10.0, 10.0, 0.5), (30.0, 10.0, 0.75)])
def test_equal_block_rates_are_scaled_by_difficulty(btc, bch, expected):
    blocks = hourly_blocks("AntPool", ["BTC", "BCH"], 24)

    actual = actual_allocation_series(blocks, constant_difficulty(btc, bch), "AntPool", chains=CHAINS)

    np.testing.assert_allclose(actual.frame["BTC"], expected, atol=1e-12)
    np.testing.assert_allclose(actual.frame.sum(axis=1), 1.0, atol=1e-12)


def test_hash_weight_reaches_rate_times_difficulty():
    blocks = hourly_blocks("BTC.com", ["BCH"], 300)

    weights = hash_weight_series(blocks, constant_difficulty(600.0, 600.0), "BTC.com", chains=CHAINS).weights

    assert weights.iloc[-1] == pytest.approx(600.0, rel=1e-4)
    assert weights.is_monotonic_increasing


def test_hash_weight_decays_once_blocks_stop():
    blocks = hourly_blocks("BTC.com", ["BCH"], 10) + hourly_blocks("Other", ["BTC"], 200)

    weights = hash_weight_series(blocks, constant_difficulty(1.0, 1.0), "BTC.com", chains=CHAINS).weights

    assert weights.iloc[-1] < 1e-3 * weights.max()


def test_allocations_and_profits_read_the_same_difficulty():
    blocks = hourly_blocks("AntPool", ["BTC", "BCH"], 4)
    difficulty = DifficultySeries({
        "BTC": pd.Series([10.0], index=[0]),
        "BCH": pd.Series([10.0, 40.0], index=[0, 2 * HOUR + 1800]),
    })
    index = pd.Index(np.arange(4) * HOUR, name="timestamp")
    prices = PriceSeries(pd.DataFrame({"BTC": [1.0] * 4, "BCH": [1.0] * 4}, index=index))

    actual = actual_allocation_series(blocks, difficulty, "AntPool", chains=CHAINS)
    market = profit_series(prices, difficulty, DEFAULT_CHAINS)

    # a mid-hour retarget counts for the hour it happens in
    np.testing.assert_allclose(actual.frame["BCH"].to_numpy(), [0.5, 0.5, 0.8, 0.8])
    np.testing.assert_allclose(market.difficulties["BCH"].to_numpy(), [10.0, 10.0, 40.0, 40.0])


def test_unknown_miner():
    with pytest.raises(UnknownMiner):
        actual_allocation_series(hourly_blocks("A", ["BTC"], 5), constant_difficulty(1.0, 1.0), "B")


def constant_actual(market, weights, miner="M"):
    frame = pd.DataFrame([weights] * len(market.hours), index=market.frame.index, columns=CHAINS)
    return ActualAllocationSeries(miner, frame)


def test_inferred_risk_matches_point_computation(market):
    actual = constant_actual(market, [1.0, 0.0])

    risk = infer_risk_series(actual, market, 24, 16)

    t = market.hours[300]
    sigma = volatility_matrix(market, t, 24, 16)
    assert risk.loc[t] == pytest.approx(inferred_risk([1.0, 0.0], sigma), rel=1e-9)
    assert risk.loc[t] == pytest.approx(sigma.entries[0, 0], rel=1e-9)
    np.testing.assert_allclose(inferred_root_risk_series(actual, market, 24, 16), np.sqrt(risk))


def test_inferred_risk_is_zero_without_volatility():
    index = pd.Index(np.arange(100) * HOUR, name="timestamp")
    flat = ProfitSeries(pd.DataFrame(1.0, index=index, columns=CHAINS))

    risk = infer_risk_series(constant_actual(flat, [0.3, 0.7]), flat, 24, 16)

    assert (risk == 0.0).all()
    with pytest.raises(InsufficientHistory):
        infer_risk_series(constant_actual(flat, [0.3, 0.7]), flat, 90, 16)


def brute_force_ks(xs, ys):
    best = 0.0
    for threshold in np.concatenate([xs, ys]):
        fx = np.mean(np.asarray(xs) <= threshold)
        fy = np.mean(np.asarray(ys) <= threshold)
        best = max(best, abs(fx - fy))
    return best


def test_ks_examples():
    assert ks_statistic([0.1, 0.2, 0.2], [0.2, 0.1, 0.2]) == 0.0
    assert ks_statistic([0.0, 0.1], [0.5, 0.9]) == 1.0
    assert ks_statistic([0.0, 0.5], [0.5, 1.0]) == pytest.approx(0.5)
    assert paired_ks_statistic([0.2, 0.4], [0.2, 0.4]) == 0.0
    with pytest.raises(EmptyInput):
        ks_statistic([], [1.0])


rng = np.random.default_rng(5)
KS_PAIRS = [
    (rng.integers(0, 6, rng.integers(1, 9)) / 5.0, rng.integers(0, 6, rng.integers(1, 9)) / 5.0)
    for _ in range(200)
]


@pytest.mark.parametrize("xs,ys", KS_PAIRS)
def test_ks_matches_brute_force_ecdf(xs, ys):
    assert ks_statistic(xs, ys) == pytest.approx(brute_force_ks(xs, ys), abs=1e-12)


def test_risk_candidates_span_the_interquartile_range():
    candidates = risk_candidates(np.arange(1.0, 101.0))

    assert len(candidates) == 8
    assert candidates[0] == pytest.approx(np.percentile(np.arange(1.0, 101.0), 25))
    assert candidates[-1] == pytest.approx(np.percentile(np.arange(1.0, 101.0), 75))


def planted_actual(market, lookback, risk_scale=1.5):
    """Actual allocations generated by the model itself at a known lookback.

    Only hours where the solver lands on the frontier unclamped are kept, so
    the inferred risk of every kept hour equals the planted risk.
    """
    mu = rolling_expected_profit(market, lookback)
    sigma = rolling_volatility(market, lookback, 16)
    usable = np.isfinite(sigma).all(axis=(1, 2))
    inv = np.linalg.solve(sigma[usable], np.ones((int(usable.sum()), 2, 1)))
    risk = risk_scale * float(np.median(1.0 / inv.sum(axis=(1, 2))))
    outcome = solve_max_profit_batch(mu, sigma, risk, PIPELINE_POLICY)
    keep = outcome.available & ~outcome.risk_clamped & ~outcome.weights_clamped & ~outcome.singular
    frame = pd.DataFrame(outcome.weights[keep], index=market.frame.index[keep], columns=market.chains)
    return ActualAllocationSeries("Planted", frame), risk


def test_economic_path_reproduces_planted_hours(market):
    actual, risk = planted_actual(market, 48)

    path = economic_allocation_path(market, 48, risk, 16)

    np.testing.assert_allclose(path.frame.loc[actual.frame.index].to_numpy(), actual.frame.to_numpy(), atol=1e-12)
    assert path.singular_hours == 0
    assert len(actual.frame) > len(market.hours) // 2


def test_fit_returns_the_grid_minimum(market):
    actual, _ = planted_actual(market, 48)

    grid = evaluate_grid(actual, market, 16)
    params = fit_parameters(actual, market, 16, min_history_days=10)

    assert set(grid.columns) >= {"lookback_hours", "risk", "ks", "mae"}
    assert len(grid) <= 18 * 8
    assert params.fit_statistic == pytest.approx(grid["ks"].min())
    best = select_best_cell(grid)
    assert (params.lookback_hours, params.risk) == (int(best["lookback_hours"]), pytest.approx(best["risk"]))


def test_identical_series_fit_with_zero_error(market):
    actual, _ = planted_actual(market, 48)

    grid = evaluate_grid(actual, market, 16, lookbacks=[48], ks_mode="paired")

    assert grid["mae"].min() < 1e-6


def test_select_best_cell_breaks_ties_by_lookback_then_risk():
    grid = pd.DataFrame({
        "lookback_hours": [48, 24, 24, 72],
        "risk": [1e-4, 3e-4, 2e-4, 1e-5],
        "ks": [0.1, 0.1, 0.1, 0.2],
        "mae": [0.0, 0.0, 0.0, 0.0],
    })

    best = select_best_cell(grid)

    assert best["lookback_hours"] == 24
    assert best["risk"] == 2e-4


def test_fit_requires_enough_history(market):
    actual, _ = planted_actual(market, 48)

    with pytest.raises(InsufficientHistory):
        fit_parameters(actual, market, 16, min_history_days=60)


def test_fit_results_payload_has_stable_keys():
    payload = fit_results_payload([MinerParams("ViaBTC", 144, 6.42e-4, 0.1, 0.2)])

    assert list(payload[0]) == ["miner", "lookback_hours", "risk", "ks", "mae"]


@pytest.mark.slow
def test_fit_recovers_planted_parameters():
    recovered = 0
    candidates = lookback_candidates()
    for seed in range(20):
        market = synthetic_market(24 * 40, seed=100 + seed)
        actual, risk = planted_actual(market, 48)
        params = fit_parameters(actual, market, 16, min_history_days=10)
        position = candidates.index(params.lookback_hours)
        grid = evaluate_grid(actual, market, 16, lookbacks=[48])
        step = float(np.diff(grid["risk"]).max()) if len(grid) > 1 else 0.0
        if abs(position - candidates.index(48)) <= 1 and abs(params.risk - risk) <= max(step, 1e-3 * risk):
            recovered += 1
    assert recovered >= 18
