import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import pandas as pd

from modules.aggregate import (
    ALLOCATION_SUFFIX,
    IBT_PREFIX,
    compare_series,
    dari_baseline_series,
    economic_allocation_series,
    predict_ibt_series,
    price_baseline_series,
)
from modules.market_data import (
    DEFAULT_CHAINS,
    blocks_frame,
    difficulty_from_blocks,
    load_blocks_csv,
    load_chain_specs,
    load_difficulty_csv,
    load_hash_weights_csv,
    load_price_csv,
    profit_series,
)
from modules.risk_inference import (
    KsMode,
    MinerParams,
    HashWeightSeries,
    actual_allocation_series,
    fit_parameters,
    fit_results_payload,
    hash_weight_series,
)
from modules.shock_sim import config_to_json, load_shock_config, run_experiment
from utils.config import settings
from utils.errors import ConfigError, EmptyInput, HashAllocError, ParseError, UnknownMiner
from utils.file_utils import file_digest, payload_digest, write_csv, write_json, write_text
from utils.logger import logger

TOOL_VERSION = "1.0.0"


@dataclass
class RunManifest:
    """Inputs, digests and outputs of one command; holds no wall-clock values."""
    command: str
    inputs: Dict[str, str] = field(default_factory=dict)
    config_digest: Optional[str] = None
    master_seed: Optional[int] = None
    tool_version: str = TOOL_VERSION
    outputs: List[str] = field(default_factory=list)

    def add_input(self, path):
        if path:
            self.inputs[path] = file_digest(path)

    def to_json(self):
        return {
            "command": self.command,
            "config_digest": self.config_digest,
            "inputs": dict(sorted(self.inputs.items())),
            "master_seed": self.master_seed,
            "outputs": list(self.outputs),
            "tool_version": self.tool_version,
        }

    def write(self, out_path):
        manifest_path = f"{out_path}.manifest.json"
        write_json(self.to_json(), manifest_path)
        return manifest_path

    @classmethod
    def read(cls, path):
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        return cls(**payload)

    def verify(self):
        """Paths whose current digest differs from the recorded one."""
        return [p for p, digest in self.inputs.items() if not os.path.exists(p) or file_digest(p) != digest]


def gnuplot_script(csv_path, x_column, y_columns, ylabel):
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set xlabel '{x_column}'",
        f"set ylabel '{ylabel}'",
        "set grid",
    ]
    plots = [f"'{csv_path}' using '{x_column}':'{column}' with lines" for column in y_columns]
    lines.append("plot " + ", \\\n     ".join(plots))
    return "\n".join(lines) + "\n"


class ProcessingEngine:
    def __init__(self, chains_path=None, workers=None):
        self.chains_path = chains_path
        self.chains = load_chain_specs(chains_path) if chains_path else list(DEFAULT_CHAINS)
        self.workers = settings.workers if workers is None else workers

    @property
    def cooldown_hours(self):
        return max(spec.cooldown_hours for spec in self.chains)

    def _market(self, prices_path, difficulty_path, blocks=None):
        prices = load_price_csv(prices_path)
        if difficulty_path:
            difficulties = load_difficulty_csv(difficulty_path)
        elif blocks is not None:
            difficulties = difficulty_from_blocks(blocks)
        else:
            raise ConfigError("a difficulty file or a blocks file is required")
        return prices, difficulties, profit_series(prices, difficulties, self.chains)

    def _manifest(self, command, *inputs):
        manifest = RunManifest(command)
        if self.chains_path:
            manifest.add_input(self.chains_path)
        for path in inputs:
            manifest.add_input(path)
        return manifest

    def run_fit(self, prices_path, blocks_path, miners, out_path, difficulty_path=None,
                cooldown_hours=None, ks_mode=KsMode.DISTRIBUTION):
        """Fits (lookback, risk) for each named miner and writes the JSON results."""
        logger.info(f"Fitting {len(miners)} miner(s)")
        cooldown = self.cooldown_hours if cooldown_hours is None else cooldown_hours
        blocks = load_blocks_csv(blocks_path, self.chains)
        _, difficulties, market = self._market(prices_path, difficulty_path, blocks)
        frame = blocks_frame(blocks)

        params = []
        for miner in miners:
            actual = actual_allocation_series(frame, difficulties, miner, chains=market.chains)
            params.append(fit_parameters(actual, market, cooldown, ks_mode=ks_mode, workers=self.workers))

        write_json(fit_results_payload(params), out_path)
        manifest = self._manifest("fit", prices_path, difficulty_path, blocks_path)
        manifest.config_digest = payload_digest({"miners": list(miners), "cooldown_hours": cooldown, "ks_mode": KsMode(ks_mode).value})
        manifest.outputs = [out_path]
        manifest.write(out_path)
        return params

    def _load_params(self, params_path):
        try:
            with open(params_path, encoding="utf-8") as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"could not read miner parameters: {e}", path=params_path) from e
        if not isinstance(payload, list) or not payload:
            raise EmptyInput(f"{params_path}: expected a non-empty list of miner parameters")
        try:
            return [
                MinerParams(
                    str(p["miner"]),
                    int(p["lookback_hours"]),
                    float(p["risk"]),
                    float(p.get("ks", float("nan"))),
                    float(p.get("mae", float("nan"))),
                )
                for p in payload
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"invalid miner parameter entry: {e}", path=params_path) from e

    def _load_hash_weights(self, path):
        """CSV `timestamp,miner,weight` into one HashWeightSeries per miner."""
        return [HashWeightSeries(str(miner), series) for miner, series in load_hash_weights_csv(path).items()]

    def run_allocate(self, prices_path, params_path, out_path, difficulty_path=None, hash_weights_path=None,
                     blocks_path=None, cooldown_hours=None, gnuplot_path=None):
        """Hourly aggregate and per-miner economic allocations with the DARI and price baselines."""
        cooldown = self.cooldown_hours if cooldown_hours is None else cooldown_hours
        params = self._load_params(params_path)
        blocks = load_blocks_csv(blocks_path, self.chains) if blocks_path else None
        prices, difficulties, market = self._market(prices_path, difficulty_path, blocks)

        if hash_weights_path:
            weights = self._load_hash_weights(hash_weights_path)
        elif blocks is not None:
            frame = blocks_frame(blocks)
            weights = []
            for p in params:
                try:
                    weights.append(hash_weight_series(frame, difficulties, p.miner_id, chains=market.chains))
                except UnknownMiner:
                    logger.warning(f"{p.miner_id} has no blocks; it gets zero hash weight")
                    weights.append(HashWeightSeries(p.miner_id, pd.Series(dtype=float)))
        else:
            logger.warning("No hash weights or blocks given; miners are weighted equally")
            weights = None

        aggregate = economic_allocation_series(params, market, weights, cooldown)
        out = aggregate.to_csv_frame()
        hours = out.index
        dari = dari_baseline_series(market).reindex(hours)
        price = price_baseline_series(prices, market.chains).reindex(hours)
        out = out.join(dari.add_prefix("dari.").add_suffix(ALLOCATION_SUFFIX))
        out = out.join(price.add_prefix("price.").add_suffix(ALLOCATION_SUFFIX))
        write_csv(out, out_path, index=True)

        manifest = self._manifest("allocate", prices_path, difficulty_path, params_path, hash_weights_path, blocks_path)
        manifest.config_digest = payload_digest({"cooldown_hours": cooldown})
        manifest.outputs = [out_path]
        if gnuplot_path:
            columns = [f"{c}{ALLOCATION_SUFFIX}" for c in market.chains]
            write_text(gnuplot_script(out_path, "timestamp", columns, "allocation"), gnuplot_path)
            manifest.outputs.append(gnuplot_path)
        manifest.write(out_path)
        logger.info(f"Allocation complete: {len(out)} hours for {len(params)} miner(s)")
        return aggregate

    @staticmethod
    def _read_allocations(path):
        try:
            frame = pd.read_csv(path, index_col="timestamp")
        except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ParseError(f"could not read allocations: {e}", path=path) from e
        columns = [c for c in frame.columns if c.endswith(ALLOCATION_SUFFIX) and "." not in c]
        if not columns:
            raise ParseError(f"no <chain>{ALLOCATION_SUFFIX} columns", line=1, path=path)
        aggregate = frame[columns].dropna()
        aggregate.columns = [c[: -len(ALLOCATION_SUFFIX)] for c in columns]
        return aggregate

    @staticmethod
    def _read_actual_ibt(path):
        try:
            frame = pd.read_csv(path, index_col="period_start")
        except (OSError, ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ParseError(f"could not read actual IBT changes: {e}", path=path) from e
        return frame

    def run_predict_ibt(self, allocations_path, out_path, target=600.0, period_hours=6, rolling_days=7,
                        actual_path=None, focus_chain=None, gnuplot_path=None):
        """Predicted IBT change per bucket; with actual_path also {pearson, mae} against observed changes."""
        allocations = self._read_allocations(allocations_path)
        prediction = predict_ibt_series(allocations, [target] * allocations.shape[1], period_hours, rolling_days)
        out = prediction.to_csv_frame()
        write_csv(out, out_path, index=True)

        manifest = self._manifest("predict-ibt", allocations_path, actual_path)
        manifest.config_digest = payload_digest({"target": target, "period_hours": period_hours, "rolling_days": rolling_days})
        manifest.outputs = [out_path]

        metrics = None
        if actual_path:
            chain = focus_chain or settings.focus_chain
            column = f"{IBT_PREFIX}{chain}"
            actual = self._read_actual_ibt(actual_path)
            if column not in actual.columns or column not in out.columns:
                raise ConfigError(f"column {column!r} missing from the predicted or actual series")
            metrics = compare_series(actual[column], out[column])
            metrics_path = f"{os.path.splitext(out_path)[0]}.metrics.json"
            write_json(metrics, metrics_path)
            manifest.outputs.append(metrics_path)
            logger.info(f"IBT change vs actual: pearson {metrics['pearson']:.3f}, mae {metrics['mae']:.3f}")

        if gnuplot_path:
            write_text(gnuplot_script(out_path, "period_start", list(out.columns), "IBT change"), gnuplot_path)
            manifest.outputs.append(gnuplot_path)
        manifest.write(out_path)
        return prediction, metrics

    def run_shock(self, out_path, seed, config_path=None, multiplier=None, trials=None,
                  trace_dir=None, gnuplot_path=None):
        """Runs the shock experiment and writes the bucket summary."""
        config = load_shock_config(config_path, shock_multiplier=multiplier, trials=trials, master_seed=seed)
        summary = run_experiment(config, workers=self.workers, trace_dir=trace_dir)
        out = summary.to_csv_frame()
        write_csv(out, out_path, index=True)

        manifest = self._manifest("shock", config_path)
        manifest.config_digest = payload_digest(config_to_json(config))
        manifest.master_seed = config.master_seed
        manifest.outputs = [out_path]
        if gnuplot_path:
            columns = [c for c in out.columns if c != "trials"]
            write_text(gnuplot_script(out_path, out.index.name, columns, "value"), gnuplot_path)
            manifest.outputs.append(gnuplot_path)
        manifest.write(out_path)
        return summary

    def execute(self, command, **kwargs):
        """Runs one command and maps the outcome onto the exit-code contract."""
        runners = {
            "fit": self.run_fit,
            "allocate": self.run_allocate,
            "predict-ibt": self.run_predict_ibt,
            "shock": self.run_shock,
        }
        try:
            result = runners[command](**kwargs)
        except HashAllocError as e:
            logger.error(f"{command} failed: {e}", exc_info=True)
            return e.exit_code, str(e)
        except Exception as e:
            logger.error(f"{command} failed with an internal error: {e}", exc_info=True)
            return 4, str(e)
        logger.info(f"{command} finished")
        return 0, result
