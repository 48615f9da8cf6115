"""End-to-end runs on the synthetic world: single runs, ablation matrix, attribute-count sweep."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ABLATIONS, ExperimentConfig
from .data import Triplet, World, generate_world, sample_triplets
from .evaluation import EvalReport, evaluate
from .training import TrainState, TripletDataset, run_training

log = logging.getLogger(__name__)

ABLATION_ROWS = ("full", *ABLATIONS)


def seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with every model/optimizer seed derived from ``seed``.

    The world and the triplet samples stay fixed so seeds only vary training.
    """
    return config.with_overrides(
        {
            "train.seed": seed,
            "model.init_seed": seed,
            "model.image_encoder.seed": 2 * seed,
            "model.text_encoder.seed": 2 * seed + 1,
        }
    )


@dataclass
class SyntheticData:
    world: World
    train: list[Triplet]
    test: list[Triplet]


def build_data(config: ExperimentConfig) -> SyntheticData:
    cfg = config.resolve()
    world, _ = generate_world(cfg.world)
    d = cfg.data
    train = sample_triplets(world, d.n_train, d.max_changes, d.train_seed)
    test = sample_triplets(world, d.n_eval, d.max_changes, d.eval_seed, subset_size=d.subset_size)
    return SyntheticData(world, train, test)


@dataclass
class RunResult:
    state: TrainState
    report: EvalReport


def run_experiment(
    config: ExperimentConfig, data: SyntheticData | None = None, checkpoint_dir: str | Path | None = None, log_sink=None
) -> RunResult:
    cfg = config.resolve()
    data = data or build_data(cfg)
    state = run_training(cfg, TripletDataset(data.train, data.world.payloads), checkpoint_dir, log_sink=log_sink)
    report = evaluate(state.model, data.test, data.world.payloads, cfg.eval.ks, cfg.eval.subset_ks, cfg.eval.protocol)
    return RunResult(state, report)


def ablation_config(config: ExperimentConfig, row: str) -> ExperimentConfig:
    if row == "full":
        return config.with_overrides({"train.ablations": []})
    return config.with_overrides({"train.ablations": [row]})


def run_ablation_matrix(
    config: ExperimentConfig, seeds: Sequence[int] = (0,), rows: Sequence[str] = ABLATION_ROWS, run=run_experiment
) -> dict[str, list[EvalReport]]:
    """Train every ablation row for every seed on one shared synthetic dataset.

    ``run(config, data)`` performs a single run (swap in a caching wrapper to reuse runs).
    """
    data = build_data(config)
    results: dict[str, list[EvalReport]] = {}
    for row in rows:
        for seed in seeds:
            res = run(seeded(ablation_config(config, row), seed), data)
            log.info("%s seed=%d avg=%.4f", row, seed, res.report.averages["avg"])
            results.setdefault(row, []).append(res.report)
    return results


def summarize(results: dict[str, list[EvalReport]]) -> dict[str, dict[str, float]]:
    """Per row: mean of every recall metric and the average, plus the std of the average."""
    table = {}
    for row, reports in results.items():
        metrics: dict[str, list[float]] = {}
        for rep in reports:
            for k, v in rep.recall_at.items():
                metrics.setdefault(f"R@{k}", []).append(v)
            for k, v in rep.recall_subset_at.items():
                metrics.setdefault(f"R_subset@{k}", []).append(v)
            for k, v in rep.averages.items():
                metrics.setdefault(k, []).append(v)
        summary = {name: float(np.mean(vals)) for name, vals in metrics.items()}
        summary["avg_std"] = float(np.std(metrics["avg"], ddof=1)) if len(reports) > 1 else 0.0
        table[row] = summary
    return table


def format_table(table: dict[str, dict[str, float]], first_column: str = "Method") -> str:
    cols = [c for c in next(iter(table.values())) if c != "avg_std"]
    width = max(len(first_column), *(len(str(r)) for r in table))
    lines = [f"{first_column:<{width}} | " + " | ".join(f"{c:>8}" for c in cols)]
    lines.append("-" * len(lines[0]))
    for row, summary in table.items():
        lines.append(f"{str(row):<{width}} | " + " | ".join(f"{100 * summary[c]:8.2f}" for c in cols))
    return "\n".join(lines)


def attribute_count_sweep(
    config: ExperimentConfig, qs: Sequence[int] = (2, 4, 8, 16), seed: int = 0, run=run_experiment
) -> dict[int, EvalReport]:
    """Retrain with ``Q`` local and ``Q // 2`` global attribute features for each ``Q``."""
    data = build_data(config)
    out = {}
    for q in qs:
        cfg = seeded(config.with_overrides({"model.Q": q, "model.P": q // 2}), seed)
        out[q] = run(cfg, data).report
        log.info("Q=%d avg=%.4f", q, out[q].averages["avg"])
    return out


def dump_reports(path: str | Path, results: dict) -> None:
    def enc(obj):
        if isinstance(obj, EvalReport):
            return obj.to_dict()
        if isinstance(obj, list):
            return [enc(o) for o in obj]
        return obj

    Path(path).write_text(json.dumps({str(k): enc(v) for k, v in results.items()}, indent=2) + "\n")
