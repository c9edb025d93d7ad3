"""Train-then-evaluate runs and the ablation and baseline grids."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

from mtdqn.harness.checkpoint import Checkpoint
from mtdqn.harness.config import ExperimentConfig, config_hash
from mtdqn.harness.evaluation import SessionLog, evaluate
from mtdqn.harness.results import RunResult
from mtdqn.harness.training import TrainOutcome, train

log = logging.getLogger(__name__)

ABLATION_VARIANTS = ("MT-DQN", "-Transformer", "-TGNN", "-DQN")
BASELINE_VARIANTS = ("MT-DQN", "Concat-Modal", "Vanilla-DQN")


@dataclass
class Run:
    result: RunResult
    outcome: TrainOutcome
    checkpoint: Checkpoint
    test_logs: list[SessionLog]


def make_checkpoint(outcome: TrainOutcome) -> Checkpoint:
    learner = outcome.learner
    return Checkpoint(outcome.config, dict(learner.params), dict(outcome.target or {}), learner.adam, learner.step)


def run_one(config: ExperimentConfig) -> Run:
    """Train one (variant, seed), evaluate the final parameters and package both."""
    start = time.perf_counter()
    outcome = train(config)
    metrics, test_logs = evaluate(config, outcome.params)
    losses = tuple(None if math.isnan(x) else x for x in outcome.epoch_losses)
    result = RunResult(config.variant, config.seed, config_hash(config), metrics, losses,
                       wall_clock=time.perf_counter() - start)
    log.info("%s seed %d: return %.4f ndcg5 %.4f", config.variant, config.seed,
             metrics.mean_return, metrics.ndcg5)
    return Run(result, outcome, make_checkpoint(outcome), test_logs)


def seeds_from(config: ExperimentConfig, n_seeds: int) -> list[int]:
    return [config.seed + i for i in range(n_seeds)]


def run_grid(config: ExperimentConfig, variants: Sequence[str], seeds: Iterable[int]) -> list[RunResult]:
    """Every variant on every seed; rows ordered seed-major so each seed's rows share a world."""
    results = []
    for seed in seeds:
        for variant in variants:
            results.append(run_one(config.with_variant(variant).with_seed(seed)).result)
    return results


def ablate(config: ExperimentConfig, n_seeds: int = 1) -> list[RunResult]:
    return run_grid(config, ABLATION_VARIANTS, seeds_from(config, n_seeds))


def run_baselines(config: ExperimentConfig, n_seeds: int = 1) -> list[RunResult]:
    return run_grid(config, BASELINE_VARIANTS, seeds_from(config, n_seeds))
