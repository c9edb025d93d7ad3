"""Held-out evaluation: greedy rollouts for validation and test users on a freshly generated world.

Evaluation depends only on the configuration and the parameters, so a
checkpoint evaluates to the same numbers as the run that wrote it. Ranking
metrics compare each slate's score order with counterfactual engagement
grades of every candidate; F1, MSE and MAE use the candidate actually shown.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from mtdqn.environment import (
    ENGAGED,
    Observation,
    World,
    counterfactual_grades,
    env_step,
    random_policy,
    run_session,
    start_round,
    start_session,
)
from mtdqn.errors import DegenerateInputError
from mtdqn.harness.config import ExperimentConfig
from mtdqn.harness.model import History, RecommenderModel, Scorer, StateRef
from mtdqn.harness.training import build_model, fresh_world, reward_weights, split_users
from mtdqn.metrics import ConfusionCounts, hit_rate_at_k, intra_list_similarity, mae, mse, ndcg_at_k, precision_recall_f1
from mtdqn.numerics.tensor import Tensor

HIT_K = 3
N_POSITIONS = 5
POSITIVE_GRADE = 2

ScoreFn = Callable[[World, Observation], np.ndarray]


@dataclass(frozen=True)
class StepLog:
    user: int
    scores: tuple[float, ...]
    choice: int
    video: int
    grades: tuple[int, ...]
    engaged: bool
    reward: float


@dataclass
class SessionLog:
    user: int
    round: int
    steps: list[StepLog] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def returns_to_go(self, gamma: float) -> np.ndarray:
        """Discounted return from each step to the end of the session."""
        g = 0.0
        out = np.zeros(len(self.steps))
        for i in range(len(self.steps) - 1, -1, -1):
            g = self.steps[i].reward + gamma * g
            out[i] = g
        return out


@dataclass(frozen=True)
class Metrics:
    mean_return: float
    ndcg5: float
    hit_rate: float
    precision: float
    recall: float
    f1: float
    threshold: float
    mse: float | None
    mae: float | None
    ils: float
    diversity: float
    hit_positions: tuple[float, ...]
    n_sessions: int
    n_steps: int


def rank_order(scores) -> np.ndarray:
    """Indices by descending score; ties keep slate order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def rollout(config: ExperimentConfig, score_fn: ScoreFn, users: set[int],
            world: World | None = None, history: History | None = None) -> tuple[list[SessionLog], World, History]:
    """Greedy sessions for ``users`` over the evaluation rounds; others follow the logging policy."""
    if world is None or history is None:
        world, history, _ = fresh_world(config)
    weights = reward_weights(config)
    first = config.graph.n_windows
    logs: list[SessionLog] = []
    for r in range(first, first + config.training.eval_rounds):
        history.add(start_round(world, r))
        for u in range(config.world.n_users):
            if u not in users:
                session = run_session(world, u, r, random_policy(world, u, r), weights)
                history.add(session.events)
                continue
            slog = SessionLog(u, r)
            session = start_session(world, u, r)
            while not session.done:
                obs = session.observation
                grades = counterfactual_grades(world, obs)
                scores = np.asarray(score_fn(world, obs), dtype=np.float64)
                choice = int(rank_order(scores)[0])
                rec = env_step(world, session, choice, weights)
                history.add(rec.events)
                slog.steps.append(StepLog(
                    u, tuple(float(s) for s in scores), choice, obs.slate[choice], tuple(grades),
                    rec.outcome.behavior in ENGAGED, rec.reward,
                ))
            logs.append(slog)
        history.close_round()
    return logs, world, history


def calibrate_threshold(scores, labels) -> float:
    """Score cut maximizing F1 of ``score >= cut``; ties go to the lowest cut."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        return 0.0
    best, best_f1 = float(scores.min()), -1.0
    for cut in np.unique(scores):
        f1 = precision_recall_f1(ConfusionCounts.from_predictions(scores >= cut, labels)).f1
        if f1 > best_f1:
            best, best_f1 = float(cut), f1
    return best


def compute_metrics(logs: list[SessionLog], world: World, gamma: float, threshold: float,
                    value_head: bool) -> Metrics:
    steps = [s for log in logs for s in log.steps]
    ranked = [[s.grades[i] for i in rank_order(s.scores)] for s in steps]
    ndcg = float(np.mean([ndcg_at_k(r, 5) for r in ranked])) if ranked else 0.0
    recommended = [[int(i) for i in rank_order(s.scores)] for s in steps]
    positives = [{i for i, g in enumerate(s.grades) if g >= POSITIVE_GRADE} for s in steps]
    hit = hit_rate_at_k(recommended, positives, HIT_K)
    positions = hit_rate_at_k(recommended, positives, N_POSITIONS).position_proportions
    chosen = np.array([s.scores[s.choice] for s in steps])
    engaged = np.array([s.engaged for s in steps], dtype=bool)
    prf = precision_recall_f1(ConfusionCounts.from_predictions(chosen >= threshold, engaged))
    err_mse = err_mae = None
    if value_head and steps:
        realized = np.concatenate([log.returns_to_go(gamma) for log in logs])
        err_mse, err_mae = mse(realized, chosen), mae(realized, chosen)
    sims = []
    for log in logs:
        try:
            sims.append(intra_list_similarity(world.topics[[s.video for s in log.steps]]))
        except DegenerateInputError:
            continue
    ils = float(np.mean(sims)) if sims else 0.0
    return Metrics(
        mean_return=float(np.mean([log.total_reward for log in logs])) if logs else 0.0,
        ndcg5=ndcg,
        hit_rate=hit.rate,
        precision=prf.precision,
        recall=prf.recall,
        f1=prf.f1,
        threshold=threshold,
        mse=err_mse,
        mae=err_mae,
        ils=ils,
        diversity=1.0 - ils,
        hit_positions=tuple(positions),
        n_sessions=len(logs),
        n_steps=len(steps),
    )


def model_score_fn(model: RecommenderModel, params: Mapping[str, Tensor]) -> ScoreFn:
    scorer = Scorer(model, params)
    return lambda world, obs: scorer.slate_scores(StateRef(obs.user, obs.round, obs.slate))


def evaluate(config: ExperimentConfig, params: Mapping[str, Tensor]) -> tuple[Metrics, list[SessionLog]]:
    """Metrics on the test users; the F1 threshold is calibrated on the validation users."""
    world, history, _ = fresh_world(config)
    model, _ = build_model(config, world, history)
    for name, p in params.items():
        model.params[name].data = np.array(p.data, dtype=np.float64, copy=True)
    split = split_users(config.world.n_users, config.training.split, config.seed)
    held_out = set(split.val) | set(split.test)
    logs, world, _ = rollout(config, model_score_fn(model, model.params), held_out, world, history)
    val_logs = [log for log in logs if log.user in split.val]
    test_logs = [log for log in logs if log.user in split.test]
    val_steps = [s for log in val_logs for s in log.steps]
    threshold = calibrate_threshold([s.scores[s.choice] for s in val_steps], [s.engaged for s in val_steps])
    metrics = compute_metrics(test_logs, world, config.agent.gamma, threshold, model.head == "dqn")
    return metrics, test_logs


def alignment_oracle(world: World, obs: Observation) -> np.ndarray:
    """Scores candidates by true preference-topic alignment."""
    return np.array([world.users[obs.user].preference @ world.topics[v] for v in obs.slate])


def uniform_scores(world: World, obs: Observation) -> np.ndarray:
    """Random scores from a stream keyed by the observation (reference policy)."""
    rng = np.random.default_rng([world.config.seed, 99, obs.user, obs.round, obs.step])
    return rng.random(len(obs.slate))
