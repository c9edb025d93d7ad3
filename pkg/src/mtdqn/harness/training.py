"""Training loop: world warm-up, epsilon-greedy episodes for training users, scheduled updates.

An epoch is one round of the world in which every training user plays one
session with the learning policy while every other user plays the uniform
logging policy. Learning rate and epsilon follow the fraction of training
completed, so the schedules do not depend on how long sessions turn out.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from mtdqn.agent import (
    DQNAgent,
    Learner,
    ReplayBuffer,
    RewardWeights,
    Transition,
    epsilon_at,
    select_action,
    train_step,
)
from mtdqn.environment import (
    World,
    env_step,
    generate_world,
    run_session,
    random_policy,
    start_round,
    start_session,
)
from mtdqn.harness.config import ExperimentConfig
from mtdqn.harness.model import Example, History, RecommenderModel, Scorer, StateRef
from mtdqn.numerics import ops
from mtdqn.numerics.optim import CosineSchedule, cosine_lr
from mtdqn.numerics.tensor import Tape
from mtdqn.temporal_graph import InteractionEvent

log = logging.getLogger(__name__)

# resolution of the progress-driven schedules
_HORIZON = 10_000

# stream purposes for the learner (the world owns 0..5)
_INIT, _TRAIN, _SPLIT = 11, 12, 13


@dataclass(frozen=True)
class UserSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def split_users(n_users: int, ratios: tuple[float, float, float], seed: int) -> UserSplit:
    """Seeded disjoint partition with sizes within one user of the ratios."""
    perm = np.random.default_rng([seed, _SPLIT]).permutation(n_users)
    n_train = int(round(ratios[0] * n_users))
    n_val = min(int(round(ratios[1] * n_users)), n_users - n_train)
    parts = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
    return UserSplit(*(tuple(sorted(int(u) for u in p)) for p in parts))


def reward_weights(config: ExperimentConfig) -> RewardWeights:
    return RewardWeights(config.reward.lambda1, config.reward.lambda2)


def fresh_world(config: ExperimentConfig) -> tuple[World, History, list[InteractionEvent]]:
    """Generate the world and play the logging-policy warm-up rounds that seed the history."""
    world = generate_world(config.world)
    history = History(config.world.n_users, config.world.n_videos, config)
    events: list[InteractionEvent] = []
    weights = reward_weights(config)
    for r in range(config.graph.n_windows):
        events.extend(play_logging_round(world, history, r, weights))
    return world, history, events


def play_logging_round(world: World, history: History, round_: int, weights: RewardWeights) -> list[InteractionEvent]:
    events = start_round(world, round_)
    history.add(events)
    for u in range(world.config.n_users):
        session = run_session(world, u, round_, random_policy(world, u, round_), weights)
        history.add(session.events)
        events.extend(session.events)
    history.close_round()
    return events


def progress_lr(config: ExperimentConfig, progress: float) -> float:
    schedule = CosineSchedule(config.optim.lr0, config.optim.lr_min, _HORIZON)
    return cosine_lr(schedule, int(progress * _HORIZON))


def progress_epsilon(config: ExperimentConfig, progress: float) -> float:
    return epsilon_at(int(progress * _HORIZON), _HORIZON, config.agent)


@dataclass
class TrainOutcome:
    config: ExperimentConfig
    model: RecommenderModel
    learner: Learner
    agent: DQNAgent | None
    split: UserSplit
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    events: list[InteractionEvent] = field(default_factory=list)
    train_returns: list[float] = field(default_factory=list)

    @property
    def params(self):
        return self.learner.params

    @property
    def target(self):
        return self.agent.target if self.agent is not None else None


def build_model(config: ExperimentConfig, world: World, history: History) -> tuple[RecommenderModel, Learner]:
    model = RecommenderModel(config, world, history, np.random.default_rng([config.seed, _INIT]))
    learner = Learner(model.params, CosineSchedule(config.optim.lr0, config.optim.lr_min, _HORIZON),
                      clip_norm=config.optim.clip_norm)
    return model, learner


def supervised_step(model: RecommenderModel, learner: Learner, buffer: ReplayBuffer, batch_size: int,
                    rng: np.random.Generator, lr: float) -> float | None:
    """Cross-entropy update of the engagement head on a uniform replay batch."""
    batch = buffer.sample(batch_size, rng)
    if batch is None:
        return None
    labels = np.array([ex.label for ex in batch])
    with Tape() as tape:
        logits = model.q_selected(learner.params, batch, True, rng)
        loss = ops.bce_with_logits(logits, labels)
    return learner.apply(loss, tape, lr)


def train(config: ExperimentConfig) -> TrainOutcome:
    world, history, events = fresh_world(config)
    weights = reward_weights(config)
    model, learner = build_model(config, world, history)
    agent = DQNAgent(model, learner, config.agent) if model.head == "dqn" else None
    buffer = ReplayBuffer(config.agent.buffer_capacity)
    rng = np.random.default_rng([config.seed, _TRAIN])
    split = split_users(config.world.n_users, config.training.split, config.seed)
    out = TrainOutcome(config, model, learner, agent, split, events=events)
    train_users = split.train
    epochs = config.training.epochs
    env_steps = 0
    first = config.graph.n_windows
    for epoch in range(epochs):
        r = first + epoch
        epoch_start = len(out.losses)
        round_events = start_round(world, r)
        history.add(round_events)
        out.events.extend(round_events)
        learners = set(train_users)
        for u in range(config.world.n_users):
            if u not in learners:
                session = run_session(world, u, r, random_policy(world, u, r), weights)
                history.add(session.events)
                out.events.extend(session.events)
                continue
            progress = (epoch + train_users.index(u) / len(train_users)) / epochs
            eps = progress_epsilon(config, progress)
            lr = progress_lr(config, progress)
            scorer = Scorer(model, learner.params)
            session = start_session(world, u, r)
            while not session.done:
                ref = StateRef(u, r, session.observation.slate)
                a = select_action(scorer.slate_scores(ref), eps, rng)
                rec = env_step(world, session, a, weights)
                history.add(rec.events)
                out.events.extend(rec.events)
                if agent is not None:
                    nxt = StateRef(u, r, session.observation.slate) if not session.done else ref
                    buffer.push(Transition(ref, a, rec.reward, nxt, session.done))
                else:
                    buffer.push(Example(ref, a, float(rec.outcome.engaged)))
                env_steps += 1
                if env_steps % config.training.train_every == 0:
                    if agent is not None:
                        loss = train_step(agent, buffer, rng, lr)
                    else:
                        loss = supervised_step(model, learner, buffer, config.agent.batch_size, rng, lr)
                    if loss is not None:
                        out.losses.append(loss)
            out.train_returns.append(session.total_reward)
        history.close_round()
        chunk = out.losses[epoch_start:]
        out.epoch_losses.append(float(np.mean(chunk)) if chunk else float("nan"))
        log.info("%s seed %d epoch %d/%d: %d updates, mean loss %.4f", config.variant, config.seed,
                 epoch + 1, epochs, len(chunk), out.epoch_losses[-1])
    return out
