"""Synthetic short-video platform.

Videos carry a unit latent topic ``z`` that is only partly visible in each
modality view: the visual view encodes the first half of ``z``, text the
second half, and audio the first half of a fixed random rotation of ``z``.
Users hold a unit preference ``p``; behavior probabilities follow a logistic
curve in the alignment ``p . z``. A fraction of videos are lures: their
visual view shows a decoy topic, they draw engagement regardless of taste,
and they usually end the session.

Randomness is split into per-purpose streams keyed by (seed, purpose, user,
round), so two policies facing the same world see the same draws until
their choices diverge.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, TextIO

import numpy as np

from mtdqn.agent import RewardWeights, compute_reward
from mtdqn.errors import ContractError, FormatError, StateError, ValidationError
from mtdqn.fusion import RawModalFeatures
from mtdqn.temporal_graph import BEHAVIORS, InteractionEvent, behavior_weight

OUTCOMES = ("like", "comment", "share", "full-watch", "early-exit", "no-interaction")
ENGAGED = frozenset({"like", "comment", "share"})
GRADE = {"share": 3, "comment": 2, "like": 2, "full-watch": 1, "early-exit": 0, "no-interaction": 0}

# stream purposes
_WORLD, _PREF, _OUTCOME, _SLATE, _COUNTERFACTUAL, _GROUPS = 0, 1, 2, 3, 4, 6


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 50
    n_videos: int = 200
    kz: int = 8
    d_v: int = 12
    d_t: int = 12
    d_a: int = 12
    sigma_v: float = 0.1
    sigma_t: float = 0.1
    sigma_a: float = 0.1
    social_p: float = 0.1
    drift: float = 0.05
    pref_noise: float = 0.1
    session_len: int = 30
    slate_k: int = 5
    slope: float = 6.0
    offset: float = 0.0
    social_boost: float = 0.1
    continue_base: float = 0.4
    continue_gain: float = 0.55
    lure_fraction: float = 0.2
    lure_engagement: float = 0.9
    lure_continue: float = 0.3
    n_groups: int = 4
    group_spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_videos", "kz", "d_v", "d_t", "d_a", "session_len"):
            if getattr(self, name) < 1:
                raise ValidationError(f"world.{name} must be >= 1")
        if self.kz % 2:
            raise ValidationError("world.kz must be even")
        if self.slate_k < 2 or self.slate_k > self.n_videos:
            raise ValidationError(f"world.slate_k must be in [2, n_videos], got {self.slate_k}")
        if min(self.sigma_v, self.sigma_t, self.sigma_a, self.drift, self.pref_noise) < 0:
            raise ValidationError("noise and drift rates must be nonnegative")
        for name in ("social_p", "drift", "lure_fraction", "lure_engagement", "lure_continue"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"world.{name} must be in [0, 1]")
        if not (0.0 <= self.continue_base and 0.0 <= self.continue_gain and self.continue_base + self.continue_gain <= 1.0):
            raise ValidationError("continuation probabilities must stay within [0, 1]")
        if not 0 <= self.n_groups <= 2 * self.kz or self.group_spread < 0:
            raise ValidationError("world.n_groups must be in [0, 2 kz] and group_spread nonnegative")
        if self.kz // 2 > min(self.d_v, self.d_t, self.d_a):
            raise ValidationError("modality dims must be at least kz / 2")


@dataclass(frozen=True)
class StepOutcome:
    behavior: str
    watch_fraction: float
    continued: bool
    interest_before: np.ndarray
    interest_after: np.ndarray
    alignment: float

    @property
    def engaged(self) -> bool:
        return self.behavior in ENGAGED

    @property
    def grade(self) -> int:
        return GRADE[self.behavior]


@dataclass
class UserState:
    id: int
    preference: np.ndarray
    neighbors: tuple[int, ...]
    position: int = 0
    alive: bool = False

    @property
    def interest(self) -> np.ndarray:
        return self.preference


@dataclass
class World:
    config: WorldConfig
    topics: np.ndarray
    lure: np.ndarray
    decoys: np.ndarray
    visual: np.ndarray
    text: np.ndarray
    audio: np.ndarray
    users: list[UserState]
    social_edges: list[tuple[int, int]]
    maps: dict[str, np.ndarray]
    engaged_by: list[set[int]] = field(default_factory=list)

    def features(self, video: int) -> RawModalFeatures:
        return RawModalFeatures(self.visual[video], self.text[video], self.audio[video])

    def stream(self, purpose: int, *keys: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, purpose, *keys])


def _unit_rows(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    x = rng.normal(size=(n, k))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def emit_modal_features(
    z: np.ndarray,
    config: WorldConfig,
    rng: np.random.Generator,
    maps: dict[str, np.ndarray],
    visual_topic: np.ndarray | None = None,
) -> RawModalFeatures:
    """Three noisy partial views of ``z`` through fixed linear maps.

    ``visual_topic`` replaces ``z`` in the visual view only (used for lures).
    """
    z = np.asarray(z, dtype=np.float64)
    if abs(np.linalg.norm(z) - 1.0) > 1e-9:
        raise ContractError("topic vector must be unit norm")
    h = config.kz // 2
    zv = z if visual_topic is None else visual_topic
    v = maps["visual"] @ zv[:h] + config.sigma_v * rng.normal(size=config.d_v)
    t = maps["text"] @ z[h:] + config.sigma_t * rng.normal(size=config.d_t)
    a = maps["audio"] @ (maps["rotation"] @ z)[:h] + config.sigma_a * rng.normal(size=config.d_a)
    return RawModalFeatures(v, t, a)


def _grouped(config: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Topics and preferences scattered around a few shared interest prototypes.

    Prototypes come in opposed pairs along orthogonal axes, so their mean is
    zero and no topic is liked by the average user: ranking well requires
    knowing whose session it is.
    """
    rng = np.random.default_rng([config.seed, _GROUPS])
    axes, _ = np.linalg.qr(rng.normal(size=(config.kz, config.kz)))
    protos = np.stack([(-1.0) ** g * axes[:, g // 2] for g in range(config.n_groups)])

    def draw(n: int) -> np.ndarray:
        # balanced membership, so no group's taste is the majority taste
        g = rng.permutation(np.arange(n) % config.n_groups)
        x = protos[g] + config.group_spread * rng.normal(size=(n, config.kz)) / np.sqrt(config.kz)
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    return draw(config.n_videos), draw(config.n_users)


def generate_world(config: WorldConfig) -> World:
    rng = np.random.default_rng([config.seed, _WORLD])
    h = config.kz // 2
    rotation, _ = np.linalg.qr(rng.normal(size=(config.kz, config.kz)))
    maps = {
        "visual": rng.normal(size=(config.d_v, h)) / np.sqrt(h),
        "text": rng.normal(size=(config.d_t, h)) / np.sqrt(h),
        "audio": rng.normal(size=(config.d_a, h)) / np.sqrt(h),
        "rotation": rotation,
    }
    topics = _unit_rows(rng, config.n_videos, config.kz)
    lure = rng.random(config.n_videos) < config.lure_fraction
    decoys = _unit_rows(rng, config.n_videos, config.kz)
    prefs = _unit_rows(rng, config.n_users, config.kz)
    upper = rng.random((config.n_users, config.n_users)) < config.social_p
    if config.n_groups > 0:
        topics, prefs = _grouped(config)
    edges = [(i, j) for i in range(config.n_users) for j in range(i + 1, config.n_users) if upper[i, j]]
    neighbors: list[list[int]] = [[] for _ in range(config.n_users)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    views = [
        emit_modal_features(topics[m], config, rng, maps, decoys[m] if lure[m] else None)
        for m in range(config.n_videos)
    ]
    return World(
        config=config,
        topics=topics,
        lure=lure,
        decoys=decoys,
        visual=np.stack([x.v for x in views]),
        text=np.stack([x.t for x in views]),
        audio=np.stack([x.a for x in views]),
        users=[UserState(u, prefs[u].copy(), tuple(neighbors[u])) for u in range(config.n_users)],
        social_edges=edges,
        maps=maps,
        engaged_by=[set() for _ in range(config.n_videos)],
    )


# --- behavior model -------------------------------------------------------------

def _logistic(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def social_fraction(world: World, user: int, video: int) -> float:
    nb = world.users[user].neighbors
    if not nb:
        return 0.0
    engaged = world.engaged_by[video]
    return sum(1 for n in nb if n in engaged) / len(nb)


def alignment(world: World, user: int, video: int) -> float:
    """Preference-topic alignment including the additive social boost."""
    base = float(world.users[user].preference @ world.topics[video])
    return base + world.config.social_boost * social_fraction(world, user, video)


def behavior_probabilities(world: World, user: int, video: int) -> dict[str, float]:
    """Outcome distribution for showing ``video`` to ``user`` now."""
    cfg = world.config
    s = _logistic(cfg.slope * (alignment(world, user, video) - cfg.offset))
    if world.lure[video]:
        s = max(s, cfg.lure_engagement)
    return {
        "share": 0.15 * s,
        "comment": 0.15 * s,
        "like": 0.4 * s,
        "full-watch": 0.1 + 0.2 * s,
        "early-exit": 0.6 * (1.0 - s),
        "no-interaction": 0.3 * (1.0 - s),
    }


def continuation_probability(world: World, user: int, video: int) -> float:
    cfg = world.config
    if world.lure[video]:
        return cfg.lure_continue
    s = _logistic(cfg.slope * (alignment(world, user, video) - cfg.offset))
    return cfg.continue_base + cfg.continue_gain * s


def sample_behavior(probs: dict[str, float], rng: np.random.Generator) -> str:
    u = rng.random()
    acc = 0.0
    for name in OUTCOMES:
        acc += probs[name]
        if u < acc:
            return name
    return OUTCOMES[-1]


def _watch_fraction(behavior: str, rng: np.random.Generator) -> float:
    if behavior == "early-exit":
        return float(rng.uniform(0.0, 0.3))
    if behavior == "no-interaction":
        return float(rng.uniform(0.3, 0.9))
    return 1.0


def user_respond(world: World, user: int, video: int, rng: np.random.Generator) -> StepOutcome:
    """Realize one reaction; engagement pulls the preference toward the topic."""
    state = world.users[user]
    if not state.alive:
        raise StateError(f"user {user} has no active session")
    probs = behavior_probabilities(world, user, video)
    align = alignment(world, user, video)
    cont_p = continuation_probability(world, user, video)
    behavior = sample_behavior(probs, rng)
    frac = _watch_fraction(behavior, rng)
    continued = bool(rng.random() < cont_p)
    before = state.preference.copy()
    eta = world.config.drift
    if eta > 0 and (behavior in ENGAGED or behavior == "full-watch"):
        moved = (1.0 - eta) * state.preference + eta * world.topics[video]
        state.preference = moved / np.linalg.norm(moved)
    if behavior in ENGAGED:
        world.engaged_by[video].add(user)
    return StepOutcome(behavior, frac, continued, before, state.preference.copy(), align)


# --- sessions -------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    user: int
    round: int
    step: int
    slate: tuple[int, ...]


@dataclass(frozen=True)
class StepRecord:
    observation: Observation
    choice: int
    outcome: StepOutcome
    reward: float
    events: tuple[InteractionEvent, ...]

    @property
    def video(self) -> int:
        return self.observation.slate[self.choice]


@dataclass
class Session:
    user: int
    round: int
    max_steps: int
    outcome_rng: np.random.Generator
    slate_rng: np.random.Generator
    observation: Observation | None = None
    steps: list[StepRecord] = field(default_factory=list)
    done: bool = False

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def events(self) -> list[InteractionEvent]:
        return [e for s in self.steps for e in s.events]


def _tick(world: World, round_: int, slot: int) -> float:
    """Timestamp of the ``slot``-th event position in a round; strictly inside [round, round + 1)."""
    return round_ + slot / (2.0 * (world.config.session_len + 1))


def _draw_slate(world: World, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(int(v) for v in rng.choice(world.config.n_videos, size=world.config.slate_k, replace=False))


def start_round(world: World, round_: int) -> list[InteractionEvent]:
    """Apply between-round preference noise and emit the round's follow edges."""
    cfg = world.config
    for u in world.users:
        if cfg.pref_noise > 0:
            rng = world.stream(_PREF, u.id, round_)
            moved = u.preference + cfg.pref_noise * rng.normal(size=cfg.kz)
            u.preference = moved / np.linalg.norm(moved)
    t = float(round_)
    events = []
    for i, j in world.social_edges:
        events.append(InteractionEvent(i, j, "follow", t, behavior_weight("follow")))
        events.append(InteractionEvent(j, i, "follow", t, behavior_weight("follow")))
    return events


def start_session(world: World, user: int, round_: int, max_steps: int | None = None) -> Session:
    cfg = world.config
    steps = cfg.session_len if max_steps is None else min(max_steps, cfg.session_len)
    session = Session(
        user, round_, steps,
        outcome_rng=world.stream(_OUTCOME, user, round_),
        slate_rng=world.stream(_SLATE, user, round_),
    )
    state = world.users[user]
    if steps <= 0:
        session.done = True
        return session
    state.alive = True
    state.position = 0
    session.observation = Observation(user, round_, 0, _draw_slate(world, session.slate_rng))
    return session


def env_step(
    world: World,
    session: Session,
    choice: int,
    weights: RewardWeights,
) -> StepRecord:
    """Show the chosen slate entry; returns the record and advances the session."""
    if session.done or session.observation is None:
        raise StateError("session has ended")
    obs = session.observation
    if not 0 <= choice < len(obs.slate):
        raise ContractError(f"choice {choice} is not a slate position (slate size {len(obs.slate)})")
    video = obs.slate[choice]
    outcome = user_respond(world, session.user, video, session.outcome_rng)
    events = [InteractionEvent(
        session.user, video, "watch", _tick(world, session.round, 2 * obs.step + 1),
        behavior_weight("watch", outcome.watch_fraction),
    )]
    if outcome.engaged:
        events.append(InteractionEvent(
            session.user, video, outcome.behavior, _tick(world, session.round, 2 * obs.step + 2),
            behavior_weight(outcome.behavior),
        ))
    record = StepRecord(obs, choice, outcome, compute_reward(outcome, weights), tuple(events))
    session.steps.append(record)
    state = world.users[session.user]
    state.position = obs.step + 1
    if not outcome.continued or state.position >= session.max_steps:
        session.done = True
        session.observation = None
        state.alive = False
    else:
        session.observation = Observation(session.user, session.round, obs.step + 1, _draw_slate(world, session.slate_rng))
    return record


Policy = Callable[[Observation], int]


def run_session(
    world: World,
    user: int,
    round_: int,
    policy: Policy,
    weights: RewardWeights,
    max_steps: int | None = None,
) -> Session:
    session = start_session(world, user, round_, max_steps)
    while not session.done:
        env_step(world, session, policy(session.observation), weights)
    return session


def random_policy(world: World, user: int, round_: int) -> Policy:
    """Uniform slate choice drawn from a dedicated stream (the logging policy)."""
    rng = world.stream(_COUNTERFACTUAL + 1, user, round_)
    return lambda obs: int(rng.integers(len(obs.slate)))


def counterfactual_grades(world: World, obs: Observation) -> list[int]:
    """Grade each slate entry would have earned, sampled without side effects.

    The grade is the engagement grade of the sampled behavior, or 0 when the
    sampled continuation ends the session: a reaction after which the user
    leaves is not counted as a relevant recommendation.
    """
    rng = world.stream(_COUNTERFACTUAL, obs.user, obs.round, obs.step)
    grades = []
    for v in obs.slate:
        behavior = sample_behavior(behavior_probabilities(world, obs.user, v), rng)
        stays = rng.random() < continuation_probability(world, obs.user, v)
        grades.append(GRADE[behavior] if stays else 0)
    return grades


# --- event log ----------------------------------------------------------------

_FIELDS = {"actor", "target", "target_kind", "behavior", "timestamp", "weight"}


def event_to_json(e: InteractionEvent) -> str:
    return json.dumps({
        "actor": e.actor, "target": e.target, "target_kind": e.target_kind,
        "behavior": e.behavior, "timestamp": e.timestamp, "weight": e.weight,
    })


def export_events(events: Iterable[InteractionEvent], out: TextIO) -> int:
    n = 0
    for e in events:
        out.write(event_to_json(e) + "\n")
        n += 1
    return n


def parse_event(line: str, lineno: int = 0) -> InteractionEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"line {lineno}: expected an object")
    keys = set(obj)
    if keys != _FIELDS:
        extra, missing = sorted(keys - _FIELDS), sorted(_FIELDS - keys)
        raise FormatError(f"line {lineno}: unknown fields {extra}, missing fields {missing}")
    ok = (
        isinstance(obj["actor"], int) and isinstance(obj["target"], int)
        and obj["target_kind"] in ("video", "user") and obj["behavior"] in BEHAVIORS
        and isinstance(obj["timestamp"], (int, float)) and isinstance(obj["weight"], (int, float))
        and not isinstance(obj["actor"], bool) and not isinstance(obj["target"], bool)
    )
    if not ok:
        raise FormatError(f"line {lineno}: field has the wrong type")
    event = InteractionEvent(obj["actor"], obj["target"], obj["behavior"], float(obj["timestamp"]), float(obj["weight"]))
    if event.target_kind != obj["target_kind"]:
        raise FormatError(f"line {lineno}: target_kind does not match behavior {event.behavior!r}")
    return event


def import_events(lines: Iterable[str]) -> Iterator[InteractionEvent]:
    for i, line in enumerate(lines, start=1):
        if line.strip():
            yield parse_event(line, i)


@dataclass
class SimulationLog:
    sessions: list[Session] = field(default_factory=list)
    events: list[InteractionEvent] = field(default_factory=list)


def simulate(world: World, rounds: int, weights: RewardWeights, first_round: int = 0) -> SimulationLog:
    """Every user plays one logging-policy session per round."""
    log = SimulationLog()
    for r in range(first_round, first_round + rounds):
        log.events.extend(start_round(world, r))
        for u in range(world.config.n_users):
            session = run_session(world, u, r, random_policy(world, u, r), weights)
            log.sessions.append(session)
            log.events.extend(session.events)
    return log
