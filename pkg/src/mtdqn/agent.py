"""Q-network, replay buffer, TD loss with a target network, composite reward and the training step."""
from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from mtdqn.errors import ConfigurationError, ContractError, DimensionError, NonFiniteError
from mtdqn.numerics import ops
from mtdqn.numerics.optim import AdamState, CosineSchedule, adam_step, clip_gradients, cosine_lr
from mtdqn.numerics.tensor import Tape, Tensor, as_tensor

IMMEDIATE_REWARD = {
    "like": 1.0,
    "comment": 1.2,
    "share": 1.5,
    "full-watch": 0.5,
    "early-exit": -0.5,
    "no-interaction": -0.1,
}

ParamDict = dict[str, Tensor]


@dataclass(frozen=True)
class AgentConfig:
    hidden: tuple[int, ...] = (32, 32, 16)
    gamma: float = 0.95
    sync_every: int = 300
    buffer_capacity: int = 100_000
    batch_size: int = 64
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.3
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"agent.gamma must be in [0, 1], got {self.gamma}")
        if self.sync_every < 1 or self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigurationError("agent.sync_every, buffer_capacity and batch_size must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError("agent.hidden sizes must be positive")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigurationError("need 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.eps_decay_fraction <= 1.0:
            raise ConfigurationError("agent.eps_decay_fraction must be in (0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("agent.dropout must be in [0, 1)")


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.3
    lambda2: float = 0.2
    immediate: Mapping[str, float] = field(default_factory=lambda: dict(IMMEDIATE_REWARD))

    def __post_init__(self):
        values = [self.lambda1, self.lambda2, *self.immediate.values()]
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("reward weights must be finite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be nonnegative")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def reward_components(outcome: Any, weights: RewardWeights) -> tuple[float, float, float]:
    """(immediate, retention, interest-stability) terms for one step outcome."""
    r_imm = weights.immediate[outcome.behavior]
    r_ret = 1.0 if outcome.continued else -1.0
    r_int = _cosine(np.asarray(outcome.interest_before), np.asarray(outcome.interest_after))
    return r_imm, r_ret, r_int


def compute_reward(outcome: Any, weights: RewardWeights) -> float:
    r_imm, r_ret, r_int = reward_components(outcome, weights)
    return r_imm + weights.lambda1 * r_ret + weights.lambda2 * r_int


# --- Q-network ------------------------------------------------------------------

def init_qnet_params(
    in_dim: int,
    hidden: Sequence[int],
    n_out: int,
    rng: np.random.Generator,
    prefix: str = "q",
) -> ParamDict:
    """Fully connected layers with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""
    sizes = [in_dim, *hidden, n_out]
    p: ParamDict = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        p[f"{prefix}.l{i}.W"] = Tensor(rng.uniform(-bound, bound, (a, b)), requires_grad=True)
        p[f"{prefix}.l{i}.b"] = Tensor(rng.uniform(-bound, bound, (b,)), requires_grad=True)
    return p


def _n_layers(params: Mapping[str, Tensor], prefix: str) -> int:
    n = 0
    while f"{prefix}.l{n}.W" in params:
        n += 1
    return n


def q_forward(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str = "q",
    dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(B, in) -> (B, n_out); ReLU hidden layers, linear head."""
    x = as_tensor(x)
    n = _n_layers(params, prefix)
    if n == 0:
        raise ConfigurationError(f"no layers with prefix {prefix!r}")
    w0 = params[f"{prefix}.l0.W"]
    if x.ndim != 2 or x.shape[1] != w0.shape[0]:
        raise DimensionError(f"state width {x.shape[-1]} vs network input {w0.shape[0]}")
    h = x
    for i in range(n):
        h = ops.add_bias(ops.matmul(h, params[f"{prefix}.l{i}.W"]), params[f"{prefix}.l{i}.b"])
        if i < n - 1:
            h = ops.dropout(ops.relu(h), dropout, rng, training)
    return h


def q_values(s, params: Mapping[str, Tensor], prefix: str = "q") -> Tensor:
    """Q-values of one state vector."""
    s = as_tensor(s)
    if s.ndim != 1:
        raise DimensionError(f"state must be a vector, got shape {s.shape}")
    out = q_forward(ops.reshape(s, (1, s.shape[0])), params, prefix)
    return ops.reshape(out, (out.shape[1],))


def select_action(q, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64).reshape(-1)
    if q.size == 0:
        raise ContractError("cannot select from an empty action set")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError(f"epsilon must be in [0, 1], got {epsilon}")
    explore = rng.random() < epsilon
    if explore:
        return int(rng.integers(q.size))
    return int(np.argmax(q))


def epsilon_at(step: int, total_steps: int, config: AgentConfig) -> float:
    """Linear decay from eps_start to eps_end over the first fraction of training."""
    horizon = max(1.0, config.eps_decay_fraction * total_steps)
    frac = min(max(step, 0) / horizon, 1.0)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


# --- replay -------------------------------------------------------------------

@dataclass(frozen=True)
class Transition:
    s: Any
    a: int
    r: float
    s_next: Any
    done: bool

    def __post_init__(self):
        if not np.isfinite(self.r):
            raise NonFiniteError(f"non-finite reward {self.r}")
        if self.a < 0:
            raise ContractError(f"negative action index {self.a}")


class ReplayBuffer:
    """FIFO store with uniform sampling with replacement."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque[Transition] = collections.deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, transition: Transition) -> None:
        self._items.append(transition)

    def ready(self, batch_size: int) -> bool:
        return len(self._items) >= batch_size

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition] | None:
        """A batch drawn uniformly with replacement, or None while underfull."""
        if batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.ready(batch_size):
            return None
        idx = rng.integers(len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


# --- loss and updates ---------------------------------------------------------

def bellman_targets(rewards, next_max, done, gamma: float) -> np.ndarray:
    """y = r for terminal transitions, else r + gamma * max_a' Q(s', a'; target)."""
    r = np.asarray(rewards, dtype=np.float64)
    nm = np.asarray(next_max, dtype=np.float64)
    d = np.asarray(done, dtype=bool)
    return np.where(d, r, r + gamma * np.where(d, 0.0, nm))


def td_loss(q_selected: Tensor, targets) -> Tensor:
    """Mean squared TD error; targets are constants."""
    q_selected = as_tensor(q_selected)
    y = np.asarray(targets, dtype=np.float64)
    if q_selected.shape != y.shape or y.ndim != 1:
        raise DimensionError(f"q {q_selected.shape} vs targets {y.shape}")
    if y.size == 0:
        raise ContractError("td_loss on an empty batch")
    return ops.reduce_mean(ops.square(ops.sub(q_selected, Tensor(y))))


class QModel(Protocol):
    """What the training step needs from a concrete Q-function."""

    def q_selected(self, params: Mapping[str, Tensor], batch: Sequence[Transition],
                   training: bool, rng: np.random.Generator | None) -> Tensor: ...

    def q_next_max(self, params: Mapping[str, Tensor], batch: Sequence[Transition]) -> np.ndarray: ...


@dataclass
class Learner:
    """Policy parameters with their optimizer state and schedule."""

    params: ParamDict
    schedule: CosineSchedule
    clip_norm: float = 5.0
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0

    def apply(self, loss: Tensor, tape: Tape, lr: float | None = None) -> float:
        """Backward, clip and one Adam step; ``lr`` overrides the schedule."""
        for p in self.params.values():
            p.zero_grad()
        tape.backward(loss)
        grads = {
            n: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for n, p in self.params.items()
        }
        grads = clip_gradients(grads, self.clip_norm)
        adam_step(self.params, grads, self.adam, cosine_lr(self.schedule, self.step) if lr is None else lr)
        self.step += 1
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {self.step}")
        return value


def snapshot_params(params: Mapping[str, Tensor]) -> ParamDict:
    """Constant copies, used for the target network."""
    return {n: Tensor(p.data.copy()) for n, p in params.items()}


@dataclass
class DQNAgent:
    model: QModel
    learner: Learner
    config: AgentConfig
    target: ParamDict = field(default_factory=dict)

    def __post_init__(self):
        if not self.target:
            self.target = snapshot_params(self.learner.params)

    @property
    def params(self) -> ParamDict:
        return self.learner.params

    @property
    def step(self) -> int:
        return self.learner.step


def sync_target(agent: DQNAgent) -> None:
    for n, p in agent.params.items():
        agent.target[n].data = p.data.copy()


def train_step(agent: DQNAgent, buffer: ReplayBuffer, rng: np.random.Generator,
               lr: float | None = None) -> float | None:
    """One sampled TD update; returns None when the buffer is not ready."""
    batch = buffer.sample(agent.config.batch_size, rng)
    if batch is None:
        return None
    return train_on_batch(agent, batch, rng, lr)


def train_on_batch(agent: DQNAgent, batch: Sequence[Transition], rng: np.random.Generator | None,
                   lr: float | None = None) -> float:
    next_max = agent.model.q_next_max(agent.target, batch)
    y = bellman_targets([t.r for t in batch], next_max, [t.done for t in batch], agent.config.gamma)
    with Tape() as tape:
        q = agent.model.q_selected(agent.params, batch, True, rng)
        loss = td_loss(q, y)
    value = agent.learner.apply(loss, tape, lr)
    if agent.learner.step % agent.config.sync_every == 0:
        sync_target(agent)
    return value


# --- plain vector-state Q-function ----------------------------------------------

@dataclass
class VectorQModel:
    """Q-network over fixed-width state vectors with one output per action."""

    prefix: str = "q"
    dropout: float = 0.0

    def forward(self, params, states, training=False, rng=None) -> Tensor:
        x = Tensor(np.asarray(states, dtype=np.float64))
        return q_forward(x, params, self.prefix, self.dropout, training, rng)

    def q_selected(self, params, batch, training, rng) -> Tensor:
        q = self.forward(params, [t.s for t in batch], training, rng)
        n_actions = q.shape[1]
        flat_idx = [i * n_actions + t.a for i, t in enumerate(batch)]
        return ops.take(ops.reshape(q, (q.size,)), flat_idx)

    def q_next_max(self, params, batch) -> np.ndarray:
        return self.forward(params, [t.s_next for t in batch]).data.max(axis=1)


class ChainMDP:
    """States 0 -> 1 -> 2 (terminal); action 1 moves right, action 0 stays.

    Entering the terminal state pays 1; everything else pays 0.
    """

    n_states = 3
    n_actions = 2
    terminal = 2

    def step(self, state: int, action: int) -> tuple[int, float, bool]:
        if state == self.terminal:
            raise ContractError("episode already ended")
        nxt = state + 1 if action == 1 else state
        return nxt, float(nxt == self.terminal), nxt == self.terminal

    @staticmethod
    def encode(state: int) -> np.ndarray:
        return np.eye(3)[state]
