"""Behavioural cloning of the safety-value rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RuleConfig, SimConfig, TrainingConfig
from .cyber_lane import Observation
from .policy import OptimizerState, PolicyParams, adam_step, forward, loss_and_grad
from .rules import RuleInputs, rule_action


@dataclass
class Experience:
    state: np.ndarray
    action: float
    loss_tag: Optional[float] = None
    origin: tuple[int, int] = (0, 0)  # (trainer id, step)


@dataclass
class MixConfig:
    epsilon: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


class ExperienceBuffer:
    """Bounded FIFO of (state, action) pairs with seeded uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.float32)
        self._head = 0  # next write slot
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add_batch(self, states: np.ndarray, actions: np.ndarray) -> None:
        states = np.asarray(states, dtype=np.float32)
        actions = np.asarray(actions, dtype=np.float32).reshape(-1)
        n = len(actions)
        if n > self.capacity:
            states, actions, n = states[-self.capacity:], actions[-self.capacity:], self.capacity
        idx = (self._head + np.arange(n)) % self.capacity
        self.states[idx] = states
        self.actions[idx] = actions
        self._head = (self._head + n) % self.capacity
        self._size = min(self.capacity, self._size + n)

    def add(self, exp: Experience) -> None:
        self.add_batch(exp.state[None, :], np.array([exp.action]))

    def sample(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draw without replacement; raises if fewer than ``batch_size`` stored."""
        if self._size < batch_size:
            raise ValueError(f"buffer holds {self._size} < {batch_size} experiences")
        rel = self.rng.choice(self._size, size=batch_size, replace=False)
        oldest = (self._head - self._size) % self.capacity
        idx = (oldest + rel) % self.capacity
        return self.states[idx], self.actions[idx]


def il_loss(params: PolicyParams, states: np.ndarray, actions: np.ndarray) -> float:
    """Mean squared difference between policy output and expert action."""
    actions = np.asarray(actions, dtype=float).reshape(-1)
    if actions.size == 0:
        raise ValueError("empty batch")
    pred = np.atleast_1d(forward(params, states)).astype(float)
    return float(np.mean((pred - actions) ** 2))


def per_sample_loss(params: PolicyParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    pred = np.atleast_1d(forward(params, states)).astype(float)
    return (pred - np.asarray(actions, dtype=float).reshape(-1)) ** 2


@dataclass
class TrainOutcome:
    params: PolicyParams
    opt: OptimizerState
    loss: Optional[float]  # None when skipped
    sample_losses: Optional[np.ndarray] = None

    @property
    def skipped(self) -> bool:
        return self.loss is None


def train_step(params: PolicyParams, opt: OptimizerState, buffer: ExperienceBuffer,
               batch_size: int = 48) -> TrainOutcome:
    """One Adam step on a sampled batch; skipped (loss ``None``) if the buffer is underfull.

    ``loss`` is the batch loss the gradient was taken from. ``sample_losses`` are
    the same experiences re-scored by the updated model, i.e. the model vehicles
    will compare their own losses under.
    """
    if len(buffer) < batch_size:
        return TrainOutcome(params, opt, None)
    states, actions = buffer.sample(batch_size)
    loss, grad = loss_and_grad(params, states, actions)
    new_params, new_opt = adam_step(params, opt, grad)
    return TrainOutcome(new_params, new_opt, loss, per_sample_loss(new_params, states, actions))


def mix(a_nn: np.ndarray, a_rule: np.ndarray, epsilon: float, a_min: float = -3.0, a_max: float = 3.0):
    """``epsilon * a_nn + (1 - epsilon) * a_rule`` clamped to the acceleration bounds."""
    out = np.clip(epsilon * np.asarray(a_nn, dtype=float) + (1.0 - epsilon) * np.asarray(a_rule, dtype=float),
                  a_min, a_max)
    return out if out.ndim else float(out)


def mixed_action(params: PolicyParams, state_vector: np.ndarray, rule_inputs: RuleInputs, mix_cfg: MixConfig,
                 rules: RuleConfig, sim: SimConfig) -> float:
    a_nn = forward(params, state_vector)
    a_rule = rule_action(rule_inputs, rules)
    return mix(a_nn, a_rule, mix_cfg.epsilon, sim.a_min, sim.a_max)


def expert_labels(rule_actions: np.ndarray, sim: SimConfig) -> np.ndarray:
    return np.clip(rule_actions, sim.a_min, sim.a_max)


def collect_experience(obs: Observation, rule_actions: np.ndarray, sim: SimConfig, trainer_id: int = 0,
                       step: int = 0) -> list[Experience]:
    """One experience per live vehicle, labelled with the expert action whatever was executed."""
    labels = expert_labels(np.asarray(rule_actions, dtype=float), sim)
    return [Experience(obs.states[k].copy(), float(labels[k]), None, (trainer_id, step)) for k in range(len(obs))]


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean; entry ``i`` averages ``values[max(0, i-window+1) : i+1]``."""
    values = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def convergence_step(losses: np.ndarray, window: int = 200, span: int = 500, tol: float = 1e-4,
                     cap: int = 6000) -> Optional[int]:
    """First training step at which the loss counts as converged, or ``None``.

    Converged means the trailing moving average (``window``) changed by less
    than ``tol`` over the preceding ``span`` steps. Only the first ``cap`` steps
    are inspected.
    """
    losses = np.asarray(losses, dtype=float)[:cap]
    if len(losses) < window + span:
        return None
    ma = moving_average(losses, window)
    for i in range(window + span - 1, len(losses)):
        if abs(ma[i] - ma[i - span]) < tol:
            return i + 1
    return None


@dataclass
class TrainingCurve:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        self.lrs.append(lr)

    def csv(self) -> str:
        rows = ["step,batch_loss,lr"]
        rows += [f"{s},{l!r},{r!r}" for s, l, r in zip(self.steps, self.losses, self.lrs)]
        return "\n".join(rows) + "\n"


def default_optimizer(params: PolicyParams, training: TrainingConfig) -> OptimizerState:
    return OptimizerState.for_params(params, base_lr=training.learning_rate, total_steps=training.total_steps)
