"""Loss-aware experience selection: spend vehicle-side compute to upload less.

The trainer publishes a threshold taken from the sorted losses of its latest
training batch; a vehicle uploads an experience only when the current model's
loss on it is strictly larger than that threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class SelectionConfig:
    discard_rate: float = 0.0
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.discard_rate < 1.0:
            raise ValueError("discard_rate must lie in [0, 1)")

    @property
    def active(self) -> bool:
        # p = 0 is the no-selection baseline.
        return self.enabled and self.discard_rate > 0


def threshold_index(batch_size: int, p: float) -> int:
    return min(batch_size - 1, int(math.floor(p * batch_size)))


def compute_threshold(batch_losses: Sequence[float], p: float) -> float:
    """Loss at zero-based index ``floor(p * B)`` of the ascending batch losses."""
    losses = np.sort(np.asarray(batch_losses, dtype=float))
    if losses.size == 0:
        raise ValueError("empty loss batch")
    return float(losses[threshold_index(losses.size, p)])


@dataclass
class ThresholdState:
    threshold: float = 0.0  # 0 until the first batch: upload everything with positive loss
    issued_step: int = -1
    trainer_id: int = 0


def should_upload(losses: np.ndarray | float, threshold: float) -> np.ndarray | bool:
    """Upload decision (strict ``loss > threshold``)."""
    out = np.asarray(losses) > threshold
    return out if out.ndim else bool(out)


def select_experiences(experiences: list, params, threshold: float) -> tuple[list, np.ndarray]:
    """Tag each experience with its loss under ``params``; return the uploads and all losses."""
    from .imitation import per_sample_loss

    if not experiences:
        return [], np.zeros(0)
    states = np.stack([e.state for e in experiences])
    losses = per_sample_loss(params, states, np.array([e.action for e in experiences]))
    for e, l in zip(experiences, losses):
        e.loss_tag = float(l)
    mask = should_upload(losses, threshold)
    return [e for e, m in zip(experiences, mask) if m], losses


@dataclass
class SelectionCounters:
    """Per-step cumulative tallies for one trainer."""

    steps: list[int] = field(default_factory=list)
    generated: list[int] = field(default_factory=list)
    uploaded: list[int] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    total_generated: int = 0
    total_uploaded: int = 0

    @property
    def total_discarded(self) -> int:
        return self.total_generated - self.total_uploaded

    def record(self, step: int, generated: int, uploaded: int, threshold: float) -> None:
        self.total_generated += generated
        self.total_uploaded += uploaded
        self.steps.append(step)
        self.generated.append(self.total_generated)
        self.uploaded.append(self.total_uploaded)
        self.thresholds.append(threshold)

    def csv(self) -> str:
        rows = ["step,generated,uploaded,discarded,threshold"]
        for s, g, u, th in zip(self.steps, self.generated, self.uploaded, self.thresholds):
            rows.append(f"{s},{g},{u},{g - u},{th!r}")
        return "\n".join(rows) + "\n"


def savings_report(counters: SelectionCounters, horizon_steps: int = 6000) -> float:
    """Percentage of generated experiences discarded within the first ``horizon_steps`` steps."""
    if not counters.steps or counters.steps[-1] < horizon_steps:
        logged = counters.steps[-1] if counters.steps else 0
        raise ValueError(f"horizon {horizon_steps} exceeds the {logged} logged steps")
    k = int(np.searchsorted(np.asarray(counters.steps), horizon_steps, side="right")) - 1
    generated = counters.generated[k]
    if generated == 0:
        return 0.0
    return 100.0 * (generated - counters.uploaded[k]) / generated


class Selector:
    """Vehicle-side filter plus the trainer-side threshold refresh for one trainer."""

    def __init__(self, cfg: SelectionConfig, trainer_id: int = 0, starvation_steps: int = 200):
        self.cfg = cfg
        self.state = ThresholdState(trainer_id=trainer_id)
        self.counters = SelectionCounters()
        self.starvation_steps = starvation_steps
        self._dry_steps = 0

    def filter(self, step: int, losses: np.ndarray) -> np.ndarray:
        """Mask of experiences to upload this step; tallies counters."""
        losses = np.asarray(losses, dtype=float)
        if self.cfg.active:
            mask = should_upload(losses, self.state.threshold)
        else:
            mask = np.ones(losses.shape, dtype=bool)
        n_up = int(mask.sum())
        self.counters.record(step, int(losses.size), n_up, self.state.threshold)
        self._dry_steps = 0 if n_up else self._dry_steps + 1
        return mask

    def refresh(self, step: int, batch_losses: np.ndarray) -> None:
        """Publish a new threshold from the latest training batch."""
        if not self.cfg.active:
            return
        if self._dry_steps >= self.starvation_steps:
            # Starved: let one refresh cycle through unfiltered.
            self.state.threshold = 0.0
            self._dry_steps = 0
        else:
            self.state.threshold = compute_threshold(batch_losses, self.cfg.discard_rate)
        self.state.issued_step = step
