"""Discrete-time longitudinal simulation of a four-approach unsignalized intersection.

Positions are remaining distances to the shared conflict point, so forward motion
makes ``x_long`` shrink::

    x' = x - v*T - a*T^2/2        v' = clip(v + a*T, v_min, v_max)

A vehicle retires once ``x_long <= 0``.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .config import RuleConfig, SimConfig
from .cyber_lane import N_SELECT, Observation, observe
from .rules import rule_action

ACTION_MODES = ("rule", "model", "mixed")


@dataclass
class VehicleState:
    id: int
    lane: int
    x_long: float
    v: float
    a: float
    spawn_step: int
    exit_step: Optional[int] = None


@dataclass(frozen=True)
class VehicleRecord:
    id: int
    lane: int
    spawn_step: int
    exit_step: int
    travel_time_s: float
    sum_sq_jerk: float


@dataclass(frozen=True)
class CollisionEvent:
    step: int
    id_a: int
    id_b: int


@dataclass
class EpisodeLog:
    steps: int
    step_T: float
    lane_length: float
    completed: list[VehicleRecord] = field(default_factory=list)
    collisions: list[CollisionEvent] = field(default_factory=list)
    collided_ids: list[int] = field(default_factory=list)
    n_spawned: int = 0
    accel_histories: Optional[dict[int, list[float]]] = None

    @property
    def n_collision(self) -> int:
        return len(self.collided_ids)

    @property
    def n_vehicles(self) -> int:
        """Vehicles with a final outcome: retired or removed by a collision."""
        return len(self.completed) + len(self.collided_ids)

    def vehicles_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "lane", "spawn_step", "exit_step", "travel_time_s", "sum_sq_jerk"])
        for r in self.completed:
            w.writerow([r.id, r.lane, r.spawn_step, r.exit_step, repr(r.travel_time_s), repr(r.sum_sq_jerk)])
        return buf.getvalue()

    def collisions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "id_a", "id_b"])
        for c in self.collisions:
            w.writerow([c.step, c.id_a, c.id_b])
        return buf.getvalue()


def step_kinematics(s: VehicleState, a_cmd: float, T: float, cfg: SimConfig) -> VehicleState:
    """Advance one vehicle by one step.

    The command is clamped to ``[a_min, a_max]`` first; if the resulting speed is
    then clamped too, the recorded acceleration is the realised ``(v' - v)/T`` and
    the position update uses that same realised value.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    x, v, a = _integrate(np.array([s.x_long]), np.array([s.v]), np.array([a_cmd]), T, cfg)
    return replace(s, x_long=float(x[0]), v=float(v[0]), a=float(a[0]))


def _integrate(x: np.ndarray, v: np.ndarray, a_cmd: np.ndarray, T: float, cfg: SimConfig):
    a = np.clip(a_cmd, cfg.a_min, cfg.a_max)
    v_new = np.clip(v + a * T, cfg.v_min, cfg.v_max)
    a_eff = np.where(v_new != v + a * T, (v_new - v) / T, a)
    x_new = x - v * T - 0.5 * a_eff * T * T
    return x_new, v_new, a_eff


def sample_arrivals(lam: float, T: float, rng: np.random.Generator, n_lanes: int = 4) -> np.ndarray:
    """Poisson arrival counts per lane for one step; ``lam`` is in veh/lane/hour."""
    if lam < 0:
        raise ValueError("arrival rate must be non-negative")
    return rng.poisson(lam / 3600.0 * T, size=n_lanes)


def detect_collisions(lanes: np.ndarray, x: np.ndarray, ids: np.ndarray, cfg: SimConfig) -> list[tuple[int, int]]:
    """Colliding id pairs ``(low, high)``, each reported once, sorted.

    Same lane: centres closer than one vehicle length. Different lanes: both
    vehicles inside the conflict zone ``|x| < size/2 + conflict_margin``.
    """
    lanes = np.asarray(lanes)
    x = np.asarray(x, dtype=float)
    ids = np.asarray(ids)
    pairs: set[tuple[int, int]] = set()
    n = len(ids)
    if n >= 2:
        order = np.lexsort((x, lanes))
        ls, xs = lanes[order], x[order]
        # Sorted by (lane, x): an overlapping pair k ranks apart implies overlaps at every smaller rank gap.
        k = 1
        while k < n:
            hit = np.flatnonzero((ls[k:] == ls[:-k]) & (xs[k:] - xs[:-k] < cfg.vehicle_size))
            if hit.size == 0:
                break
            for i in hit:
                a, b = int(ids[order[i]]), int(ids[order[i + k]])
                pairs.add((min(a, b), max(a, b)))
            k += 1
    zone = np.flatnonzero(np.abs(x) < cfg.vehicle_size / 2 + cfg.conflict_margin)
    for i_pos, i in enumerate(zone):
        for j in zone[i_pos + 1:]:
            if lanes[i] != lanes[j]:
                a, b = int(ids[i]), int(ids[j])
                pairs.add((min(a, b), max(a, b)))
    return sorted(pairs)


class World:
    """Mutable simulation state: live vehicles as parallel arrays plus logs."""

    def __init__(self, cfg: SimConfig, rng: np.random.Generator, record_histories: bool = False):
        self.cfg = cfg
        self.rng = rng
        self.step = 0
        self.next_id = 0
        self.ids = np.zeros(0, dtype=np.int64)
        self.lanes = np.zeros(0, dtype=np.int64)
        self.x = np.zeros(0)
        self.v = np.zeros(0)
        self.a = np.zeros(0)
        self.spawn_steps = np.zeros(0, dtype=np.int64)
        self.sum_sq_jerk = np.zeros(0)
        self.queues: list[deque[int]] = [deque() for _ in range(cfg.n_lanes)]
        self.log = EpisodeLog(steps=0, step_T=cfg.step_T, lane_length=cfg.lane_length,
                              accel_histories={} if record_histories else None)

    @property
    def vehicles(self) -> list[VehicleState]:
        return [VehicleState(int(i), int(l), float(x), float(v), float(a), int(s))
                for i, l, x, v, a, s in zip(self.ids, self.lanes, self.x, self.v, self.a, self.spawn_steps)]

    @property
    def queue_length(self) -> int:
        return sum(len(q) for q in self.queues)

    def entry_blocked(self, lane: int) -> bool:
        limit = self.cfg.lane_length - self.cfg.vehicle_size - self.cfg.min_spawn_gap
        near_entry = self.x > limit
        if self.cfg.entry_scope == "lane":
            near_entry &= self.lanes == lane
        return bool(near_entry.any())

    def add_arrivals(self, counts: np.ndarray) -> None:
        for lane, g in enumerate(counts):
            self.queues[lane].extend([self.step] * int(g))

    def spawn_vehicle(self, lane: int) -> bool:
        """Admit the head of ``lane``'s queue if the entry is free."""
        if not self.queues[lane] or self.entry_blocked(lane):
            return False
        self.queues[lane].popleft()
        vid = self.next_id
        self.next_id += 1
        self.ids = np.append(self.ids, vid)
        self.lanes = np.append(self.lanes, lane)
        self.x = np.append(self.x, self.cfg.lane_length)
        self.v = np.append(self.v, self.cfg.v_init)
        self.a = np.append(self.a, 0.0)
        self.spawn_steps = np.append(self.spawn_steps, self.step)
        self.sum_sq_jerk = np.append(self.sum_sq_jerk, 0.0)
        self.log.n_spawned += 1
        if self.log.accel_histories is not None:
            self.log.accel_histories[vid] = [0.0]
        return True

    def spawn_pending(self) -> None:
        # Oldest waiting arrival first; lane index breaks ties.
        heads = sorted((q[0], lane) for lane, q in enumerate(self.queues) if q)
        for _, lane in heads:
            self.spawn_vehicle(lane)

    def observe(self, n_select: int = N_SELECT) -> Observation:
        return observe(self.ids, self.x, self.v, self.a, self.cfg, n_select)

    def apply_actions(self, a_cmd: np.ndarray) -> None:
        """Integrate kinematics, resolve collisions, retire vehicles past the conflict point."""
        cfg = self.cfg
        T = cfg.step_T
        x, v, a = _integrate(self.x, self.v, np.asarray(a_cmd, dtype=float), T, cfg)
        self.sum_sq_jerk = self.sum_sq_jerk + ((a - self.a) / T) ** 2
        if self.log.accel_histories is not None:
            for vid, acc in zip(self.ids, a):
                self.log.accel_histories[int(vid)].append(float(acc))
        self.x, self.v, self.a = x, v, a
        self.step += 1

        pairs = detect_collisions(self.lanes, self.x, self.ids, cfg)
        dead = set()
        for ia, ib in pairs:
            self.log.collisions.append(CollisionEvent(self.step, ia, ib))
            dead.update((ia, ib))
        if dead:
            self.log.collided_ids.extend(sorted(dead))
        dead_mask = np.isin(self.ids, list(dead)) if dead else np.zeros(len(self.ids), dtype=bool)
        done = (self.x <= 0) & ~dead_mask
        for k in np.flatnonzero(done):
            self.log.completed.append(VehicleRecord(
                id=int(self.ids[k]), lane=int(self.lanes[k]), spawn_step=int(self.spawn_steps[k]),
                exit_step=self.step, travel_time_s=(self.step - int(self.spawn_steps[k])) * T,
                sum_sq_jerk=float(self.sum_sq_jerk[k])))
        keep = ~(done | dead_mask)
        self.ids, self.lanes, self.x, self.v, self.a = (self.ids[keep], self.lanes[keep], self.x[keep],
                                                        self.v[keep], self.a[keep])
        self.spawn_steps, self.sum_sq_jerk = self.spawn_steps[keep], self.sum_sq_jerk[keep]
        self.log.steps = self.step


# (observation, rule actions) -> acceleration commands, one per row.
ActionFn = Callable[[Observation, np.ndarray], np.ndarray]


@dataclass
class StepResult:
    observation: Observation
    rule_actions: np.ndarray
    actions: np.ndarray


class Simulation:
    """Drives a :class:`World` with a policy, one step at a time."""

    def __init__(self, cfg: SimConfig, rules: RuleConfig, seed: Optional[int] = None,
                 record_histories: bool = False, n_select: int = N_SELECT):
        self.cfg = cfg
        self.rules = rules
        self.n_select = n_select
        self.world = World(cfg, np.random.default_rng(cfg.rng_seed if seed is None else seed), record_histories)

    def step(self, action_fn: Optional[ActionFn] = None) -> StepResult:
        """Arrivals, spawning, observation, action, kinematics and collisions.

        ``action_fn`` receives the observation and the rule's actions; ``None``
        executes the rule itself.
        """
        w = self.world
        w.add_arrivals(sample_arrivals(self.cfg.arrival_rate_lambda, self.cfg.step_T, w.rng, self.cfg.n_lanes))
        w.spawn_pending()
        obs = w.observe(self.n_select)
        rule_a = np.asarray(rule_action(obs.rule_inputs(), self.rules), dtype=float).reshape(len(obs))
        actions = rule_a if action_fn is None else np.asarray(action_fn(obs, rule_a), dtype=float).reshape(len(obs))
        w.apply_actions(actions)
        return StepResult(obs, rule_a, actions)

    def run(self, steps: int, action_fn: Optional[ActionFn] = None,
            on_step: Optional[Callable[[StepResult], None]] = None) -> EpisodeLog:
        for _ in range(steps):
            res = self.step(action_fn)
            if on_step is not None:
                on_step(res)
        return self.world.log


def make_action_fn(mode: str, params=None, epsilon: float = 0.5, cfg: Optional[SimConfig] = None):
    """Action function for ``mode`` in ``{"rule", "model", "mixed"}``."""
    if mode not in ACTION_MODES:
        raise ValueError(f"unknown action mode {mode!r}; expected one of {ACTION_MODES}")
    if mode == "rule":
        return None
    if params is None:
        raise ValueError(f"action mode {mode!r} needs policy parameters")
    from .imitation import mix
    from .policy import forward

    if mode == "model":
        return lambda obs, rule_a: forward(params, obs.states) if len(obs) else rule_a
    lo, hi = (cfg.a_min, cfg.a_max) if cfg is not None else (-3.0, 3.0)
    return lambda obs, rule_a: mix(forward(params, obs.states), rule_a, epsilon, lo, hi) if len(obs) else rule_a


def run_episode(cfg: SimConfig, rules: RuleConfig, action_mode: str = "rule", params=None,
                epsilon: float = 0.5, seed: Optional[int] = None, record_histories: bool = False,
                n_select: int = N_SELECT) -> EpisodeLog:
    """Run ``cfg.episode_steps`` steps under one policy source and return the log."""
    sim = Simulation(cfg, rules, seed=seed, record_histories=record_histories, n_select=n_select)
    return sim.run(cfg.episode_steps, make_action_fn(action_mode, params, epsilon, cfg))
