"""Experiment building blocks shared by the CLI and the acceptance suite.

Everything here is pure with respect to the file system: functions take an
:class:`ExperimentConfig`, derive their seeds from the master seed, and return
in-memory results.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, derive_seed
from .cyber_lane import state_size
from .federated import FederationLog, TrainerNode, run_federation
from .imitation import convergence_step
from .metrics import IndicatorSet, indicators, pooled_indicators
from .policy import PolicyParams, init_params
from .selection import SelectionConfig, savings_report
from .sim import EpisodeLog, run_episode


def eval_seeds(cfg: ExperimentConfig, density: float, n: Optional[int] = None) -> list[int]:
    """Evaluation seeds for one density. Every policy scored at that density sees the same list."""
    n = cfg.training.eval_seeds if n is None else n
    return [derive_seed(cfg.seed, f"eval/{density:g}/{k}") for k in range(n)]


@dataclass
class Evaluation:
    density: float
    mode: str
    seeds: list[int]
    per_seed: list[IndicatorSet]
    pooled: IndicatorSet
    n_vehicles: int
    n_collision: int


def evaluate(cfg: ExperimentConfig, density: float, mode: str, params: Optional[PolicyParams] = None,
             seeds: Optional[Sequence[int]] = None) -> Evaluation:
    """Run one episode per seed at ``density`` under ``mode`` (rule, model or mixed)."""
    seeds = list(eval_seeds(cfg, density) if seeds is None else seeds)
    sim = replace(cfg.sim, arrival_rate_lambda=float(density))
    logs: list[EpisodeLog] = [run_episode(sim, cfg.rules, mode, params, cfg.training.epsilon, seed=s,
                                          n_select=cfg.training.n_select) for s in seeds]
    return Evaluation(float(density), mode, seeds, [indicators(l) for l in logs], pooled_indicators(logs),
                      sum(l.n_vehicles for l in logs), sum(l.n_collision for l in logs))


def initial_params(cfg: ExperimentConfig) -> PolicyParams:
    return init_params(derive_seed(cfg.seed, "init"), (state_size(cfg.training.n_select), 64, 64, 1))


def train_il(cfg: ExperimentConfig, density: float, steps: Optional[int] = None,
             selection: Optional[SelectionConfig] = None) -> TrainerNode:
    """Train one model from scratch on rule-driven traffic at ``density``."""
    steps = cfg.training.total_steps if steps is None else steps
    training = replace(cfg.training, total_steps=steps)
    node = TrainerNode(0, density, cfg.sim, cfg.rules, training, initial_params(cfg), cfg.seed,
                       selection=selection, starvation_steps=cfg.selection.starvation_steps)
    node.train(steps)
    return node


@dataclass
class SweepPoint:
    p: float
    node: TrainerNode
    savings_pct: float
    converged_at: Optional[int]


def selection_point(cfg: ExperimentConfig, p: float) -> SweepPoint:
    """Train at the sweep density with discard rate ``p`` and read savings and convergence."""
    sc = cfg.selection
    node = train_il(cfg, sc.density, max(cfg.training.total_steps, sc.horizon_steps),
                    SelectionConfig(p, enabled=p > 0))
    return SweepPoint(p, node, savings_report(node.selector.counters, sc.horizon_steps),
                      convergence_step(node.curve.losses, cap=sc.horizon_steps))


def federation(cfg: ExperimentConfig, mode: str, score_rounds: bool = True) -> FederationLog:
    """Federated training in ``mode``; optionally score every global model at the evaluation density."""
    dens = cfg.federation.eval_density
    seeds = eval_seeds(cfg, dens)

    def score(_r: int, params: PolicyParams) -> dict:
        ev = evaluate(cfg, dens, "model", params, seeds)
        return {"eval_density": dens, "collision_ratio": ev.pooled.collision_ratio,
                "v_avg": ev.pooled.v_avg, "discomfort": ev.pooled.discomfort}

    return run_federation(cfg, mode=mode, evaluate=score if score_rounds else None)


def is_monotone_non_decreasing(values: Sequence[float]) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.diff(v) >= 0))
