"""Edge trainers, density-aware federated averaging and the round loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .config import ExperimentConfig, RuleConfig, SimConfig, TrainingConfig, derive_seed
from .cyber_lane import state_size
from .imitation import ExperienceBuffer, TrainingCurve, default_optimizer, expert_labels, per_sample_loss, train_step
from .policy import PolicyParams, init_params, serialize
from .selection import SelectionConfig, Selector
from .sim import Simulation

log = logging.getLogger(__name__)

AGGREGATION_MODES = ("same", "density")
# Each stored experience: n_state float32 values + one float32 action.
def experience_record_bytes(n_state: int) -> int:
    return 4 * (n_state + 1)


class TrainerNode:
    """One edge trainer: its intersection simulation, experience buffer and local model.

    Vehicles are driven by the rule while the model learns from their uploads,
    so the traffic a node sees does not depend on the model it is training.
    """

    def __init__(self, node_id: int, density: float, sim_cfg: SimConfig, rules: RuleConfig,
                 training: TrainingConfig, params: PolicyParams, master_seed: int,
                 selection: Optional[SelectionConfig] = None, starvation_steps: int = 200):
        self.id = node_id
        self.density = float(density)
        if self.density <= 0:
            raise ValueError("trainer density must be positive")
        cfg = SimConfig(**{**sim_cfg.__dict__, "arrival_rate_lambda": self.density})
        self.sim = Simulation(cfg, rules, seed=derive_seed(master_seed, f"traffic/{node_id}/{self.density:g}"),
                              n_select=training.n_select)
        self.training = training
        self.buffer = ExperienceBuffer(training.buffer_capacity, state_size(training.n_select),
                                       np.random.default_rng(derive_seed(master_seed, f"buffer/{node_id}")))
        self.params = params.copy()
        self.opt = default_optimizer(self.params, training)
        self.selector = Selector(selection or SelectionConfig(0.0, enabled=False), node_id, starvation_steps)
        self.curve = TrainingCurve()
        self.sim_steps = 0
        self.train_steps = 0
        self.experiences_uploaded = 0

    def interact(self) -> int:
        """One simulation step; uploads the (filtered) experiences and returns how many."""
        res = self.sim.step()
        self.sim_steps += 1
        if not len(res.observation):
            self.selector.filter(self.sim_steps, np.zeros(0))
            return 0
        labels = expert_labels(res.rule_actions, self.sim.cfg)
        states = res.observation.states
        if self.selector.cfg.active:
            losses = per_sample_loss(self.params, states, labels)
        else:
            losses = np.ones(len(labels))
        mask = self.selector.filter(self.sim_steps, losses)
        if mask.any():
            self.buffer.add_batch(states[mask], labels[mask])
        n = int(mask.sum())
        self.experiences_uploaded += n
        return n

    def train(self, n_steps: int, max_sim_steps: Optional[int] = None) -> int:
        """Interleave one simulation step with one gradient step until ``n_steps`` updates are done.

        Returns the number of experiences consumed (``updates * batch_size``).
        """
        B = self.training.batch_size
        done = 0
        sim_budget = max_sim_steps if max_sim_steps is not None else 50 * max(n_steps, 1) + 10_000
        sims = 0
        while done < n_steps and sims < sim_budget:
            self.interact()
            sims += 1
            lr = self.opt.lr()
            out = train_step(self.params, self.opt, self.buffer, B)
            if out.skipped:
                continue
            self.params, self.opt = out.params, out.opt
            self.train_steps += 1
            done += 1
            self.curve.append(self.train_steps, out.loss, lr)
            self.selector.refresh(self.sim_steps, out.sample_losses)
        if done < n_steps:
            log.warning("trainer %d stopped after %d/%d updates: buffer never filled", self.id, done, n_steps)
        return done * B


def local_round(node: TrainerNode, global_params: PolicyParams, local_steps: int) -> tuple[PolicyParams, int]:
    """Adopt the global model, train locally, return ``(local model, d_n)``."""
    node.params = global_params.copy()
    if local_steps <= 0:
        return node.params.copy(), 0
    d_n = node.train(local_steps)
    return node.params.copy(), d_n


def aggregation_weights(d: Sequence[float], densities: Sequence[float], mode: str) -> np.ndarray:
    """Normalised weights: ``d_n`` (same-proportion) or ``gamma_n * d_n`` (density-aware)."""
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    d = np.asarray(d, dtype=float)
    dens = np.asarray(densities, dtype=float)
    if d.size == 0 or d.shape != dens.shape:
        raise ValueError("counts and densities must be non-empty and length-matched")
    if np.any(d < 0) or np.any(dens <= 0):
        raise ValueError("counts must be >= 0 and densities > 0")
    raw = d if mode == "same" else (dens / dens.sum()) * d
    total = raw.sum()
    if total <= 0:
        raise ValueError("no trainer contributed data")
    return raw / total


class NoContribution(RuntimeWarning):
    pass


def aggregate(models: Sequence[PolicyParams], d: Sequence[float], densities: Sequence[float], mode: str,
              previous: Optional[PolicyParams] = None) -> PolicyParams:
    """Weighted element-wise average of the local models.

    If every ``d_n`` is zero the previous global model is returned unchanged
    (with a :class:`NoContribution` warning); without one, ``ValueError``.
    """
    if len(models) == 0 or len(models) != len(d):
        raise ValueError("models and counts must be non-empty and length-matched")
    if float(np.sum(d)) <= 0:
        if previous is None:
            raise ValueError("no trainer contributed data and no previous model given")
        import warnings

        warnings.warn("all d_n are zero; keeping the previous global model", NoContribution)
        return previous.copy()
    w = aggregation_weights(d, densities, mode)
    # Accumulate in float64, in trainer order, so results do not depend on scheduling.
    acc = np.zeros(models[0].vector.shape, dtype=np.float64)
    for wn, m in zip(w, models):
        if wn:
            acc += wn * m.vector.astype(np.float64)
    # Averaging identical inputs must reproduce them exactly; the float64 round trip can be off by an ulp.
    vec = acc.astype(models[0].dtype)
    active = [m for wn, m in zip(w, models) if wn > 0]
    if all(np.array_equal(active[0].vector, m.vector) for m in active[1:]):
        vec = active[0].vector.copy()
    version = max(m.version for m in models) + 1
    return models[0].with_vector(vec, version=version)


@dataclass
class RoundRecord:
    round: int
    trainer: int
    density: float
    d_n: int
    weight: float
    bytes_up: int
    bytes_down: int
    experiences_uploaded: int


@dataclass
class FederationLog:
    mode: str
    records: list[RoundRecord] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    checkpoint_bytes: int = 0
    bytes_down: int = 0
    bytes_up_models: int = 0
    bytes_up_experience: int = 0
    final: Optional[PolicyParams] = None
    history: list[PolicyParams] = field(default_factory=list)
    local_history: list[list[PolicyParams]] = field(default_factory=list)

    def csv(self) -> str:
        """One row per (round, trainer); evaluation columns repeat the round's global score."""
        by_round = {e["round"]: e for e in self.evaluations}
        rows = ["round,trainer,density,d_n,weight,bytes_up,bytes_down,experiences_uploaded,"
                "eval_density,collision_ratio,v_avg,J_avg"]
        for r in self.records:
            e = by_round.get(r.round, {})
            ev = [e.get(k, "") for k in ("eval_density", "collision_ratio", "v_avg", "discomfort")]
            ev = [repr(x) if isinstance(x, float) else str(x) for x in ev]
            rows.append(",".join([str(r.round), str(r.trainer), repr(r.density), str(r.d_n), repr(r.weight),
                                  str(r.bytes_up), str(r.bytes_down), str(r.experiences_uploaded), *ev]))
        return "\n".join(rows) + "\n"


def run_federation(cfg: ExperimentConfig, mode: Optional[str] = None, rounds: Optional[int] = None,
                   densities: Optional[Sequence[float]] = None, local_steps: Optional[int] = None,
                   evaluate=None) -> FederationLog:
    """Synchronous FedAvg over one trainer per density.

    ``evaluate(round, params) -> dict`` is called on each new global model
    when given. Trainer traffic and buffers are seeded from the trainer id and
    density only, so runs with different ``mode`` see identical experience streams.
    """
    fed = cfg.federation
    mode = mode or fed.mode
    rounds = rounds if rounds is not None else fed.rounds
    densities = list(densities if densities is not None else fed.densities)
    local_steps = local_steps if local_steps is not None else fed.local_steps
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    training = TrainingConfig(**{**cfg.training.__dict__, "total_steps": max(1, rounds * local_steps)})

    global_params = init_params(derive_seed(cfg.seed, "init"), (state_size(training.n_select), 64, 64, 1))
    nodes = [TrainerNode(n, dens, cfg.sim, cfg.rules, training, global_params, cfg.seed)
             for n, dens in enumerate(densities)]
    out = FederationLog(mode=mode)
    ckpt = len(serialize(global_params))
    out.checkpoint_bytes = ckpt
    rec_bytes = experience_record_bytes(state_size(training.n_select))
    for r in range(rounds):
        locals_, counts = [], []
        for node in nodes:
            before = node.experiences_uploaded
            local, d_n = local_round(node, global_params, local_steps)
            locals_.append(local)
            counts.append(d_n)
            uploaded = node.experiences_uploaded - before
            out.bytes_down += ckpt
            out.bytes_up_models += ckpt
            out.bytes_up_experience += uploaded * rec_bytes
            out.records.append(RoundRecord(r, node.id, node.density, d_n, 0.0, ckpt + uploaded * rec_bytes, ckpt,
                                           uploaded))
        if sum(counts) > 0:
            weights = aggregation_weights(counts, densities, mode)
        else:
            weights = np.zeros(len(nodes))
        for rec, wn in zip(out.records[-len(nodes):], weights):
            rec.weight = float(wn)
        global_params = aggregate(locals_, counts, densities, mode, previous=global_params)
        out.history.append(global_params)
        out.local_history.append(locals_)
        if evaluate is not None:
            out.evaluations.append({"round": r, **evaluate(r, global_params)})
    out.final = global_params
    return out
