"""Configuration records, validation, file loading and seed derivation."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    """Raised when a configuration field is out of range or unknown.

    ``errors`` holds one ``"section.field: message"`` string per problem.
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _check(errors: list[str], ok: bool, name: str, message: str) -> None:
    if not ok:
        errors.append(f"{name}: {message}")


@dataclass
class SimConfig:
    lane_length: float = 150.0
    vehicle_size: float = 2.0
    v_min: float = 6.0
    v_max: float = 13.0
    v_init: float = 10.0
    a_min: float = -3.0
    a_max: float = 3.0
    step_T: float = 0.1
    arrival_rate_lambda: float = 900.0  # veh / lane / hour
    n_lanes: int = 4
    episode_steps: int = 2000
    rng_seed: int = 0
    # Entry admission: a queued vehicle enters only if no live vehicle sits within
    # vehicle_size + min_spawn_gap of the entry, measured on the shared cyber-lane
    # ("cyber") or on the vehicle's own lane ("lane").
    min_spawn_gap: float = 8.0
    entry_scope: str = "cyber"
    conflict_margin: float = 1.0

    def validate(self, prefix: str = "sim") -> list[str]:
        e: list[str] = []
        _check(e, self.lane_length > 0, f"{prefix}.lane_length", "must be > 0")
        _check(e, self.vehicle_size > 0, f"{prefix}.vehicle_size", "must be > 0")
        _check(e, self.v_min <= self.v_init <= self.v_max, f"{prefix}.v_init",
               "must satisfy v_min <= v_init <= v_max")
        _check(e, self.a_min < 0 < self.a_max, f"{prefix}.a_min/a_max", "must satisfy a_min < 0 < a_max")
        _check(e, self.step_T > 0, f"{prefix}.step_T", "must be > 0")
        _check(e, self.arrival_rate_lambda >= 0, f"{prefix}.arrival_rate_lambda", "must be >= 0")
        _check(e, self.n_lanes >= 1, f"{prefix}.n_lanes", "must be >= 1")
        _check(e, self.episode_steps >= 0, f"{prefix}.episode_steps", "must be >= 0")
        _check(e, self.min_spawn_gap >= 0, f"{prefix}.min_spawn_gap", "must be >= 0")
        _check(e, self.entry_scope in ("cyber", "lane"), f"{prefix}.entry_scope", "must be 'cyber' or 'lane'")
        _check(e, self.conflict_margin >= 0, f"{prefix}.conflict_margin", "must be >= 0")
        return e


@dataclass
class RuleConfig:
    alpha_s: float = 10.0
    beta_s: float = 10.0
    alpha_t: float = 1.5
    beta_t: int = 2
    alpha_acc: float = 1.5
    beta_acc: float = 12.0
    lambda_acc: float = 0.2
    sv_max: float = 20.0
    sv_min: float = -20.0
    eta_conversion: float = 3.0
    d_threshold: float = 10.0
    # The expert measures "front" against the direction of travel (the cyber-lane
    # neighbour farther from the conflict point). False selects the downstream
    # neighbour instead, which lets the rule drive vehicles into each other.
    front_is_upstream: bool = True

    def validate(self, prefix: str = "rules") -> list[str]:
        e: list[str] = []
        _check(e, self.alpha_s > 0, f"{prefix}.alpha_s", "must be > 0")
        _check(e, self.sv_min < self.sv_max, f"{prefix}.sv_min", "must be < sv_max")
        _check(e, self.eta_conversion > 0, f"{prefix}.eta_conversion", "must be > 0")
        _check(e, float(self.beta_t) == int(self.beta_t) and int(self.beta_t) > 0 and int(self.beta_t) % 2 == 0,
               f"{prefix}.beta_t", "must be an even positive integer")
        _check(e, self.d_threshold > 0, f"{prefix}.d_threshold", "must be > 0")
        _check(e, self.alpha_acc > 0, f"{prefix}.alpha_acc", "must be > 0")
        _check(e, self.alpha_t > 0, f"{prefix}.alpha_t", "must be > 0")
        return e


@dataclass
class TrainingConfig:
    batch_size: int = 48
    learning_rate: float = 1e-3
    total_steps: int = 6000
    buffer_capacity: int = 100_000
    epsilon: float = 0.5
    n_select: int = 5
    eval_seeds: int = 5

    def validate(self, prefix: str = "training") -> list[str]:
        e: list[str] = []
        _check(e, self.batch_size >= 1, f"{prefix}.batch_size", "must be >= 1")
        _check(e, 0 < self.learning_rate, f"{prefix}.learning_rate", "must be > 0")
        _check(e, self.total_steps >= 1, f"{prefix}.total_steps", "must be >= 1")
        _check(e, self.buffer_capacity >= self.batch_size, f"{prefix}.buffer_capacity", "must be >= batch_size")
        _check(e, 0.0 <= self.epsilon <= 1.0, f"{prefix}.epsilon", "must lie in [0, 1]")
        _check(e, self.n_select >= 1, f"{prefix}.n_select", "must be >= 1")
        _check(e, self.eval_seeds >= 1, f"{prefix}.eval_seeds", "must be >= 1")
        return e


@dataclass
class FederationConfig:
    densities: list[float] = field(default_factory=lambda: [300.0, 900.0, 1500.0, 2100.0])
    rounds: int = 10
    local_steps: int = 600
    mode: str = "density"
    eval_density: float = 2100.0  # where each round's global model is scored

    def validate(self, prefix: str = "federation") -> list[str]:
        e: list[str] = []
        _check(e, len(self.densities) >= 1, f"{prefix}.densities", "must be non-empty")
        _check(e, all(d > 0 for d in self.densities), f"{prefix}.densities", "must all be > 0")
        _check(e, self.rounds >= 1, f"{prefix}.rounds", "must be >= 1")
        _check(e, self.local_steps >= 0, f"{prefix}.local_steps", "must be >= 0")
        _check(e, self.mode in ("same", "density"), f"{prefix}.mode", "must be 'same' or 'density'")
        _check(e, self.eval_density > 0, f"{prefix}.eval_density", "must be > 0")
        return e


@dataclass
class SelectionSweepConfig:
    discard_rates: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.10])
    density: float = 900.0
    horizon_steps: int = 6000
    starvation_steps: int = 200

    def validate(self, prefix: str = "selection") -> list[str]:
        e: list[str] = []
        _check(e, all(0.0 <= p < 1.0 for p in self.discard_rates), f"{prefix}.discard_rates", "each must lie in [0, 1)")
        _check(e, self.density > 0, f"{prefix}.density", "must be > 0")
        _check(e, self.horizon_steps >= 1, f"{prefix}.horizon_steps", "must be >= 1")
        _check(e, self.starvation_steps >= 1, f"{prefix}.starvation_steps", "must be >= 1")
        return e


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    rules: RuleConfig = field(default_factory=RuleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    selection: SelectionSweepConfig = field(default_factory=SelectionSweepConfig)
    eval_densities: list[float] = field(default_factory=lambda: [300.0 * k for k in range(1, 8)])
    output_dir: str = "runs"
    seed: int = 0

    def validate(self) -> None:
        errors = (self.sim.validate() + self.rules.validate() + self.training.validate()
                  + self.federation.validate() + self.selection.validate())
        _check(errors, len(self.eval_densities) >= 1 and all(d >= 0 for d in self.eval_densities),
               "eval_densities", "must be a non-empty list of non-negative rates")
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        sections = {"sim": SimConfig, "rules": RuleConfig, "training": TrainingConfig,
                    "federation": FederationConfig, "selection": SelectionSweepConfig}
        errors: list[str] = []
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            if key in sections:
                if not isinstance(value, dict):
                    errors.append(f"{key}: must be a mapping")
                    continue
                known = {f.name for f in dataclasses.fields(sections[key])}
                unknown = sorted(set(value) - known)
                errors.extend(f"{key}.{name}: unknown field" for name in unknown)
                kwargs[key] = sections[key](**{k: v for k, v in value.items() if k in known})
            elif key in ("eval_densities", "output_dir", "seed"):
                kwargs[key] = value
            else:
                errors.append(f"{key}: unknown field")
        if errors:
            raise ConfigError(errors)
        cfg = cls(**kwargs)
        try:
            cfg.validate()
        except TypeError as exc:  # e.g. a string where a number belongs
            raise ConfigError([f"<types>: {exc}"]) from None
        return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON or YAML experiment file; ``None`` gives the defaults."""
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config file must contain a mapping"])
    return ExperimentConfig.from_dict(data)


def derive_seed(master: int, role: str) -> int:
    """Stable sub-seed for a named role (e.g. ``"train/900"``).

    Mixes the master seed with the CRC32 of the role string so that the same
    role always sees the same random stream regardless of run order.
    """
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(role.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
