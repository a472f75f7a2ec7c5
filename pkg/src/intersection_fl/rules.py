"""Analytic collision-avoidance expert built from three safety values.

Every function accepts scalars or numpy arrays and broadcasts. Logarithms are
natural, with the exponents pulled out of the log (``beta * ln(x)``) so that
``beta_acc = 12`` cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .config import RuleConfig

ArrayLike = Union[float, np.ndarray]


@dataclass
class RuleInputs:
    """Cyber-lane cues the expert needs for one vehicle (or arrays for many).

    Missing neighbours are represented by a ``lane_length`` gap and zero
    acceleration.
    """

    d_nearest: ArrayLike
    closing_speed: ArrayLike
    d_front: ArrayLike
    d_behind: ArrayLike
    acc_front: ArrayLike = 0.0
    acc_behind: ArrayLike = 0.0


@dataclass
class RuleTrace:
    sv_space: ArrayLike
    sv_time: ArrayLike
    sv_accel: ArrayLike
    sv: ArrayLike
    action: ArrayLike


def time_to_collision(gap: ArrayLike, closing_speed: ArrayLike) -> ArrayLike:
    """Gap over positive closing speed; ``inf`` when the pair is not closing."""
    gap = np.asarray(gap, dtype=float)
    closing = np.asarray(closing_speed, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(closing > 0, gap / np.where(closing > 0, closing, 1.0), np.inf)
    return ttc if ttc.ndim else float(ttc)


def sv_space(d_nearest: ArrayLike, cfg: RuleConfig) -> ArrayLike:
    d = np.asarray(d_nearest, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(d > 0, cfg.beta_s * np.log(np.where(d > 0, d, 1.0) / cfg.alpha_s), cfg.sv_min)
    return out if out.ndim else float(out)


def sv_time(t_nearest: ArrayLike, cfg: RuleConfig) -> ArrayLike:
    """Time-to-collision term.

    Inside the sensitive window ``0 < t < 1`` this is ``-(alpha_t / tanh t)^beta_t``,
    which for even ``beta_t`` equals the form with ``tanh(-t)`` in the base.
    Non-positive TTC means the collision is imminent and maps to ``sv_min``.
    """
    t = np.asarray(t_nearest, dtype=float)
    inside = (t > 0) & (t < 1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        base = cfg.alpha_t / np.tanh(np.where(inside, t, 1.0))
        out = np.where(inside, -(base ** int(cfg.beta_t)), 2.0)
    out = np.where(t <= 0, cfg.sv_min, out)
    return out if out.ndim else float(out)


def sv_accel(d_front: ArrayLike, acc_front: ArrayLike, cfg: RuleConfig) -> ArrayLike:
    d = np.asarray(d_front, dtype=float)
    acc = np.asarray(acc_front, dtype=float)
    ratio = np.minimum(d / cfg.d_threshold, cfg.alpha_acc)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(np.where(ratio > 0, ratio, 1.0))
    out = cfg.lambda_acc * acc * cfg.beta_acc * log_ratio
    # A zero gap is a contact; the log diverges, so saturate in the direction it points.
    out = np.where(ratio > 0, out, np.where(acc == 0, 0.0, -np.sign(acc) * cfg.sv_max))
    return out if out.ndim else float(out)


def combine_sv(sv_s: ArrayLike, sv_t: ArrayLike, sv_acc: ArrayLike, cfg: RuleConfig) -> ArrayLike:
    out = np.clip(np.asarray(sv_s, dtype=float) + sv_t + sv_acc, cfg.sv_min, cfg.sv_max)
    return out if out.ndim else float(out)


def sv_to_action(sv: ArrayLike, d_front: ArrayLike, d_behind: ArrayLike, cfg: RuleConfig) -> ArrayLike:
    """Map a combined safety value to an acceleration command (unclamped).

    When the front gap is the smaller one the magnitude ``|sv / eta|`` is used;
    otherwise the signed value.
    """
    a = np.asarray(sv, dtype=float) / cfg.eta_conversion
    out = np.where(np.asarray(d_front) <= np.asarray(d_behind), np.abs(a), a)
    return out if out.ndim else float(out)


def rule_trace(inputs: RuleInputs, cfg: RuleConfig) -> RuleTrace:
    """Evaluate every intermediate safety value along with the action."""
    t_nearest = time_to_collision(inputs.d_nearest, inputs.closing_speed)
    if cfg.front_is_upstream:
        d_f, d_b, acc_f = inputs.d_behind, inputs.d_front, inputs.acc_behind
    else:
        d_f, d_b, acc_f = inputs.d_front, inputs.d_behind, inputs.acc_front
    s = sv_space(inputs.d_nearest, cfg)
    t = sv_time(t_nearest, cfg)
    acc = sv_accel(d_f, acc_f, cfg)
    sv = combine_sv(s, t, acc, cfg)
    return RuleTrace(s, t, acc, sv, sv_to_action(sv, d_f, d_b, cfg))


def rule_action(inputs: RuleInputs, cfg: RuleConfig) -> ArrayLike:
    """Expert acceleration in m/s^2, before the simulator's [a_min, a_max] clamp."""
    return rule_trace(inputs, cfg).action
