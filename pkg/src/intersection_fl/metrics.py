"""Safety, efficiency and discomfort indicators computed from episode logs."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sim import EpisodeLog


class UndefinedMetric(ValueError):
    """The indicator has no value for this input (e.g. no vehicles)."""


@dataclass(frozen=True)
class IndicatorSet:
    collision_ratio: float
    v_avg: float
    discomfort: float


def collision_ratio(n_collision: int, n_vehicles: int) -> float:
    if n_vehicles <= 0:
        raise UndefinedMetric("collision ratio undefined without vehicles")
    return n_collision / n_vehicles


def average_velocity(travel_times: Sequence[float], l_road: float = 150.0) -> float:
    t = np.asarray(travel_times, dtype=float)
    if t.size == 0:
        raise UndefinedMetric("no completed vehicles")
    if np.any(t <= 0):
        raise ValueError("travel times must be positive")
    return float(np.mean(l_road / t))


def jerk_sum_of_squares(history: Sequence[float], T: float) -> float:
    a = np.asarray(history, dtype=float)
    if a.size < 2:
        raise ValueError("acceleration history needs at least two samples")
    return float(np.sum((np.diff(a) / T) ** 2))


def discomfort(accel_histories: Iterable[Sequence[float]], T: float = 0.1) -> float:
    """Mean over vehicles of the summed squared jerk, jerk = (a_t - a_{t-1}) / T."""
    totals = [jerk_sum_of_squares(h, T) for h in accel_histories]
    if not totals:
        raise UndefinedMetric("no acceleration histories")
    return float(np.mean(totals))


def indicators(log: EpisodeLog) -> IndicatorSet:
    """All three indicators for one episode.

    Collided vehicles count toward the collision ratio only; speed and discomfort
    are averaged over vehicles that completed their run. Undefined values are NaN.
    """
    try:
        ratio = collision_ratio(log.n_collision, log.n_vehicles)
    except UndefinedMetric:
        ratio = float("nan")
    if log.completed:
        v = average_velocity([r.travel_time_s for r in log.completed], log.lane_length)
        j = float(np.mean([r.sum_sq_jerk for r in log.completed]))
    else:
        v = j = float("nan")
    return IndicatorSet(ratio, v, j)


def pooled_indicators(logs: Sequence[EpisodeLog]) -> IndicatorSet:
    """Indicators over the union of several episodes' vehicles."""
    n_col = sum(l.n_collision for l in logs)
    n_veh = sum(l.n_vehicles for l in logs)
    completed = [r for l in logs for r in l.completed]
    ratio = collision_ratio(n_col, n_veh) if n_veh else float("nan")
    if completed:
        v = average_velocity([r.travel_time_s for r in completed], logs[0].lane_length)
        j = float(np.mean([r.sum_sq_jerk for r in completed]))
    else:
        v = j = float("nan")
    return IndicatorSet(ratio, v, j)


def summary_json(density: float, mode: str, seed: int, ind: IndicatorSet, extra: Mapping | None = None) -> str:
    payload = {"density": density, "mode": mode, "seed": seed, **asdict(ind)}
    if extra:
        payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def aligned_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{x:.4g}" if isinstance(x, float) else str(x) for x in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
