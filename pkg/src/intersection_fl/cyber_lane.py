"""Projection of all approaches onto one cyber-lane and per-vehicle state vectors.

Every straight approach shares the conflict point at the intersection centre, so a
vehicle's cyber-lane position is simply its remaining distance to that point.
Ordering on the cyber-lane is ascending position with ties broken by lower id
(the lower id counts as being in front).

State vector layout, 3 * (1 + n_select) floats::

    [x/L, v/v_max, a/a_max,  (dx_1/L, v_1/v_max, a_1/a_max), ..., (dx_n/L, ...)]

with neighbours sorted by ``|dx|`` (ties by id) and padded with the inert
sentinel ``(L, 0, 0)`` before normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import SimConfig
from .rules import RuleInputs

N_SELECT = 5


@dataclass(frozen=True)
class CyberProjection:
    vehicle_id: int
    cyber_pos: float
    source_lane: int


@dataclass
class Observation:
    """Batched state vectors and rule cues, rows aligned with ``ids``."""

    ids: np.ndarray
    states: np.ndarray  # (n, 3 * (1 + n_select)) float32
    d_nearest: np.ndarray
    d_front: np.ndarray
    d_behind: np.ndarray
    acc_front: np.ndarray
    acc_behind: np.ndarray
    closing_speed: np.ndarray
    neighbor_ids: np.ndarray  # (n, n_select), -1 where padded

    def __len__(self) -> int:
        return len(self.ids)

    def rule_inputs(self) -> RuleInputs:
        return RuleInputs(self.d_nearest, self.closing_speed, self.d_front, self.d_behind,
                          self.acc_front, self.acc_behind)


@dataclass
class Neighborhood:
    """Single-vehicle view returned by :func:`nearest_neighbors`."""

    state: np.ndarray
    neighbor_ids: list[int]
    d_nearest: float
    d_front: float
    d_behind: float
    acc_front: float
    acc_behind: float
    closing_speed: float

    def rule_inputs(self) -> RuleInputs:
        return RuleInputs(self.d_nearest, self.closing_speed, self.d_front, self.d_behind,
                          self.acc_front, self.acc_behind)


def state_size(n_select: int = N_SELECT) -> int:
    return 3 * (1 + n_select)


def project(ids: Sequence[int], x_long: Sequence[float], lanes: Sequence[int]) -> list[CyberProjection]:
    """Cyber-lane projections ordered front to back."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    x_arr = np.asarray(x_long, dtype=float)
    order = np.lexsort((ids_arr, x_arr))
    return [CyberProjection(int(ids_arr[i]), float(x_arr[i]), int(lanes[i])) for i in order]


def observe(ids: np.ndarray, x: np.ndarray, v: np.ndarray, a: np.ndarray, cfg: SimConfig,
            n_select: int = N_SELECT) -> Observation:
    """Build state vectors and rule cues for every live vehicle at once.

    In one dimension the ``n_select`` nearest neighbours of a vehicle always lie
    within ``n_select`` ranks on either side of it in cyber-lane order, so only
    that window is searched. Rows whose cut-off distance is tied at the window
    edge fall back to a full scan.
    """
    ids = np.asarray(ids, dtype=np.int64)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    n = len(ids)
    L = cfg.lane_length
    width = state_size(n_select)
    if n == 0:
        empty = np.zeros(0)
        return Observation(ids, np.zeros((0, width), dtype=np.float32), empty, empty, empty, empty, empty, empty,
                           np.zeros((0, n_select), dtype=np.int64))

    order = np.lexsort((ids, x))
    xs, vs, as_, idss = x[order], v[order], a[order], ids[order]

    # Immediate cyber-lane neighbours.
    has_front = np.arange(n) > 0
    has_behind = np.arange(n) < n - 1
    prev = np.maximum(np.arange(n) - 1, 0)
    nxt = np.minimum(np.arange(n) + 1, n - 1)
    d_front = np.where(has_front, xs - xs[prev], L)
    d_behind = np.where(has_behind, xs[nxt] - xs, L)
    acc_front = np.where(has_front, as_[prev], 0.0)
    acc_behind = np.where(has_behind, as_[nxt], 0.0)
    front_nearest = d_front <= d_behind
    d_nearest = np.minimum(d_front, d_behind)
    closing = np.where(front_nearest, vs - vs[prev], vs[nxt] - vs)
    closing = np.where(has_front | has_behind, closing, 0.0)

    # Candidate window of +-n_select ranks, excluding self.
    offsets = np.concatenate([np.arange(-n_select, 0), np.arange(1, n_select + 1)])
    cand = np.arange(n)[:, None] + offsets[None, :]
    valid = (cand >= 0) & (cand < n)
    cand_c = np.clip(cand, 0, n - 1)
    dx = xs[cand_c] - xs[:, None]
    dist = np.where(valid, np.abs(dx), np.inf)
    cand_ids = np.where(valid, idss[cand_c], np.iinfo(np.int64).max)
    pick = np.lexsort((cand_ids, dist), axis=-1)[:, :n_select]
    rows = np.arange(n)[:, None]
    sel = cand_c[rows, pick]
    sel_valid = valid[rows, pick]
    # Exact position ties can put a lower-id vehicle at the cut-off distance just
    # outside the window; redo those rows over all vehicles.
    cutoff = dist[rows[:, 0], pick[:, -1]]
    edge = np.isfinite(cutoff) & ((dist[:, 0] == cutoff) | (dist[:, -1] == cutoff))
    for r in np.flatnonzero(edge):
        d_all = np.abs(xs - xs[r])
        d_all[r] = np.inf
        sel[r] = np.lexsort((idss, d_all))[:n_select]
        sel_valid[r] = True

    nb_dx = np.where(sel_valid, xs[sel] - xs[:, None], L)
    nb_v = np.where(sel_valid, vs[sel], 0.0)
    nb_a = np.where(sel_valid, as_[sel], 0.0)
    nb_ids = np.where(sel_valid, idss[sel], -1)

    states = np.empty((n, width), dtype=np.float64)
    states[:, 0] = xs / L
    states[:, 1] = vs / cfg.v_max
    states[:, 2] = as_ / cfg.a_max
    states[:, 3::3] = nb_dx / L
    states[:, 4::3] = nb_v / cfg.v_max
    states[:, 5::3] = nb_a / cfg.a_max

    # Back to caller's row order.
    inv = np.empty(n, dtype=np.int64)
    inv[order] = np.arange(n)
    return Observation(
        ids=ids,
        states=states[inv].astype(np.float32),
        d_nearest=d_nearest[inv],
        d_front=d_front[inv],
        d_behind=d_behind[inv],
        acc_front=acc_front[inv],
        acc_behind=acc_behind[inv],
        closing_speed=closing[inv],
        neighbor_ids=nb_ids[inv],
    )


def nearest_neighbors(projections: Sequence[CyberProjection], ego_id: int, velocities: dict[int, float],
                      accelerations: dict[int, float], cfg: SimConfig, n_select: int = N_SELECT) -> Neighborhood:
    """Neighbourhood of one vehicle; raises ``KeyError`` if ``ego_id`` is absent."""
    by_id = {p.vehicle_id: p for p in projections}
    if ego_id not in by_id:
        raise KeyError(f"vehicle {ego_id} is not on the cyber-lane")
    ids = np.array([p.vehicle_id for p in projections], dtype=np.int64)
    x = np.array([p.cyber_pos for p in projections], dtype=float)
    v = np.array([velocities[i] for i in ids], dtype=float)
    a = np.array([accelerations[i] for i in ids], dtype=float)
    obs = observe(ids, x, v, a, cfg, n_select)
    row = int(np.flatnonzero(ids == ego_id)[0])
    return Neighborhood(
        state=obs.states[row],
        neighbor_ids=[int(i) for i in obs.neighbor_ids[row] if i >= 0],
        d_nearest=float(obs.d_nearest[row]),
        d_front=float(obs.d_front[row]),
        d_behind=float(obs.d_behind[row]),
        acc_front=float(obs.acc_front[row]),
        acc_behind=float(obs.acc_behind[row]),
        closing_speed=float(obs.closing_speed[row]),
    )


def denormalize(state: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Invert the state-vector scaling back to metres, m/s and m/s^2."""
    out = np.asarray(state, dtype=float).copy()
    out[..., 0::3] *= cfg.lane_length
    out[..., 1::3] *= cfg.v_max
    out[..., 2::3] *= cfg.a_max
    return out
