import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from intersection_fl.config import SimConfig
from intersection_fl.cyber_lane import denormalize, nearest_neighbors, observe, project, state_size

CFG = SimConfig()
L = CFG.lane_length


def _nn(xs, ego, v=None, a=None, ids=None, lanes=None):
    ids = list(range(len(xs))) if ids is None else ids
    lanes = [0] * len(xs) if lanes is None else lanes
    v = {i: 10.0 for i in ids} if v is None else v
    a = {i: 0.0 for i in ids} if a is None else a
    return nearest_neighbors(project(ids, xs, lanes), ego, v, a, CFG)


def test_projection_order_and_ties():
    proj = project([7, 3], [40.0, 30.0], [1, 0])
    assert [p.vehicle_id for p in proj] == [3, 7]
    assert [p.cyber_pos for p in proj] == [30.0, 40.0]
    proj = project([9, 4, 6], [20.0, 20.0, 10.0], [0, 1, 2])
    assert [p.vehicle_id for p in proj] == [6, 4, 9]
    assert len(project([1], [5.0], [2])) == 1


def test_lone_ego_gets_sentinels():
    nb = _nn([80.0], 0)
    assert nb.neighbor_ids == []
    assert nb.d_front == L and nb.d_behind == L and nb.d_nearest == L
    assert len(nb.state) == 18
    assert np.allclose(nb.state[3::3], 1.0)  # L / L
    assert np.allclose(nb.state[4::3], 0.0)
    assert np.allclose(nb.state[5::3], 0.0)


def test_hand_computed_gaps():
    nb = _nn([50.0, 48.0, 55.0], 0, v={0: 10.0, 1: 8.0, 2: 12.0}, a={0: 0.0, 1: -1.0, 2: 2.0})
    assert nb.d_front == 2.0
    assert nb.d_behind == 5.0
    assert nb.d_nearest == 2.0
    assert nb.acc_front == -1.0 and nb.acc_behind == 2.0
    assert nb.closing_speed == pytest.approx(2.0)  # ego 10 catching the 8 m/s vehicle ahead
    assert nb.neighbor_ids == [1, 2]


def test_seven_vehicles_keep_five_nearest():
    xs = [50.0, 51.0, 47.0, 56.0, 44.0, 60.0, 30.0]
    nb = _nn(xs, 0)
    assert sorted(nb.neighbor_ids) == [1, 2, 3, 4, 5]


def test_missing_ego_raises():
    with pytest.raises(KeyError):
        _nn([10.0, 20.0], 5)


def test_denormalize_inverts_scaling():
    nb = _nn([50.0, 48.0, 55.0], 0, v={0: 10.0, 1: 8.0, 2: 12.0}, a={0: 0.5, 1: -1.0, 2: 2.0})
    raw = denormalize(nb.state, CFG)
    assert raw[:3] == pytest.approx([50.0, 10.0, 0.5], rel=1e-6)
    assert raw[3:6] == pytest.approx([-2.0, 8.0, -1.0], rel=1e-6)
    assert raw[6:9] == pytest.approx([5.0, 12.0, 2.0], rel=1e-6)


def _brute(xs, ids, ego_row, n=5):
    others = [(abs(xs[j] - xs[ego_row]), ids[j], j) for j in range(len(xs)) if j != ego_row]
    return [j for _, _, j in sorted(others)[:n]]


vehicles = st.lists(st.floats(min_value=-1.0, max_value=150.0, allow_nan=False), min_size=1, max_size=40)


@given(vehicles, st.randoms(use_true_random=False))
def test_observe_matches_brute_force(xs, rnd):
    n = len(xs)
    ids = list(range(100, 100 + n))
    rnd.shuffle(ids)
    rng = np.random.default_rng(n)
    v = rng.uniform(6, 13, n)
    a = rng.uniform(-3, 3, n)
    xs = np.asarray(xs)
    obs = observe(np.array(ids), xs, v, a, CFG)
    assert obs.states.shape == (n, state_size())
    for r in range(n):
        picked = _brute(list(xs), ids, r)
        assert list(obs.neighbor_ids[r][: len(picked)]) == [ids[j] for j in picked]
        assert np.all(obs.neighbor_ids[r][len(picked):] == -1)
        ahead = [xs[j] for j in range(n) if j != r and (xs[j], ids[j]) < (xs[r], ids[r])]
        behind = [xs[j] for j in range(n) if j != r and (xs[j], ids[j]) > (xs[r], ids[r])]
        d_f = xs[r] - max(ahead) if ahead else L
        d_b = min(behind) - xs[r] if behind else L
        assert obs.d_front[r] == pytest.approx(d_f)
        assert obs.d_behind[r] == pytest.approx(d_b)
        if ahead and behind:
            assert obs.d_nearest[r] == pytest.approx(min(d_f, d_b))


@given(vehicles, st.randoms(use_true_random=False))
def test_observe_permutation_invariant(xs, rnd):
    n = len(xs)
    ids = np.arange(n)
    v = np.linspace(6, 13, n)
    a = np.linspace(-3, 3, n)
    x = np.asarray(xs)
    base = observe(ids, x, v, a, CFG)
    perm = list(range(n))
    rnd.shuffle(perm)
    perm = np.array(perm)
    other = observe(ids[perm], x[perm], v[perm], a[perm], CFG)
    inv = np.argsort(perm)
    assert np.array_equal(other.states[inv], base.states)
    assert np.array_equal(other.neighbor_ids[inv], base.neighbor_ids)


@given(st.integers(1, 60))
def test_state_size_constant(n):
    x = np.linspace(0, 150, n)
    obs = observe(np.arange(n), x, np.full(n, 10.0), np.zeros(n), CFG)
    assert obs.states.shape == (n, 18)
    assert np.all(np.abs(obs.states) <= 1.0 + 1e-6)
