from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from intersection_fl.config import RuleConfig, SimConfig
from intersection_fl.cyber_lane import observe
from intersection_fl.imitation import (Experience, ExperienceBuffer, MixConfig, TrainingCurve, collect_experience,
                                       convergence_step, il_loss, mix, mixed_action, moving_average,
                                       per_sample_loss, train_step)
from intersection_fl.policy import OptimizerState, forward, init_params, zeros_like
from intersection_fl.rules import rule_action
from intersection_fl.sim import Simulation

SIM = SimConfig()
RULES = RuleConfig()


def _zero_model_with_bias(b):
    p = zeros_like(init_params(0)).astype(np.float64)
    p["b3"][0] = np.arctanh(b / 3.0)
    return p


def test_il_loss_examples():
    p = _zero_model_with_bias(0.5)
    assert il_loss(p, np.zeros((1, 18)), [0.2]) == pytest.approx(0.09)
    assert il_loss(p, np.zeros((2, 18)), [0.2, 0.4]) == pytest.approx(0.05)
    assert il_loss(p, np.zeros((3, 18)), [0.5, 0.5, 0.5]) == pytest.approx(0.0, abs=1e-24)
    with pytest.raises(ValueError):
        il_loss(p, np.zeros((0, 18)), [])


@given(st.integers(0, 1000))
def test_il_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    p = init_params(seed).astype(np.float64)
    xs = rng.uniform(-1, 1, (8, 18))
    ys = rng.uniform(-3, 3, 8)
    preds = [oracles.mlp_forward_np(p, x) for x in xs]
    assert oracles.rel_err(il_loss(p, xs, ys), oracles.il_loss(preds, ys)) < 1e-9
    assert il_loss(p, xs, ys) >= 0


def test_buffer_fifo_and_sampling():
    buf = ExperienceBuffer(5, 18, np.random.default_rng(0))
    for k in range(7):
        buf.add(Experience(np.full(18, k, dtype=np.float32), float(k)))
    assert len(buf) == 5
    s, a = buf.sample(5)
    assert sorted(a.tolist()) == [2, 3, 4, 5, 6]  # oldest two evicted, no repeats
    assert np.all(s[:, 0] == a)
    with pytest.raises(ValueError):
        buf.sample(6)
    with pytest.raises(ValueError):
        ExperienceBuffer(0, 18, np.random.default_rng(0))


def test_train_step_skips_when_underfull():
    p = init_params(0)
    opt = OptimizerState.for_params(p)
    buf = ExperienceBuffer(100, 18, np.random.default_rng(0))
    out = train_step(p, opt, buf, 48)
    assert out.skipped and out.params is p


def test_train_step_perfect_fit_leaves_params():
    p = _zero_model_with_bias(0.5).astype(np.float32)
    buf = ExperienceBuffer(100, 18, np.random.default_rng(0))
    buf.add_batch(np.zeros((60, 18)), np.full(60, float(forward(p, np.zeros(18)))))
    out = train_step(p, OptimizerState.for_params(p), buf, 48)
    assert out.loss == 0.0
    assert np.array_equal(out.params.vector, p.vector)


def _fixed_buffer(seed=0, n=2000):
    rng = np.random.default_rng(seed)
    buf = ExperienceBuffer(n, 18, np.random.default_rng(seed))
    xs = rng.uniform(-1, 1, (n, 18))
    buf.add_batch(xs, np.clip(xs[:, 0] * 2 - xs[:, 1], -3, 3))
    return buf


def test_training_on_fixed_buffer_reduces_loss_and_is_deterministic():
    def run():
        p = init_params(1)
        opt = OptimizerState.for_params(p, total_steps=600)
        buf = _fixed_buffer()
        losses = []
        for _ in range(600):
            out = train_step(p, opt, buf)
            p, opt = out.params, out.opt
            losses.append(out.loss)
        return np.array(losses)
    a = run()
    ma = moving_average(a, 100)
    assert ma[-1] < 0.5 * ma[99]
    assert np.array_equal(a, run())


def test_sample_losses_are_post_update():
    p = init_params(2)
    buf = _fixed_buffer(3)
    buf_rng_state = buf.rng.bit_generator.state
    out = train_step(p, OptimizerState.for_params(p), buf)
    buf.rng.bit_generator.state = buf_rng_state
    states, actions = buf.sample(48)
    assert np.allclose(out.sample_losses, per_sample_loss(out.params, states, actions))
    assert out.loss == pytest.approx(il_loss(p, states, actions), rel=1e-5)


def test_mix_examples():
    assert mix(2.0, -1.0, 0.5) == pytest.approx(0.5)
    assert mix(2.0, -1.0, 0.0) == -1.0
    assert mix(2.0, -1.0, 1.0) == 2.0
    assert mix(3.0, 20 / 3, 0.5) == 3.0  # clamped after mixing
    with pytest.raises(ValueError):
        MixConfig(1.5)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1))
def test_mix_linear_in_epsilon(a_nn, a_rule, eps):
    assert mix(a_nn, a_rule, eps) == pytest.approx(eps * a_nn + (1 - eps) * a_rule, abs=1e-12)


def test_mixed_action_degenerate_cases():
    p = init_params(4)
    obs = observe(np.array([0, 1]), np.array([60.0, 64.0]), np.array([10.0, 11.0]), np.zeros(2), SIM)
    nb = obs.rule_inputs()
    s = obs.states[0]
    ri = replace(nb, **{k: getattr(nb, k)[0] for k in ("d_nearest", "closing_speed", "d_front", "d_behind",
                                                       "acc_front", "acc_behind")})
    a_rule = float(np.clip(rule_action(ri, RULES), -3, 3))
    assert mixed_action(p, s, ri, MixConfig(0.0), RULES, SIM) == pytest.approx(a_rule)
    assert mixed_action(p, s, ri, MixConfig(1.0), RULES, SIM) == pytest.approx(float(forward(p, s)))


def test_collect_experience_labels_with_rule():
    sim = Simulation(replace(SIM, arrival_rate_lambda=2100.0), RULES, seed=1)
    for _ in range(100):
        res = sim.step(lambda obs, rule_a: np.zeros(len(obs)))  # executed actions differ from the rule
    exps = collect_experience(res.observation, res.rule_actions, SIM, trainer_id=2, step=100)
    assert len(exps) == len(res.observation) > 0
    expected = np.clip(rule_action(res.observation.rule_inputs(), RULES), -3, 3)
    assert np.allclose([e.action for e in exps], expected)
    assert all(e.origin == (2, 100) for e in exps)
    empty = observe(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), SIM)
    assert collect_experience(empty, np.zeros(0), SIM) == []


def test_moving_average_and_convergence():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    flat = np.full(1000, 0.3)
    assert convergence_step(flat) == 700
    decaying = np.exp(-np.arange(6000) / 500)
    k = convergence_step(decaying)
    ma = moving_average(decaying, 200)
    assert abs(ma[k - 1] - ma[k - 501]) < 1e-4
    assert abs(ma[k - 2] - ma[k - 502]) >= 1e-4
    assert convergence_step(np.linspace(1, 0, 6000)) is None  # drift 0.083 per 500 steps
    assert convergence_step(np.ones(100)) is None


def test_training_curve_csv():
    c = TrainingCurve()
    c.append(1, 0.5, 1e-3)
    assert c.csv() == "step,batch_loss,lr\n1,0.5,0.001\n"
