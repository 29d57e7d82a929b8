import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from conftest import shared_noise
from lrtd.exceptions import DimensionMismatchError, FormatError, InvalidRangeError, LRTDError
from lrtd.policy import forward_heads
from lrtd.sampler import (
    SamplerSetup,
    clip_norm,
    destandardize,
    displacement_limit,
    gate_hard,
    gate_soft,
    lambda_schedule,
    llr_step,
    q_compose,
    reverse_step,
    sample_action,
    sample_batch,
    trace_rows,
)
from lrtd.schedule import mean_from_eps
from lrtd.schemas import GateConfig, QComposeConfig, StandardizationStats
from lrtd.seeding import make_rng

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


class ConstantGradCritic:
    def __init__(self, g):
        self.g = np.asarray(g, dtype=float)

    def q_value(self, s, a):
        return np.atleast_2d(a) @ self.g

    def grad_a(self, s, a):
        return np.broadcast_to(self.g, np.atleast_2d(a).shape).copy()


def test_llr_step_example_matches_log_densities():
    value = llr_step(np.array([1.0]), np.array([0.0]), np.array([1.0]), 1.0)
    oracle = multivariate_normal(mean=[1.0], cov=1.0).logpdf([1.0]) - multivariate_normal(mean=[0.0], cov=1.0).logpdf([1.0])
    assert value == pytest.approx(0.5)
    assert value == pytest.approx(oracle)


@settings(max_examples=100, deadline=None)
@given(a=st.lists(finite, min_size=2, max_size=2), mu=st.lists(finite, min_size=2, max_size=2), s2=st.floats(min_value=1e-3, max_value=10))
def test_llr_step_identical_hypotheses(a, mu, s2):
    assert llr_step(np.array(a), np.array(mu), np.array(mu), s2) == 0.0


@settings(max_examples=100, deadline=None)
@given(mu_u=st.lists(finite, min_size=2, max_size=2), mu_c=st.lists(finite, min_size=2, max_size=2))
def test_llr_step_zero_at_midpoint(mu_u, mu_c):
    mu_u, mu_c = np.array(mu_u), np.array(mu_c)
    assert llr_step((mu_u + mu_c) / 2, mu_u, mu_c, 1.0) == pytest.approx(0.0, abs=1e-9)


def test_llr_step_checks():
    with pytest.raises(DimensionMismatchError):
        llr_step(np.zeros(2), np.zeros(3), np.zeros(2), 1.0)
    with pytest.raises(InvalidRangeError):
        llr_step(np.zeros(2), np.zeros(2), np.zeros(2), 0.0)


def test_soft_gate_examples():
    assert gate_soft(1.5, 1.5, 0.3, 0.8) == pytest.approx(0.4)
    assert gate_soft(1.5 + 0.3 * math.log(3), 1.5, 0.3, 0.8) == pytest.approx(0.6)
    assert gate_soft(100.0, math.inf, 1.0, 1.0) == 0.0
    with pytest.raises(InvalidRangeError):
        gate_soft(0.0, 0.0, 0.0, 1.0)


def test_hard_gate_examples():
    assert gate_hard(2.0, 2.0, 0.7) == 0.7
    assert gate_hard(2.0 - 1e-9, 2.0, 0.7) == 0.0
    assert gate_hard(5.0, 2.0, 0.0) == 0.0
    assert gate_hard(-1e300, -math.inf, 1.0) == 1.0


@settings(max_examples=100, deadline=None)
@given(l1=finite, l2=finite, tau=finite, delta=st.floats(min_value=0.1, max_value=10), beta_max=st.floats(min_value=0.01, max_value=1))
def test_soft_gate_monotone_and_bounded(l1, l2, tau, delta, beta_max):
    lo, hi = sorted([l1, l2])
    g_lo, g_hi = gate_soft(lo, tau, delta, beta_max), gate_soft(hi, tau, delta, beta_max)
    assert 0.0 <= g_lo <= g_hi <= beta_max
    assert gate_soft(lo, tau + 1.0, delta, beta_max) <= g_lo


@settings(max_examples=100, deadline=None)
@given(llr=finite, tau=finite)
def test_soft_gate_approaches_hard(llr, tau):
    if abs(llr - tau) < 1e-2:
        return
    assert gate_soft(llr, tau, 1e-4, 1.0) == pytest.approx(gate_hard(llr, tau, 1.0), abs=1e-12)


def test_clip_norm():
    g = np.array([[6.0, 8.0], [0.3, 0.4]])
    clipped = clip_norm(g, 1.0)
    assert np.linalg.norm(clipped[0]) == pytest.approx(1.0)
    assert np.allclose(clipped[1], g[1])
    assert np.allclose(clip_norm(np.zeros((1, 2)), 1.0), 0.0)


def test_q_compose_examples():
    a = np.array([0.2, -0.1])
    critic = ConstantGradCritic([6.0, 8.0])
    assert np.array_equal(q_compose(a, np.zeros(2), critic, 0.0, 0.5, a, 1.0), a)
    moved = q_compose(a, np.zeros(2), critic, 0.3, 0.5, a, 1.0)
    assert np.linalg.norm(moved - a) == pytest.approx(0.3 * 0.5 * 1.0)


def test_lambda_schedule(sched):
    qcfg = QComposeConfig(enabled=True, lambda_max=0.2)
    assert lambda_schedule(sched, qcfg, sched.T) == pytest.approx(0.2)
    assert lambda_schedule(sched, qcfg, 1) == 0.0
    values = [lambda_schedule(sched, qcfg, t) for t in range(1, sched.T + 1)]
    assert all(0.0 <= v <= 0.2 for v in values)


def test_closed_gate_step_is_unconditional_ddpm(policy, sched):
    s = np.zeros((3, 2))
    a_t = make_rng(1).standard_normal((3, 2))
    z = make_rng(2).standard_normal((3, 2))
    t = 5
    a_prev, llr, rec = reverse_step(
        policy, sched, GateConfig(beta_max=0.0), QComposeConfig(), 0.0, s, a_t, t, np.zeros(3), z=z
    )
    eps_u, _ = forward_heads(policy, s, a_t, t)
    expected = mean_from_eps(sched, t, a_t, eps_u) + math.sqrt(sched.sigma2(t)) * z
    assert np.allclose(a_prev, expected)
    assert np.allclose(rec.beta, 0.0)
    assert np.allclose(llr, rec.dllr)


def test_last_step_has_no_noise(policy, sched):
    s = np.zeros((2, 2))
    a1 = np.ones((2, 2))
    out_a, _, _ = reverse_step(policy, sched, GateConfig(), QComposeConfig(), 0.0, s, a1, 1, np.zeros(2), rng=make_rng(0))
    out_b, _, _ = reverse_step(policy, sched, GateConfig(), QComposeConfig(), 0.0, s, a1, 1, np.zeros(2), rng=make_rng(9))
    assert np.array_equal(out_a, out_b)


def test_reverse_step_needs_noise_source(policy, sched):
    with pytest.raises(LRTDError):
        reverse_step(policy, sched, GateConfig(), QComposeConfig(), 0.0, np.zeros(2), np.zeros(2), 3, 0.0)


def test_q_compose_needs_critic(policy, sched):
    with pytest.raises(LRTDError) as exc:
        reverse_step(
            policy, sched, GateConfig(), QComposeConfig(enabled=True), 0.0,
            np.zeros(2), np.zeros(2), 3, 0.0, rng=make_rng(0),
        )
    assert exc.value.exit_code == 2


def test_infinite_threshold_matches_unconditional_chain(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    closed, trace_closed = sample_batch(policy, sched, GateConfig(gate_kind="soft"), QComposeConfig(), math.inf, states, noise)
    uncond, trace_uncond = sample_batch(policy, sched, GateConfig(beta_max=0.0), QComposeConfig(), math.inf, states, noise)
    assert np.array_equal(closed, uncond)
    assert np.array_equal(trace_closed.llr_cum, trace_uncond.llr_cum)


def test_identical_heads_give_zero_evidence(policy, sched, states):
    with torch.no_grad():
        policy.head_c.load_state_dict(policy.head_u.state_dict())
    noise = shared_noise(states.shape[0], sched.T)
    _, trace = sample_batch(policy, sched, GateConfig(), QComposeConfig(), 0.0, states, noise)
    assert np.all(trace.llr_cum == 0.0)
    assert np.all(trace.dmu_norm == 0.0)


def test_trace_layout(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    a0, trace = sample_batch(policy, sched, GateConfig(), QComposeConfig(), 0.5, states, noise)
    assert a0.shape == (states.shape[0], 2)
    assert trace.t.tolist() == list(range(sched.T, 0, -1))
    assert trace.llr_path.shape == (sched.T, states.shape[0])
    assert np.allclose(trace.llr_path[-1], trace.dllr.sum(axis=0))
    assert trace.n_chains == states.shape[0]
    rows = trace_rows(trace)
    assert len(rows) == sched.T * states.shape[0]
    assert set(rows[0]) == {"chain", "t", "beta", "dllr", "llr_cum", "dmu_norm"}


def test_gate_window_restricts_gating(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    gcfg = GateConfig(gate_kind="hard", beta_max=0.6, gate_window=(1, 3))
    _, trace = sample_batch(policy, sched, gcfg, QComposeConfig(), -math.inf, states, noise)
    for rec in trace.steps:
        assert np.allclose(rec.beta, 0.6 if rec.t <= 3 else 0.0)
    with pytest.raises(InvalidRangeError):
        sample_batch(policy, sched, GateConfig(gate_window=(1, sched.T + 1)), QComposeConfig(), 0.0, states, noise)


def test_noise_shape_checked(policy, sched, states):
    with pytest.raises(DimensionMismatchError):
        sample_batch(policy, sched, GateConfig(), QComposeConfig(), 0.0, states, shared_noise(states.shape[0], sched.T - 1))


@pytest.mark.parametrize("center", ["unconditional", "lrt", "blend"])
def test_displacement_stays_within_bound(policy, sched, states, center):
    gcfg = GateConfig(gate_kind="hard", beta_max=0.9)
    qcfg = QComposeConfig(enabled=True, lambda_max=0.5, grad_clip=2.0, center=center)
    noise = shared_noise(states.shape[0], sched.T)
    _, trace = sample_batch(policy, sched, gcfg, qcfg, -math.inf, states, noise, ConstantGradCritic([3.0, 4.0]))
    for rec, disp in zip(trace.steps, trace.displacement):
        limit = displacement_limit(gcfg, qcfg, rec.dmu_norm, rec.sigma2)
        assert np.all(disp <= limit * (1 + 1e-9) + 1e-15)


def test_dmu_clamp_limits_shift(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    _, trace = sample_batch(policy, sched, GateConfig(dmu_clamp=0.01), QComposeConfig(), 0.0, states, noise)
    assert np.all(trace.dmu_norm <= 0.01 + 1e-12)


def test_llr_taken_before_composition_by_default(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    critic = ConstantGradCritic([1.0, 0.0])
    qcfg = QComposeConfig(enabled=True, lambda_max=0.5)
    _, gated = sample_batch(policy, sched, GateConfig(beta_max=0.0), qcfg, 0.0, states, noise, critic)
    _, plain = sample_batch(policy, sched, GateConfig(beta_max=0.0), QComposeConfig(), 0.0, states, noise)
    assert np.allclose(gated.steps[0].dllr, plain.steps[0].dllr)


def test_sample_action_single_state(policy, sched):
    a0, trace = sample_action(policy, sched, GateConfig(), QComposeConfig(), 0.0, np.zeros(2), make_rng(0))
    assert a0.shape == (2,)
    assert trace.n_chains == 1


def test_sampler_setup_matches_sample_batch(policy, sched, states):
    noise = shared_noise(states.shape[0], sched.T)
    setup = SamplerSetup("lrt", GateConfig(), QComposeConfig(), 0.3)
    a_setup, _ = setup.run(policy, sched, states, noise)
    a_direct, _ = sample_batch(policy, sched, GateConfig(), QComposeConfig(), 0.3, states, noise)
    assert np.array_equal(a_setup, a_direct)


def test_destandardize():
    stats = StandardizationStats(
        state_mean=[0.0], state_std=[1.0], action_mean=[0.0, 0.0], action_std=[1.0, 1.0],
        action_low=[-1.0, -1.0], action_high=[1.0, 1.0],
    )
    assert np.allclose(destandardize(np.array([0.5, -0.25]), stats), [0.5, -0.25])
    assert np.allclose(destandardize(np.array([1e6, -1e6]), stats), [1.0, -1.0])
    with pytest.raises(FormatError):
        destandardize(np.zeros(2), None)
