import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrtd.calibration import (
    calibrate_tau,
    critic_identity,
    dkw_budget,
    dkw_epsilon,
    empirical_quantile,
    ensure_fingerprint,
    live_fingerprint,
    realized_type1,
    run_h0_chains,
    sampler_fingerprint,
    tau_settled,
)
from lrtd.exceptions import FingerprintMismatchError, InvalidRangeError
from lrtd.labeling import CorruptedCritic
from lrtd.schedule import build_schedule
from lrtd.schemas import GateConfig, QComposeConfig
from lrtd.seeding import draw_chain_inputs


def test_empirical_quantile_examples():
    data = [5, 3, 1, 4, 2]
    assert empirical_quantile(data, 0.8) == 4
    assert empirical_quantile(data, 1.0) == 5
    assert empirical_quantile(data, 0.0) == 1
    with pytest.raises(InvalidRangeError):
        empirical_quantile([], 0.5)
    with pytest.raises(InvalidRangeError):
        empirical_quantile(data, 1.5)


@settings(max_examples=100, deadline=None)
@given(
    data=st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=200),
    level=st.floats(min_value=0.0, max_value=1.0),
)
def test_empirical_quantile_is_smallest_covering_value(data, level):
    x = np.asarray(data)
    q = empirical_quantile(x, level)
    assert np.mean(x <= q) >= level - 1e-9
    smaller = x[x < q]
    if smaller.size:
        assert np.mean(x <= smaller.max()) < level + 1e-9


def test_dkw_epsilon_examples():
    assert dkw_epsilon(5000, 0.05) == pytest.approx(0.01921, abs=1e-5)
    assert dkw_epsilon(4000, 0.05) == pytest.approx(2 * dkw_epsilon(16000, 0.05))
    with pytest.raises(InvalidRangeError):
        dkw_epsilon(100, 2.0)
    with pytest.raises(InvalidRangeError):
        dkw_epsilon(0, 0.05)


def test_dkw_budget_examples():
    assert dkw_budget(0.01, 0.05) == 18445
    assert dkw_budget(0.1, 0.05) == 185
    with pytest.raises(InvalidRangeError):
        dkw_budget(0.0, 0.05)


@settings(max_examples=100, deadline=None)
@given(eps=st.floats(min_value=1e-3, max_value=0.5), zeta=st.floats(min_value=1e-4, max_value=0.5))
def test_dkw_budget_is_minimal(eps, zeta):
    n = dkw_budget(eps, zeta)
    assert dkw_epsilon(n, zeta) <= eps + 1e-12
    if n > 1:
        assert dkw_epsilon(n - 1, zeta) > eps - 1e-12


def test_chain_inputs_are_reproducible_per_chain():
    idx_a, noise_a = draw_chain_inputs(0, "calibration", 1, 5, 10, 4, 2)
    idx_b, noise_b = draw_chain_inputs(0, "calibration", 1, 8, 10, 4, 2)
    assert np.array_equal(idx_a, idx_b[:5])
    assert np.array_equal(noise_a, noise_b[:5])
    _, noise_c = draw_chain_inputs(0, "type1", 1, 5, 10, 4, 2)
    assert not np.array_equal(noise_a, noise_c)


def test_fingerprint_tracks_sampler_configuration(policy, sched):
    base = live_fingerprint(policy, sched, GateConfig(), QComposeConfig())
    assert base == live_fingerprint(policy, sched, GateConfig(), QComposeConfig())
    assert base != live_fingerprint(policy, sched, GateConfig(beta_max=0.5), QComposeConfig())
    assert base != live_fingerprint(policy, build_schedule(12, 1e-4, 2e-2), GateConfig(), QComposeConfig())
    # critic step settings only count when the step is enabled
    assert base == live_fingerprint(policy, sched, GateConfig(), QComposeConfig(lambda_max=0.7))
    assert sampler_fingerprint("p", sched, GateConfig(), QComposeConfig(enabled=True), "a") != sampler_fingerprint(
        "p", sched, GateConfig(), QComposeConfig(enabled=True), "b"
    )


def test_critic_identity(oracle):
    assert critic_identity(None) is None
    assert critic_identity(oracle) == "OracleCritic"
    corrupted = CorruptedCritic(oracle, 0.5, oracle.env.in_support, oracle.stats)
    assert critic_identity(corrupted) == "CorruptedCritic:0.5:OracleCritic"


def test_calibration_result_properties(policy, sched, states):
    result = calibrate_tau(policy, sched, GateConfig(), QComposeConfig(), states, 0.1, 200, K=3, seed=0)
    assert math.isfinite(result.tau_hat)
    assert len(result.tau_history) == 3
    assert result.tau_history[-1] == result.tau_hat
    assert len(result.h0_llrs) == 200
    assert np.mean(result.llrs <= result.tau_hat) >= 0.9
    assert result.dkw_epsilon == pytest.approx(dkw_epsilon(200, 0.05))
    ensure_fingerprint(result, live_fingerprint(policy, sched, GateConfig(), QComposeConfig()))
    with pytest.raises(FingerprintMismatchError):
        ensure_fingerprint(result, live_fingerprint(policy, sched, GateConfig(delta=0.5), QComposeConfig()))


def test_calibration_is_deterministic(policy, sched, states):
    a = calibrate_tau(policy, sched, GateConfig(), QComposeConfig(), states, 0.2, 150, K=2, seed=3)
    b = calibrate_tau(policy, sched, GateConfig(), QComposeConfig(), states, 0.2, 150, K=2, seed=3)
    assert a.tau_hat == b.tau_hat
    assert a.tau_history == b.tau_history


def test_first_iteration_runs_closed_gate(policy, sched, states):
    result = calibrate_tau(policy, sched, GateConfig(), QComposeConfig(), states, 0.1, 200, K=1, seed=0)
    _, trace = run_h0_chains(policy, sched, GateConfig(), QComposeConfig(), math.inf, states, 200, 0, "calibration", 1)
    assert result.tau_hat == empirical_quantile(trace.llr_cum, 0.9)


@pytest.mark.parametrize("kwargs", [{"alpha": 0.0}, {"alpha": 1.0}, {"n": 50}, {"K": 0}, {"momentum": 1.0}])
def test_calibration_argument_checks(policy, sched, states, kwargs):
    args = {"alpha": 0.1, "n": 200, "K": 2, "momentum": 0.5}
    args.update(kwargs)
    with pytest.raises(InvalidRangeError):
        calibrate_tau(policy, sched, GateConfig(), QComposeConfig(), states, **args)


def test_realized_type1_infinite_thresholds(policy, sched, states):
    assert realized_type1(policy, sched, GateConfig(), QComposeConfig(), math.inf, states, 10) == 0.0
    assert realized_type1(policy, sched, GateConfig(), QComposeConfig(), -math.inf, states, 10) == 1.0


def test_realized_type1_within_dkw_band(policy, sched, states):
    # without gate feedback the calibrated quantile is exact up to sampling error
    gcfg = GateConfig(beta_max=0.0)
    alpha, n, m = 0.1, 2000, 2000
    result = calibrate_tau(policy, sched, gcfg, QComposeConfig(), states, alpha, n, K=2, seed=0)
    rate = realized_type1(policy, sched, gcfg, QComposeConfig(), result.tau_hat, states, m, seed=0)
    margin = dkw_epsilon(n, 0.05) + dkw_epsilon(m, 0.05)
    assert alpha - margin <= rate <= alpha + margin


def test_tau_settled_on_converging_history():
    llrs = np.random.default_rng(0).standard_normal(1000)
    assert tau_settled([0.5, 1.2, 1.25, 1.27, 1.28, 1.28], llrs)
    assert tau_settled([3.0], llrs)


def test_tau_settled_rejects_oscillation_with_matching_last_pair():
    llrs = np.random.default_rng(0).standard_normal(1000)
    assert not tau_settled([1e7, -1e7, 1e7, -1e7, 1.28, 1.28], llrs)
    assert not tau_settled([1.0, 2.0, 3.0, 4.0], llrs)
    assert not tau_settled([1.0, math.inf], llrs)


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.2, 0.1, 0.05])
def test_realized_type1_on_trained_policy(trained_bandit, alpha):
    tb = trained_bandit
    gcfg, qcfg = tb.cfg.gate, tb.cfg.q_compose
    n = m = 3000
    result = calibrate_tau(tb.policy, tb.sched, gcfg, qcfg, tb.states_cal, alpha, n, seed=tb.cfg.seed)
    assert math.isfinite(result.tau_hat)
    rate = realized_type1(tb.policy, tb.sched, gcfg, qcfg, result.tau_hat, tb.states_cal, m, seed=tb.cfg.seed)
    assert abs(rate - alpha) <= 0.03
