import math

import numpy as np
import pytest
import torch

from lrtd.dataset import standardize_states
from lrtd.envs import BanditEnv
from lrtd.exceptions import DimensionMismatchError, LRTDError
from lrtd.labeling import Critic, finite_difference_grad
from lrtd.policy import (
    TwoHeadPolicy,
    batch_weights,
    class_balance_weight,
    flat_parameters,
    forward_heads,
    init_policy,
    load_flat_parameters,
    parameter_digest,
    soft_positive_weight,
    timestep_embedding,
    train,
    weighted_eps_loss,
)
from lrtd.sampler import destandardize, sample_batch
from lrtd.schedule import build_schedule
from lrtd.schemas import GateConfig, QComposeConfig, TrainConfig
from lrtd.seeding import make_rng


def test_class_balance_weight_examples():
    assert class_balance_weight(1, 0.5, 1e-12) == pytest.approx(1.0)
    assert class_balance_weight(1, 0.2, 1e-8) == pytest.approx(2.5)
    assert class_balance_weight(0, 0.2, 1e-8) == pytest.approx(0.625)


def test_soft_positive_weight_examples():
    assert soft_positive_weight(0, 5.0, 0.0, 1.0, 3.0) == 1.0
    assert soft_positive_weight(1, 0.3, 0.3, 1.0, 3.0) == 1.0
    assert soft_positive_weight(1, 0.3 + 2 * 0.5, 0.3, 0.5, 3.0) == pytest.approx(3.0)
    assert soft_positive_weight(1, 100.0, 0.0, 1.0, 3.0) == pytest.approx(3.0)


def test_batch_weights_all_background():
    w = batch_weights(np.zeros(8), np.zeros(8), 0.3, TrainConfig())
    assert np.allclose(w, 1.0)


def test_batch_weights_hand_computed():
    labels = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
    w = batch_weights(labels, np.zeros(10), 0.2, TrainConfig(), kappa=0.0)
    assert w.mean() == pytest.approx(1.0)
    assert np.allclose(w[:2], 2.5)
    assert np.allclose(w[2:], 0.625)


def test_balanced_equals_uniform_at_even_rate():
    labels = np.array([1, 0, 1, 0, 0])
    balanced = batch_weights(labels, np.zeros(5), 0.5, TrainConfig(), kappa=0.0)
    uniform = batch_weights(labels, np.zeros(5), 0.5, TrainConfig(weighting="uniform"))
    assert np.allclose(balanced, uniform)


def test_timestep_embedding_shape():
    emb = timestep_embedding(torch.arange(1, 6, dtype=torch.float32), 7)
    assert emb.shape == (5, 7)
    assert torch.all(emb[:, -1] == 0)


def test_zero_weight_network_returns_output_bias():
    policy = TwoHeadPolicy(2, 2, hidden=8, temb_dim=4)
    with torch.no_grad():
        for p in policy.parameters():
            p.zero_()
        policy.head_u[2].bias.copy_(torch.tensor([0.5, -1.0]))
        policy.head_c[2].bias.copy_(torch.tensor([2.0, 0.25]))
    eps_u, eps_c = forward_heads(policy.freeze(), np.zeros(2), np.ones(2), 3)
    assert np.allclose(eps_u, [0.5, -1.0])
    assert np.allclose(eps_c, [2.0, 0.25])


def test_forward_heads_batches(policy):
    eps_u, eps_c = forward_heads(policy, np.zeros((4, 2)), np.ones((4, 2)), 5)
    assert eps_u.shape == eps_c.shape == (4, 2)
    single_u, _ = forward_heads(policy, np.zeros(2), np.ones(2), 5)
    assert np.allclose(single_u, eps_u[0], atol=1e-6)


def test_forward_heads_checks(policy):
    with pytest.raises(DimensionMismatchError):
        forward_heads(policy, np.zeros(3), np.zeros(2), 1)
    with pytest.raises(DimensionMismatchError):
        forward_heads(policy, np.zeros((3, 2)), np.zeros((2, 2)), 1)
    with pytest.raises(LRTDError):
        forward_heads(None, np.zeros(2), np.zeros(2), 1)


def test_zero_epochs_returns_initial_weights(bandit_labeled):
    cfg = TrainConfig(epochs=0, hidden=16, temb_dim=8)
    init = init_policy(2, 2, cfg)
    trained = train(init, bandit_labeled, build_schedule(10, 1e-4, 2e-2), cfg)
    assert trained.frozen
    assert parameter_digest(trained) == parameter_digest(init)
    assert trained.train_history == []


def test_training_runs_and_freezes(bandit_labeled):
    cfg = TrainConfig(epochs=2, batch_size=64, hidden=16, temb_dim=8)
    trained = train(init_policy(2, 2, cfg), bandit_labeled, build_schedule(10, 1e-4, 2e-2), cfg)
    assert trained.frozen
    assert len(trained.train_history) == 2
    assert all(np.isfinite(trained.train_history))
    assert not any(p.requires_grad for p in trained.parameters())


def test_training_is_seeded(bandit_labeled):
    cfg = TrainConfig(epochs=1, batch_size=64, hidden=16, temb_dim=8)
    sched = build_schedule(10, 1e-4, 2e-2)
    a = train(init_policy(2, 2, cfg), bandit_labeled, sched, cfg)
    b = train(init_policy(2, 2, cfg), bandit_labeled, sched, cfg)
    assert parameter_digest(a) == parameter_digest(b)


def test_training_requires_labels(bandit_raw):
    cfg = TrainConfig(epochs=1)
    with pytest.raises(LRTDError):
        train(init_policy(2, 2, cfg), bandit_raw, build_schedule(10, 1e-4, 2e-2), cfg)


def test_flat_parameters_reload(policy):
    flat = flat_parameters(policy)
    assert flat.dtype == np.dtype("<f4")
    fresh = TwoHeadPolicy(2, 2, hidden=16, n_layers=2, temb_dim=8)
    load_flat_parameters(fresh, flat)
    assert parameter_digest(fresh) == parameter_digest(policy)
    with pytest.raises(DimensionMismatchError):
        load_flat_parameters(fresh, flat[:-1])


def test_training_loss_gradient_matches_finite_differences():
    torch.manual_seed(1)
    policy = TwoHeadPolicy(2, 2, hidden=8, temb_dim=4).double()
    sched = build_schedule(10, 1e-4, 2e-2)
    rng = np.random.default_rng(0)
    s = torch.as_tensor(rng.standard_normal((5, 2)))
    a0 = torch.as_tensor(rng.standard_normal((5, 2)))
    eps = torch.as_tensor(rng.standard_normal((5, 2)))
    labels = np.array([1, 0, 1, 0, 0])
    advs = np.array([0.5, -0.2, 1.5, 0.0, -1.0])
    t = np.array([1, 3, 5, 7, 10])
    cfg = TrainConfig(tau_A=0.5)

    def loss():
        return weighted_eps_loss(policy, sched, s, a0, labels, advs, t, eps, 0.4, cfg, kappa=0.5)

    policy.zero_grad()
    loss().backward()
    h = 1e-4
    for param in (policy.backbone[0].weight, policy.head_c[2].bias, policy.head_u[0].weight):
        grad = param.grad.reshape(-1).clone()
        flat = param.data.reshape(-1)
        for i in range(min(4, flat.numel())):
            old = float(flat[i])
            with torch.no_grad():
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
            assert float(grad[i]) == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-6)


def test_critic_gradient_matches_finite_differences():
    torch.manual_seed(2)
    critic = Critic(2, 2, hidden=8).double()
    rng = np.random.default_rng(1)
    s, a = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    analytic = critic.grad_a(s, a)
    numeric = finite_difference_grad(critic.q_value, s, a, 1e-4)
    assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def test_forward_heads_accepts_reversed_views(policy):
    rng = np.random.default_rng(4)
    s, a = rng.standard_normal((4, 2)), np.arange(8.0).reshape(4, 2)
    eps_u, eps_c = forward_heads(policy, s[::-1], a[::-1], 3)
    ref_u, ref_c = forward_heads(policy, s.copy(), a.copy(), 3)
    assert np.allclose(eps_u, ref_u[::-1], atol=1e-6)
    assert np.allclose(eps_c, ref_c[::-1], atol=1e-6)
    flipped_u, _ = forward_heads(policy, s[:, ::-1], a[:, ::-1], 3)
    assert flipped_u.shape == (4, 2)


def test_critic_accepts_reversed_views():
    torch.manual_seed(2)
    critic = Critic(2, 2, hidden=8)
    rng = np.random.default_rng(5)
    s, a = rng.standard_normal((6, 2)), rng.standard_normal((6, 2))
    assert np.allclose(critic.q_value(s[::-1], a[::-1]), critic.q_value(s, a)[::-1], atol=1e-6)
    assert np.allclose(critic.grad_a(s[::-1], a[::-1]), critic.grad_a(s, a)[::-1], atol=1e-6)


def test_forward_heads_jacobian_matches_finite_differences():
    torch.manual_seed(3)
    policy = TwoHeadPolicy(2, 2, hidden=8, temb_dim=4).double().freeze()
    rng = np.random.default_rng(6)
    s, a, t = rng.standard_normal(2), rng.standard_normal(2), 4
    st = torch.as_tensor(s).reshape(1, 2)
    tt = torch.full((1,), float(t), dtype=torch.float64)

    def heads(x):
        eps_u, eps_c = policy(st, x.reshape(1, 2), tt)
        return torch.cat([eps_u, eps_c], dim=-1).reshape(-1)

    analytic = torch.autograd.functional.jacobian(heads, torch.as_tensor(a)).numpy()
    h = 1e-4
    numeric = np.zeros((4, 2))
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        up = np.concatenate(forward_heads(policy, s, a + step, t))
        down = np.concatenate(forward_heads(policy, s, a - step, t))
        numeric[:, j] = (up - down) / (2 * h)
    assert np.allclose(numeric, analytic, rtol=1e-4, atol=1e-8)


def test_loss_decreases_on_fixed_batch(bandit_labeled):
    torch.manual_seed(0)
    policy = TwoHeadPolicy(2, 2)
    sched = build_schedule(50, 1e-4, 2e-2)
    rng = np.random.default_rng(7)
    rows = np.arange(64)
    s = torch.as_tensor(bandit_labeled.states[rows], dtype=torch.float32)
    a0 = torch.as_tensor(bandit_labeled.actions[rows], dtype=torch.float32)
    labels = bandit_labeled.labels[rows].astype(np.int64)
    advs = bandit_labeled.advantages[rows]
    t = rng.integers(1, sched.T + 1, size=rows.size)
    eps = torch.as_tensor(rng.standard_normal((rows.size, 2)), dtype=torch.float32)
    cfg = TrainConfig()
    optimizer = torch.optim.Adam(policy.parameters(), lr=1e-3)
    losses = []
    for _ in range(10):
        loss = weighted_eps_loss(policy, sched, s, a0, labels, advs, t, eps, 0.2, cfg, kappa=bandit_labeled.meta.kappa)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    assert losses[-1] < losses[0]


def test_even_balanced_weights_follow_uniform_trajectory(bandit_labeled):
    n = bandit_labeled.n
    dataset = bandit_labeled.with_labels(np.zeros(n), (np.arange(n) % 2).astype(np.uint8), 0.0, 0.5)
    sched = build_schedule(10, 1e-4, 2e-2)
    common = dict(epochs=2, batch_size=64, hidden=16, temb_dim=8, rho_init=0.5, ema_decay=1.0)
    uniform_cfg = TrainConfig(weighting="uniform", **common)
    balanced_cfg = TrainConfig(weighting="balanced", **common)
    uniform = train(init_policy(2, 2, uniform_cfg), dataset, sched, uniform_cfg)
    balanced = train(init_policy(2, 2, balanced_cfg), dataset, sched, balanced_cfg)
    assert np.allclose(flat_parameters(uniform), flat_parameters(balanced), atol=1e-6)
    assert np.allclose(uniform.train_history, balanced.train_history, rtol=1e-6)


@pytest.mark.slow
def test_conditional_endpoint_closer_to_good_mode(trained_bandit):
    tb = trained_bandit
    env = BanditEnv()
    stats = tb.dataset.stats
    s_env = env.reset(make_rng(0, "held-out"), 500)
    s_std = standardize_states(s_env, stats)
    noise = make_rng(0, "held-out-noise").standard_normal((500, tb.sched.T + 1, 2))
    hard = GateConfig(beta_max=1.0, gate_kind="hard")
    a_c, _ = sample_batch(tb.policy, tb.sched, hard, QComposeConfig(), -math.inf, s_std, noise)
    a_u, _ = sample_batch(tb.policy, tb.sched, hard, QComposeConfig(), math.inf, s_std, noise)
    dist_c = np.linalg.norm(destandardize(a_c, stats) - env.mode(s_env), axis=-1)
    dist_u = np.linalg.norm(destandardize(a_u, stats) - env.mode(s_env), axis=-1)
    assert dist_c.mean() < dist_u.mean()
