"""Expectile critic, advantages and global top-p good/background labels."""

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .dataset import OfflineDataset, destandardize_array
from .exceptions import InvalidRangeError, LRTDError, TrainingDivergedError
from .policy import mlp
from .schemas import CriticConfig, StandardizationStats
from .seeding import make_rng

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


def expectile_loss(diff: torch.Tensor, expectile: float) -> torch.Tensor:
    """Asymmetric squared loss |tau - 1(u < 0)| u^2, averaged."""
    weight = torch.abs(expectile - (diff < 0).to(diff.dtype))
    return (weight * diff ** 2).mean()


def expectile_value(samples, expectile: float, iters: int = 200) -> float:
    """Exact expectile of a finite sample (fixed point of the weighted mean)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    v = float(x.mean())
    for _ in range(iters):
        w = np.where(x < v, 1.0 - expectile, expectile)
        new = float((w * x).sum() / w.sum())
        if abs(new - v) < 1e-14:
            break
        v = new
    return v


class Critic(nn.Module):
    """Q(s, a) and V(s) networks on standardized inputs."""

    def __init__(self, d_s: int, d_a: int, hidden: int = 64, gamma: float = 0.99, expectile: float = 0.7):
        super().__init__()
        self.d_s, self.d_a, self.hidden = d_s, d_a, hidden
        self.gamma, self.expectile = gamma, expectile
        self.q_net = mlp(d_s + d_a, hidden, 2, 1)
        self.v_net = mlp(d_s, hidden, 2, 1)

    def _q(self, s: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
        return self.q_net(torch.cat([s, a], dim=-1)).squeeze(-1)

    def _v(self, s: torch.Tensor) -> torch.Tensor:
        return self.v_net(s).squeeze(-1)

    def _tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64), dtype=next(self.parameters()).dtype)

    def q_value(self, s, a) -> np.ndarray:
        with torch.no_grad():
            return self._q(self._tensor(s), self._tensor(a)).double().numpy()

    def value(self, s) -> np.ndarray:
        with torch.no_grad():
            return self._v(self._tensor(s)).double().numpy()

    def grad_a(self, s, a) -> np.ndarray:
        """Analytic action gradient of Q, one row per input pair."""
        st = self._tensor(s)
        at = self._tensor(a).clone().requires_grad_(True)
        with torch.enable_grad():
            (g,) = torch.autograd.grad(self._q(st, at).sum(), at)
        return g.double().numpy()


class OracleCritic:
    """Analytic reward of a one-step environment as Q; V is zero.

    Works on standardized inputs and maps them back to environment scale.
    """

    def __init__(self, env, stats: StandardizationStats):
        self.env = env
        self.stats = stats

    def _env(self, s, a):
        s_env = destandardize_array(np.atleast_2d(s), self.stats.arrays("state_mean"), self.stats.arrays("state_std"))
        a_env = destandardize_array(np.atleast_2d(a), self.stats.arrays("action_mean"), self.stats.arrays("action_std"))
        return s_env, a_env

    def q_value(self, s, a) -> np.ndarray:
        return self.env.true_q(*self._env(s, a))

    def value(self, s) -> np.ndarray:
        return np.zeros(np.atleast_2d(s).shape[0])

    def grad_a(self, s, a) -> np.ndarray:
        s_env, a_env = self._env(s, a)
        return self.env.true_q_grad(s_env, a_env) * self.stats.arrays("action_std")


class CorruptedCritic:
    """Adds ``+c`` to a base critic wherever the action leaves the support."""

    def __init__(self, base, c: float, in_support: Callable, stats: StandardizationStats):
        self.base, self.c, self.in_support, self.stats = base, c, in_support, stats

    def q_value(self, s, a) -> np.ndarray:
        s_env = destandardize_array(np.atleast_2d(s), self.stats.arrays("state_mean"), self.stats.arrays("state_std"))
        a_env = destandardize_array(np.atleast_2d(a), self.stats.arrays("action_mean"), self.stats.arrays("action_std"))
        off = ~self.in_support(s_env, a_env)
        return self.base.q_value(s, a) + self.c * off

    def value(self, s) -> np.ndarray:
        return self.base.value(s)

    def grad_a(self, s, a) -> np.ndarray:
        # the offset is piecewise constant
        return critic_grad(self.base, s, a)


def finite_difference_grad(fn: Callable, s, a, h: float = 1e-4) -> np.ndarray:
    """Central differences of fn(s, a) -> (B,) with respect to a."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    grad = np.empty_like(a)
    for j in range(a.shape[1]):
        step = np.zeros(a.shape[1])
        step[j] = h
        grad[:, j] = (fn(s, a + step) - fn(s, a - step)) / (2.0 * h)
    return grad


def critic_grad(critic, s, a, h: float = 1e-4) -> np.ndarray:
    if hasattr(critic, "grad_a"):
        return critic.grad_a(s, a)
    return finite_difference_grad(critic.q_value, s, a, h)


def fit_expectile_critic(dataset: OfflineDataset, gamma: float, expectile: float, cfg: CriticConfig) -> Critic:
    """Alternate expectile regression of V on Q and TD regression of Q on r + gamma V(s')."""
    if not 0.0 < expectile < 1.0:
        raise InvalidRangeError(f"expectile must be in (0, 1), got {expectile}")
    if not dataset.meta.standardized:
        raise LRTDError("Critic fitting requires a standardized dataset", exit_code=2)
    torch.manual_seed(cfg.seed)
    critic = Critic(dataset.d_s, dataset.d_a, cfg.hidden, gamma, expectile)
    rng = make_rng(cfg.seed, "critic")
    dtype = next(critic.parameters()).dtype
    S = torch.as_tensor(dataset.states, dtype=dtype)
    A = torch.as_tensor(dataset.actions, dtype=dtype)
    R = torch.as_tensor(dataset.rewards, dtype=dtype)
    S2 = torch.as_tensor(dataset.next_states, dtype=dtype)
    notdone = torch.as_tensor(1.0 - dataset.dones, dtype=dtype)
    # one-step tasks: every row terminal, Q regresses r directly
    one_step = bool(dataset.dones.all())

    q_opt = torch.optim.Adam(critic.q_net.parameters(), lr=cfg.learning_rate)
    v_opt = torch.optim.Adam(critic.v_net.parameters(), lr=cfg.learning_rate)
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.integers(0, dataset.n, size=min(cfg.batch_size, dataset.n)))
        s, a, r = S[idx], A[idx], R[idx]

        with torch.no_grad():
            q_target = critic._q(s, a)
        v_loss = expectile_loss(q_target - critic._v(s), expectile)
        v_opt.zero_grad()
        v_loss.backward()
        v_opt.step()

        with torch.no_grad():
            target = r if one_step else r + gamma * notdone[idx] * critic._v(S2[idx])
        q_loss = ((critic._q(s, a) - target) ** 2).mean()
        q_opt.zero_grad()
        q_loss.backward()
        q_opt.step()

        worst = max(float(q_loss), float(v_loss))
        if not math.isfinite(worst) or worst > DIVERGENCE_LIMIT:
            raise TrainingDivergedError(f"Critic diverged at step {step + 1}: q_loss={float(q_loss):.3g} v_loss={float(v_loss):.3g}")
        if (step + 1) % 500 == 0:
            logger.info(f"Critic step {step + 1}/{cfg.steps}: q_loss={float(q_loss):.5f} v_loss={float(v_loss):.5f}")

    critic.requires_grad_(False)
    critic.eval()
    return critic


def advantages(critic, dataset: OfflineDataset) -> np.ndarray:
    return np.asarray(critic.q_value(dataset.states, dataset.actions)) - np.asarray(critic.value(dataset.states))


@dataclass
class LabelResult:
    advantages: np.ndarray
    kappa: float
    labels: np.ndarray
    p: float


def order_statistic_index(level: float, n: int) -> int:
    """0-based index of the ascending order statistic at 1-based rank ceil(level * n).

    Level 0 maps to the minimum. A small tolerance absorbs products such as
    0.8 * 10 landing a rounding error above an integer.
    """
    rank = math.ceil(level * n - 1e-9 * max(n, 1))
    return min(max(rank, 1), n) - 1


def label_top_p(advs, p: float) -> LabelResult:
    advs = np.asarray(advs, dtype=np.float64).reshape(-1)
    if advs.size == 0:
        raise InvalidRangeError("Cannot label an empty advantage array")
    if not 0.0 < p < 1.0:
        raise InvalidRangeError(f"p must be in (0, 1), got {p}")
    kappa = float(np.sort(advs)[order_statistic_index(1.0 - p, advs.size)])
    labels = (advs >= kappa).astype(np.uint8)
    return LabelResult(advantages=advs, kappa=kappa, labels=labels, p=p)
