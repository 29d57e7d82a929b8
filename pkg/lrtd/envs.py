"""Ground-truth synthetic environments and offline dataset generation."""

import logging
from typing import Callable, Tuple, Union

import numpy as np

from .dataset import OfflineDataset
from .exceptions import InvalidRangeError, LRTDError
from .schemas import BanditSpec, DatasetMeta, PointMassSpec

logger = logging.getLogger(__name__)


class BanditEnv:
    """One-step contextual bandit with a known good-mode map g(s) = tanh(W s)."""

    name = "bandit"
    horizon = 1

    def __init__(self, spec: BanditSpec = None):
        self.spec = spec or BanditSpec()
        self.W = np.asarray(self.spec.W, dtype=np.float64)
        self.action_low = np.asarray(self.spec.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.spec.action_high, dtype=np.float64)

    def mode(self, s) -> np.ndarray:
        return np.tanh(np.asarray(s, dtype=np.float64) @ self.W.T)

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, self.spec.d_s))

    def reward(self, s, a) -> np.ndarray:
        return 1.0 - np.linalg.norm(np.asarray(a, dtype=np.float64) - self.mode(s), axis=-1)

    def step(self, s, a):
        r = self.reward(s, a)
        return np.zeros_like(np.asarray(s, dtype=np.float64)), r, np.ones(r.shape, dtype=bool)

    def true_q(self, s, a) -> np.ndarray:
        return true_q_bandit(self.spec, s, a)

    def true_q_grad(self, s, a) -> np.ndarray:
        diff = np.asarray(a, dtype=np.float64) - self.mode(s)
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        return -diff / np.maximum(norm, 1e-12)

    def in_support(self, s, a) -> np.ndarray:
        """Analytic support: within 3 standard deviations of either mixture component."""
        a = np.asarray(a, dtype=np.float64)
        z_bg = np.linalg.norm(a, axis=-1) / self.spec.background_std
        z_good = np.linalg.norm(a - self.mode(s), axis=-1) / self.spec.good_std
        return np.minimum(z_bg, z_good) <= self.spec.support_radius


class PointMassEnv:
    """2-D point mass pushed toward the origin; reward -||s||^2 on the current state."""

    name = "pointmass"

    def __init__(self, spec: PointMassSpec = None):
        self.spec = spec or PointMassSpec()
        self.horizon = self.spec.horizon
        self.action_low = np.asarray(self.spec.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.spec.action_high, dtype=np.float64)

    def reset(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.spec.init_low, self.spec.init_high, size=(n, self.spec.d_s))

    def step(self, s, a):
        s = np.asarray(s, dtype=np.float64)
        a = np.clip(np.asarray(a, dtype=np.float64), self.action_low, self.action_high)
        r = -np.sum(s ** 2, axis=-1)
        return s + self.spec.dt * a, r, np.zeros(r.shape, dtype=bool)

    def behavior(self, s, rng: np.random.Generator) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        noise = self.spec.behavior_noise * rng.standard_normal(s.shape) if self.spec.behavior_noise > 0 else 0.0
        return np.clip(-s + noise, self.action_low, self.action_high)

    def true_q(self, s, a):
        raise LRTDError("Point-mass environment has no analytic action-value", exit_code=2)


Env = Union[BanditEnv, PointMassEnv]


def make_env(name: str, spec: dict = None) -> Env:
    if name == "bandit":
        return BanditEnv(BanditSpec(**(spec or {})))
    if name == "pointmass":
        return PointMassEnv(PointMassSpec(**(spec or {})))
    raise InvalidRangeError(f"Unknown environment '{name}'")


def gen_bandit_dataset(spec: BanditSpec, n: int, rng: np.random.Generator, seed: int = 0) -> OfflineDataset:
    if n < 100:
        raise InvalidRangeError(f"Bandit dataset needs n >= 100, got {n}")
    env = BanditEnv(spec)
    s = env.reset(rng, n)
    good = rng.random(n) < spec.p_good
    a_bg = spec.background_std * rng.standard_normal((n, spec.d_a))
    a_good = env.mode(s) + spec.good_std * rng.standard_normal((n, spec.d_a))
    a = np.where(good[:, None], a_good, a_bg)
    meta = DatasetMeta(
        env="bandit", env_spec=spec.dict(), seed=seed, n_rows=n, d_s=spec.d_s, d_a=spec.d_a
    )
    logger.info(f"Generated bandit dataset: {n} rows, good-mode fraction {good.mean():.3f}")
    return OfflineDataset(
        states=s,
        actions=a,
        rewards=env.reward(s, a),
        next_states=np.zeros_like(s),
        dones=np.ones(n, dtype=np.uint8),
        modes=good.astype(np.uint8),
        meta=meta,
    )


def true_q_bandit(spec: BanditSpec, s, a) -> np.ndarray:
    """Q(s, a) = 1 - ||a - tanh(W s)||; the bandit has a single step so Q equals the reward."""
    mode = np.tanh(np.asarray(s, dtype=np.float64) @ np.asarray(spec.W, dtype=np.float64).T)
    return 1.0 - np.linalg.norm(np.asarray(a, dtype=np.float64) - mode, axis=-1)


def gen_pointmass_dataset(spec: PointMassSpec, episodes: int, rng: np.random.Generator, seed: int = 0) -> OfflineDataset:
    if episodes < 10:
        raise InvalidRangeError(f"Point-mass dataset needs >= 10 episodes, got {episodes}")
    env = PointMassEnv(spec)
    H = spec.horizon
    states, actions, rewards, next_states, dones = [], [], [], [], []
    s = env.reset(rng, episodes)
    for h in range(H):
        a = env.behavior(s, rng)
        s2, r, _ = env.step(s, a)
        states.append(s)
        actions.append(a)
        rewards.append(r)
        next_states.append(s2)
        dones.append(np.full(episodes, h == H - 1))
        s = s2
    # episode-major row order: rows [e*H, (e+1)*H) belong to episode e
    def stack(xs):
        return np.swapaxes(np.stack(xs), 0, 1).reshape((episodes * H,) + np.shape(xs[0])[1:])

    meta = DatasetMeta(
        env="pointmass", env_spec=spec.dict(), seed=seed, n_rows=episodes * H, d_s=spec.d_s, d_a=spec.d_a
    )
    logger.info(f"Generated point-mass dataset: {episodes} episodes x {H} steps")
    return OfflineDataset(
        states=stack(states),
        actions=stack(actions),
        rewards=stack(rewards),
        next_states=stack(next_states),
        dones=stack(dones).astype(np.uint8),
        meta=meta,
    )


ActionSampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def rollout_return(env: Env, action_sampler: ActionSampler, episodes: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Mean and standard error of episodic return; episodes run in lockstep."""
    s = env.reset(rng, episodes)
    returns = np.zeros(episodes)
    for _ in range(env.horizon):
        a = np.asarray(action_sampler(s, rng), dtype=np.float64)
        s, r, _ = env.step(s, a)
        returns += r
    se = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return float(returns.mean()), se
