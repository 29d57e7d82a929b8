"""Evidence-gated reverse sampling with hard/soft gates and optional critic steps.

Every function works on a leading batch axis of independent chains; a single
chain is a batch of one. The gate at step t reads the cumulative LLR as of
before that step, then the LLR is updated with the drawn proposal.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import DimensionMismatchError, DisplacementBoundError, FormatError, InvalidRangeError, LRTDError
from .labeling import critic_grad
from .policy import TwoHeadPolicy, forward_heads
from .schedule import Schedule, mean_from_eps
from .schemas import GateConfig, QComposeConfig, StandardizationStats

logger = logging.getLogger(__name__)

BOUND_RTOL = 1e-9


@dataclass
class StepRecord:
    t: int
    mu_u: np.ndarray
    mu_c: np.ndarray  # effective conditional mean after the optional clamp
    sigma2: float  # posterior variance used for noise
    llr_sigma2: float  # variance used to divide in the LLR
    beta: np.ndarray
    m: np.ndarray  # deterministic mean actually used, critic step included
    dllr: np.ndarray
    llr_cum: np.ndarray
    lam: float = 0.0

    @property
    def dmu(self) -> np.ndarray:
        return self.mu_c - self.mu_u

    @property
    def dmu_norm(self) -> np.ndarray:
        return np.linalg.norm(self.dmu, axis=-1)


@dataclass
class LLRTrace:
    """Per-step records of a batch of reverse chains, ordered t = T .. 1."""

    steps: List[StepRecord] = field(default_factory=list)
    a0: Optional[np.ndarray] = None

    @property
    def t(self) -> np.ndarray:
        return np.array([r.t for r in self.steps])

    def _stack(self, name: str) -> np.ndarray:
        return np.stack([getattr(r, name) for r in self.steps])

    @property
    def beta(self) -> np.ndarray:
        return self._stack("beta")

    @property
    def dllr(self) -> np.ndarray:
        return self._stack("dllr")

    @property
    def llr_path(self) -> np.ndarray:
        return self._stack("llr_cum")

    @property
    def llr_cum(self) -> np.ndarray:
        return self.steps[-1].llr_cum if self.steps else np.zeros(0)

    @property
    def dmu_norm(self) -> np.ndarray:
        return self._stack("dmu_norm")

    @property
    def displacement(self) -> np.ndarray:
        return np.stack([np.linalg.norm(r.m - r.mu_u, axis=-1) for r in self.steps])

    @property
    def llr_sigma2(self) -> np.ndarray:
        return np.array([r.llr_sigma2 for r in self.steps])

    @property
    def n_chains(self) -> int:
        return int(self.steps[0].beta.shape[0]) if self.steps else 0


def llr_step(a_prev, mu_u, mu_c, sigma2: float) -> np.ndarray:
    """One-step log-likelihood ratio log N(a; mu_c, s2 I) - log N(a; mu_u, s2 I)."""
    a_prev = np.asarray(a_prev, dtype=np.float64)
    mu_u = np.asarray(mu_u, dtype=np.float64)
    mu_c = np.asarray(mu_c, dtype=np.float64)
    if not (a_prev.shape == mu_u.shape == mu_c.shape):
        raise DimensionMismatchError(f"Shapes differ: a={a_prev.shape} mu_u={mu_u.shape} mu_c={mu_c.shape}")
    if sigma2 <= 0:
        raise InvalidRangeError(f"sigma2 must be > 0, got {sigma2}")
    du = np.sum((a_prev - mu_u) ** 2, axis=-1)
    dc = np.sum((a_prev - mu_c) ** 2, axis=-1)
    return (du - dc) / (2.0 * sigma2)


def gate_soft(llr_cum, tau: float, delta: float, beta_max: float):
    if delta <= 0:
        raise InvalidRangeError(f"delta must be > 0, got {delta}")
    x = (np.asarray(llr_cum, dtype=np.float64) - tau) / delta
    out = beta_max * expit(x)
    return float(out) if np.ndim(out) == 0 else out


def gate_hard(llr_cum, tau: float, beta_max: float):
    out = beta_max * (np.asarray(llr_cum, dtype=np.float64) >= tau)
    return float(out) if np.ndim(out) == 0 else out


def gate_value(gcfg: GateConfig, llr_cum, tau: float):
    if gcfg.gate_kind == "hard":
        return gate_hard(llr_cum, tau, gcfg.beta_max)
    return gate_soft(llr_cum, tau, gcfg.delta, gcfg.beta_max)


def clip_norm(g, G: float) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    scale = np.minimum(1.0, G / np.maximum(norm, 1e-300))
    return g * scale


def lambda_schedule(sched: Schedule, qcfg: QComposeConfig, t: int) -> float:
    """lambda_t = lambda_max * sigma_t / sigma_T, capped at lambda_max."""
    s_T = np.sqrt(sched.sigma2(sched.T))
    if s_T <= 0:
        return 0.0
    return float(qcfg.lambda_max * min(1.0, np.sqrt(sched.sigma2(t)) / s_T))


def q_compose(a, s, critic, lambda_t: float, sigma2: float, center, G: float, h: float = 1e-4) -> np.ndarray:
    """a + lambda_t * sigma2 * clip_norm(grad_a Q(s, center), G)."""
    a = np.asarray(a, dtype=np.float64)
    if lambda_t == 0.0 or sigma2 == 0.0:
        return a.copy()
    single = a.ndim == 1
    g = critic_grad(critic, np.atleast_2d(s), np.atleast_2d(center), h)
    step = lambda_t * sigma2 * clip_norm(g, G)
    return a + (step[0] if single else step)


def _center(qcfg: QComposeConfig, gcfg: GateConfig, mu_u, m_gate, beta) -> np.ndarray:
    if qcfg.center == "unconditional":
        return mu_u
    if qcfg.center == "lrt":
        return m_gate
    if qcfg.blend_rho is not None:
        rho = np.full(beta.shape, qcfg.blend_rho)
    else:
        rho = beta / gcfg.beta_max if gcfg.beta_max > 0 else np.zeros_like(beta)
    return (1.0 - rho)[:, None] * mu_u + rho[:, None] * m_gate


def displacement_limit(gcfg: GateConfig, qcfg: QComposeConfig, dmu_norm, sigma2: float) -> np.ndarray:
    lam_max = qcfg.lambda_max if qcfg.enabled else 0.0
    return gcfg.beta_max * dmu_norm + lam_max * sigma2 * qcfg.grad_clip


def reverse_step(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau: float,
    s,
    a_t,
    t: int,
    llr_cum,
    rng: Optional[np.random.Generator] = None,
    critic=None,
    z=None,
) -> Tuple[np.ndarray, np.ndarray, StepRecord]:
    """One transition a_t -> a_{t-1} for a batch of chains.

    ``z`` supplies the step noise; when omitted it is drawn from ``rng``.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    llr_cum = np.atleast_1d(np.asarray(llr_cum, dtype=np.float64))
    B, d_a = a_t.shape

    eps_u, eps_c = forward_heads(policy, s, a_t, t)
    mu_u = mean_from_eps(sched, t, a_t, eps_u)
    mu_c = mean_from_eps(sched, t, a_t, eps_c)
    dmu = mu_c - mu_u
    if gcfg.dmu_clamp is not None:
        dmu = clip_norm(dmu, gcfg.dmu_clamp)
    mu_c = mu_u + dmu

    if gcfg.gated(t):
        beta = np.broadcast_to(np.asarray(gate_value(gcfg, llr_cum, tau), dtype=np.float64), (B,)).copy()
    else:
        beta = np.zeros(B)
    m_gate = mu_u + beta[:, None] * dmu

    sigma2 = sched.sigma2(t)
    if t == 1 or sigma2 == 0.0:
        z = np.zeros((B, d_a))
    elif z is None:
        if rng is None:
            raise LRTDError("reverse_step needs either noise z or an rng")
        z = rng.standard_normal((B, d_a))
    a_prop = m_gate + np.sqrt(sigma2) * np.asarray(z, dtype=np.float64).reshape(B, d_a)

    lam = 0.0
    q_disp = np.zeros((B, d_a))
    if qcfg.enabled:
        if critic is None:
            raise LRTDError("Q-composition is enabled but no critic was supplied", exit_code=2)
        lam = lambda_schedule(sched, qcfg, t)
        center = _center(qcfg, gcfg, mu_u, m_gate, beta)
        q_disp = q_compose(np.zeros((B, d_a)), s, critic, lam, sigma2, center, qcfg.grad_clip, qcfg.fd_step)
    a_prev = a_prop + q_disp
    m = m_gate + q_disp

    llr_s2 = sched.llr_sigma2(t, gcfg.t1_variance)
    dllr = llr_step(a_prev if qcfg.llr_after_compose else a_prop, mu_u, mu_c, llr_s2)
    llr_new = llr_cum + dllr

    disp = np.linalg.norm(m - mu_u, axis=-1)
    limit = displacement_limit(gcfg, qcfg, np.linalg.norm(dmu, axis=-1), sigma2)
    if np.any(disp > limit * (1.0 + BOUND_RTOL) + 1e-15):
        worst = int(np.argmax(disp - limit))
        raise DisplacementBoundError(
            f"Displacement bound violated at t={t}: |m - mu_u|={disp[worst]:.6g} > {limit[worst]:.6g}"
        )

    record = StepRecord(
        t=t, mu_u=mu_u, mu_c=mu_c, sigma2=sigma2, llr_sigma2=llr_s2,
        beta=beta, m=m, dllr=dllr, llr_cum=llr_new, lam=lam,
    )
    return a_prev, llr_new, record


def sample_batch(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau: float,
    states,
    noise,
    critic=None,
) -> Tuple[np.ndarray, LLRTrace]:
    """Run a batch of full reverse chains on pre-drawn noise.

    ``noise[:, 0]`` is a_T; ``noise[:, k]`` for k >= 1 is the step noise at t = T + 1 - k.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 3 or noise.shape[1] != sched.T + 1 or noise.shape[0] != states.shape[0]:
        raise DimensionMismatchError(f"noise must have shape ({states.shape[0]}, {sched.T + 1}, d_a), got {noise.shape}")
    if gcfg.gate_window is not None and gcfg.gate_window[1] > sched.T:
        raise InvalidRangeError(f"gate_window {gcfg.gate_window} exceeds T={sched.T}")

    a = noise[:, 0].copy()
    llr = np.zeros(states.shape[0])
    trace = LLRTrace()
    for t in range(sched.T, 0, -1):
        a, llr, rec = reverse_step(
            policy, sched, gcfg, qcfg, tau, states, a, t, llr, critic=critic, z=noise[:, sched.T + 1 - t]
        )
        trace.steps.append(rec)
    trace.a0 = a
    return a, trace


def sample_action(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau: float,
    s,
    rng: np.random.Generator,
    critic=None,
) -> Tuple[np.ndarray, LLRTrace]:
    """Draw one standardized action; returns it with the full evidence trace."""
    s = np.asarray(s, dtype=np.float64)
    noise = rng.standard_normal((1, sched.T + 1, policy.d_a))
    a0, trace = sample_batch(policy, sched, gcfg, qcfg, tau, s.reshape(1, -1), noise, critic)
    return a0[0], trace


def destandardize(a0, stats: Optional[StandardizationStats]) -> np.ndarray:
    if stats is None:
        raise FormatError("Standardization stats are required to map actions to the environment")
    a = np.asarray(a0, dtype=np.float64) * stats.arrays("action_std") + stats.arrays("action_mean")
    return np.clip(a, stats.arrays("action_low"), stats.arrays("action_high"))


def trace_rows(trace: LLRTrace) -> List[Dict[str, float]]:
    """Long-format rows (chain, t, beta, dllr, llr_cum, dmu_norm)."""
    rows = []
    for rec in trace.steps:
        dmu_norm = rec.dmu_norm
        for i in range(rec.beta.shape[0]):
            rows.append({
                "chain": i,
                "t": rec.t,
                "beta": float(rec.beta[i]),
                "dllr": float(rec.dllr[i]),
                "llr_cum": float(rec.llr_cum[i]),
                "dmu_norm": float(dmu_norm[i]),
            })
    return rows


@dataclass(frozen=True)
class SamplerSetup:
    """A named deployment configuration: gate, critic step and threshold."""

    name: str
    gate: GateConfig
    q_compose: QComposeConfig
    tau: float

    def run(self, policy: TwoHeadPolicy, sched: Schedule, states, noise, critic=None) -> Tuple[np.ndarray, LLRTrace]:
        return sample_batch(policy, sched, self.gate, self.q_compose, self.tau, states, noise, critic)
