"""OOD measurement and executable checks of the calibration/stability/OOD bounds."""

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .calibration import dkw_epsilon, empirical_quantile
from .dataset import OfflineDataset, destandardize_states, standardize_actions, standardize_states
from .exceptions import InvalidRangeError, LRTDError
from .policy import TwoHeadPolicy
from .sampler import LLRTrace, SamplerSetup, destandardize, llr_step, sample_batch
from .schedule import Schedule
from .schemas import (
    CouplingReport,
    GapReport,
    GateConfig,
    MomentReport,
    NPPowerReport,
    OODReport,
    QComposeConfig,
    StandardizationStats,
    TailReport,
    TailRow,
)

logger = logging.getLogger(__name__)


class KNNSupport:
    """State-conditional action support proxy built on a standardized dataset.

    For a query (s, a) the k nearest dataset rows by state are found and the
    minimum distance from a to their actions is compared with the q-th
    percentile of the same quantity computed leave-one-out over the dataset.
    """

    def __init__(self, states, actions, k: int = 50, q: float = 95.0):
        self.states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        n = self.states.shape[0]
        if n == 0:
            raise InvalidRangeError("kNN support needs a nonempty dataset")
        if k < 1 or k > n:
            raise InvalidRangeError(f"k must be in [1, {n}], got {k}")
        if not 0.0 < q < 100.0:
            raise InvalidRangeError(f"q must be in (0, 100), got {q}")
        self.k, self.q = k, q
        self.tree = cKDTree(self.states)
        self.radii = self._loo_radii()
        self.threshold = float(np.percentile(self.radii, q))

    def _loo_radii(self) -> np.ndarray:
        n = self.states.shape[0]
        if n == 1:
            return np.zeros(1)
        k = min(self.k, n - 1)
        _, idx = self.tree.query(self.states, k=k + 1)
        idx = idx.reshape(n, k + 1)
        is_self = idx == np.arange(n)[:, None]
        # rows whose own index fell outside the k+1 ties drop their farthest neighbour instead
        missing = ~is_self.any(axis=1)
        is_self[missing, -1] = True
        first = np.argmax(is_self, axis=1)
        keep = np.ones_like(is_self)
        keep[np.arange(n), first] = False
        nbr = idx[keep].reshape(n, k)
        return np.min(np.linalg.norm(self.actions[nbr] - self.actions[:, None, :], axis=-1), axis=1)

    def distance(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        _, idx = self.tree.query(states, k=self.k)
        idx = np.asarray(idx).reshape(states.shape[0], self.k)
        return np.min(np.linalg.norm(self.actions[idx] - actions[:, None, :], axis=-1), axis=1)

    def flags(self, states, actions) -> np.ndarray:
        return self.distance(states, actions) > self.threshold


def knn_ood_rate(dataset: OfflineDataset, states, actions, k: int = 50, q: float = 95.0, support: KNNSupport = None) -> OODReport:
    """Fraction of (s, a) pairs whose action leaves the dataset's local support."""
    support = support or KNNSupport(dataset.states, dataset.actions, k, q)
    flags = support.flags(states, actions)
    return OODReport(
        rate=float(np.mean(flags)) if flags.size else 0.0,
        k=support.k,
        q=support.q,
        flags=flags.tolist(),
        radii_threshold=[support.threshold] * int(flags.size),
    )


def support_agreement(support: KNNSupport, oracle: Callable, states_env, actions_env, stats: StandardizationStats) -> float:
    """Share of queries where the kNN proxy and an analytic support oracle agree."""
    s_std = standardize_states(states_env, stats)
    a_std = standardize_actions(actions_env, stats)
    in_knn = ~support.flags(s_std, a_std)
    return float(np.mean(in_knn == oracle(states_env, actions_env)))


def union_ood_bound(alpha: float, T: int) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidRangeError(f"alpha must be in [0, 1], got {alpha}")
    if T < 0:
        raise InvalidRangeError(f"T must be >= 0, got {T}")
    return 1.0 - (1.0 - alpha) ** T


def alpha_max(delta_qhat: float, eps_in: float, nu: float, eta_q: float, T: int) -> float:
    """Largest level at which LRT provably dominates Q-guided sampling; negative means infeasible."""
    if nu * T == 0:
        raise InvalidRangeError(f"nu * T must be nonzero, got nu={nu}, T={T}")
    return (delta_qhat - 2.0 * eps_in - nu * eta_q) / (nu * T)


def alpha_max_empirical(delta_qhat: float, eps_in: float, nu: float, eta_lrt: float, eta_q: float) -> float:
    """Slack of the return-gap condition with measured OOD rates; >= 0 certifies the level used."""
    return delta_qhat - 2.0 * eps_in - nu * (eta_lrt + eta_q)


def suggest_alpha_grid(alpha_max_hat: float, n_points: int = 5, upper: float = 0.2) -> List[float]:
    """Descending log grid on [min(alpha_max_hat / 2, upper), upper]."""
    if alpha_max_hat <= 0:
        raise InvalidRangeError(f"alpha_max must be > 0 to suggest a grid, got {alpha_max_hat}")
    if n_points < 1:
        raise InvalidRangeError("n_points must be >= 1")
    lo = min(0.5 * alpha_max_hat, upper)
    if n_points == 1 or math.isclose(lo, upper):
        return [upper]
    return [float(a) for a in np.geomspace(upper, lo, n_points)]


def variance_proxy_terms(dmu_norms, sigma2s) -> float:
    dmu_norms = np.asarray(dmu_norms, dtype=np.float64)
    sigma2s = np.asarray(sigma2s, dtype=np.float64)
    return float(np.sum(dmu_norms ** 2 / sigma2s))


def variance_proxy_per_chain(trace: LLRTrace) -> np.ndarray:
    """V = sum_t ||dmu_t||^2 / sigma_t^2 for every chain in the trace."""
    return np.sum(trace.dmu_norm ** 2 / trace.llr_sigma2[:, None], axis=0)


def variance_proxy(trace: LLRTrace) -> float:
    """Largest per-chain variance proxy in the trace."""
    if not trace.steps:
        raise LRTDError("Variance proxy needs a complete trace")
    return float(np.max(variance_proxy_per_chain(trace)))


def subgaussian_tail_check(h0_llrs, V: float, xs: Sequence[float], zeta: float = 0.05) -> TailReport:
    llrs = np.asarray(h0_llrs, dtype=np.float64).reshape(-1)
    if llrs.size == 0:
        raise InvalidRangeError("Tail check needs a nonempty sample")
    if V < 0:
        raise InvalidRangeError(f"V must be >= 0, got {V}")
    centered = llrs - llrs.mean()
    slack = dkw_epsilon(llrs.size, zeta)
    rows = []
    for x in xs:
        if x < 0:
            raise InvalidRangeError(f"tail points must be >= 0, got {x}")
        tail = math.exp(-x * x / (2.0 * V)) if V > 0 else float(x == 0)
        empirical = float(np.mean(centered >= x))
        bound = tail + slack
        rows.append(TailRow(x=float(x), empirical=empirical, bound=bound, violated=empirical > bound))
    return TailReport(V=V, n=int(llrs.size), dkw_slack=slack, rows=rows)


def displacement_bound(beta_max, dmu_norm, lambda_max, sigma2, G):
    """B_t = beta_max ||dmu_t|| + lambda_max sigma_t^2 G."""
    out = beta_max * np.asarray(dmu_norm, dtype=np.float64) + lambda_max * np.asarray(sigma2, dtype=np.float64) * G
    return float(out) if np.ndim(out) == 0 else out


def step_bound(beta_max: float, D: float, lambda_max: float, S2: float, G: float) -> float:
    """Uniform per-step displacement when ||dmu|| <= D and sigma_t^2 <= S2."""
    return float(displacement_bound(beta_max, D, lambda_max, S2, G))


def llr_moment_check(m, mu_u, mu_c, sigma2: float, draws: int, rng: np.random.Generator, rtol: float = 0.05) -> MomentReport:
    """One-step LLR statistics over repeated noise at a fixed deterministic mean m."""
    m = np.asarray(m, dtype=np.float64)
    mu_u = np.asarray(mu_u, dtype=np.float64)
    mu_c = np.asarray(mu_c, dtype=np.float64)
    a = m + math.sqrt(sigma2) * rng.standard_normal((draws, m.size))
    dl = llr_step(a, np.broadcast_to(mu_u, a.shape), np.broadcast_to(mu_c, a.shape), sigma2)
    dmu = float(np.linalg.norm(mu_c - mu_u))
    var_theory = dmu ** 2 / sigma2
    var_emp = float(dl.var(ddof=1))
    rel = abs(var_emp - var_theory) / var_theory if var_theory > 0 else abs(var_emp)
    B_t = float(np.linalg.norm(m - mu_u))
    mean_bound = dmu / sigma2 * (B_t + dmu / 2.0)
    mean_emp = float(dl.mean())
    # the mean bound is checked with a 4-standard-error allowance
    mean_ok = abs(mean_emp) <= mean_bound + 4.0 * math.sqrt(var_theory / draws)
    return MomentReport(
        draws=draws,
        var_empirical=var_emp,
        var_theory=var_theory,
        var_rel_error=rel,
        mean_empirical=mean_emp,
        mean_bound=mean_bound,
        holds=bool(rel <= rtol and mean_ok),
    )


def gate_activation_rate(
    trace: LLRTrace, tau: float, window: Optional[Tuple[int, int]] = None
) -> Tuple[float, np.ndarray]:
    """Share of chains whose evidence reaches tau at some step, and the per-step crossing rates.

    With ``window`` only the steps start <= t <= end are counted.
    """
    path = trace.llr_path
    if window is not None:
        t = trace.t
        path = path[(t >= window[0]) & (t <= window[1])]
    crossed = path >= tau
    if crossed.shape[0] == 0:
        return 0.0, np.zeros(0)
    return float(np.mean(crossed.any(axis=0))), crossed.mean(axis=1)


def _env_pairs(states_std, a0, stats: StandardizationStats):
    a_env = destandardize(a0, stats)
    return destandardize_states(states_std, stats), a_env, standardize_actions(a_env, stats)


def return_gap_report(
    env,
    policy: TwoHeadPolicy,
    sched: Schedule,
    cfg_lrt: SamplerSetup,
    cfg_q: SamplerSetup,
    critic,
    states,
    stats: StandardizationStats,
    rng: np.random.Generator,
    in_support: Optional[Callable] = None,
) -> GapReport:
    """Measured terms of the return comparison between LRT and Q-guided sampling.

    Critic errors are taken as maxima of |Q_hat - Q_true| over the evaluated
    on-support and off-support actions; OOD rates use ``in_support`` (the
    environment's analytic support when not given).
    """
    if not hasattr(env, "true_q"):
        raise LRTDError("Return-gap report needs an environment with an analytic action-value", exit_code=2)
    in_support = in_support or getattr(env, "in_support", None)
    if in_support is None:
        raise LRTDError("Return-gap report needs a support oracle", exit_code=2)
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    n = states.shape[0]

    terms = {}
    for name, setup in (("lrt", cfg_lrt), ("q", cfg_q)):
        noise = rng.standard_normal((n, sched.T + 1, policy.d_a))
        a0, _ = setup.run(policy, sched, states, noise, critic)
        s_env, a_env, a_std = _env_pairs(states, a0, stats)
        q_hat = np.asarray(critic.q_value(states, a_std), dtype=np.float64)
        q_true = np.asarray(env.true_q(s_env, a_env), dtype=np.float64)
        terms[name] = (q_hat, q_true, np.asarray(in_support(s_env, a_env), dtype=bool))

    err = np.concatenate([np.abs(t[0] - t[1]) for t in terms.values()])
    on = np.concatenate([t[2] for t in terms.values()])
    eps_in = float(err[on].max()) if on.any() else 0.0
    eps_out = float(err[~on].max()) if (~on).any() else 0.0
    nu = max(0.0, eps_out - eps_in)
    eta_lrt = float(1.0 - terms["lrt"][2].mean())
    eta_q = float(1.0 - terms["q"][2].mean())
    delta_qhat = float(terms["lrt"][0].mean() - terms["q"][0].mean())
    delta_qtrue = float(terms["lrt"][1].mean() - terms["q"][1].mean())
    lower = delta_qhat - 2.0 * eps_in - nu * (eta_q + eta_lrt)
    report = GapReport(
        delta_qhat=delta_qhat,
        delta_qtrue=delta_qtrue,
        eta_lrt=eta_lrt,
        eta_q=eta_q,
        eps_in=eps_in,
        eps_out=eps_out,
        nu=nu,
        lower_bound=lower,
        slack=delta_qtrue - lower,
        holds=bool(delta_qtrue >= lower - 1e-12),
    )
    logger.info(f"Return gap: dQtrue={delta_qtrue:.4f} >= {lower:.4f} ({'✅' if report.holds else '❌'})")
    return report


def np_power_check(
    mu0: float,
    mu1: float,
    sigma: float,
    alpha: float,
    n: int,
    n_alternatives: int,
    rng: np.random.Generator,
    zeta: float = 0.05,
) -> NPPowerReport:
    """Hard LRT versus random linear tests with matched empirical size.

    Observations are (x, xi) with x ~ N(mu_i, sigma^2) and an independent
    N(0, 1) nuisance xi. Every test is calibrated on one null sample and
    evaluated on fresh null and alternative samples.
    """
    if sigma <= 0:
        raise InvalidRangeError(f"sigma must be > 0, got {sigma}")
    if not 0.0 < alpha < 1.0:
        raise InvalidRangeError(f"alpha must be in (0, 1), got {alpha}")

    def draw(mu):
        return np.column_stack([mu + sigma * rng.standard_normal(n), rng.standard_normal(n)])

    cal, null, alt = draw(mu0), draw(mu0), draw(mu1)

    def lrt(obs):
        x = obs[:, :1]
        return llr_step(x, np.full_like(x, mu0), np.full_like(x, mu1), sigma ** 2)

    tau = empirical_quantile(lrt(cal), 1.0 - alpha)
    size_lrt = float(np.mean(lrt(null) >= tau))
    power_lrt = float(np.mean(lrt(alt) >= tau))

    angles = rng.uniform(-math.pi, math.pi, size=n_alternatives)
    sizes, powers = [], []
    for theta in angles:
        w = np.array([math.cos(theta), math.sin(theta)])
        thr = empirical_quantile(cal @ w, 1.0 - alpha)
        sizes.append(float(np.mean(null @ w >= thr)))
        powers.append(float(np.mean(alt @ w >= thr)))

    tol = 2.0 * dkw_epsilon(n, zeta)
    dominated = all(power_lrt + tol >= p for p in powers)
    return NPPowerReport(
        tau=tau,
        size_lrt=size_lrt,
        power_lrt=power_lrt,
        alternative_sizes=sizes,
        alternative_powers=powers,
        tolerance=tol,
        dominated=dominated,
    )


def soft_hard_coupling(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau: float,
    states,
    noise,
    deltas: Sequence[float] = (1.0, 0.1, 0.01, 0.001),
    tol: float = 1e-6,
    critic=None,
) -> CouplingReport:
    """Share of chains whose soft-gate output differs from the hard-gate output on shared noise."""
    a_hard, _ = sample_batch(policy, sched, gcfg.copy(update={"gate_kind": "hard"}), qcfg, tau, states, noise, critic)
    fractions = []
    for delta in deltas:
        soft = gcfg.copy(update={"gate_kind": "soft", "delta": delta})
        a_soft, _ = sample_batch(policy, sched, soft, qcfg, tau, states, noise, critic)
        diff = np.max(np.abs(a_soft - a_hard), axis=-1)
        fractions.append(float(np.mean(diff > tol)))
        logger.info(f"delta={delta}: {fractions[-1]:.3%} of chains differ from the hard gate")
    return CouplingReport(deltas=list(deltas), fractions=fractions, tol=tol)


def energy_distance(x, y) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return float(2.0 * cdist(x, y).mean() - cdist(x, x).mean() - cdist(y, y).mean())


def energy_two_sample_test(x, y, n_perm: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Energy distance and its permutation p-value."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    nx = x.shape[0]
    pooled = np.vstack([x, y])
    D = cdist(pooled, pooled)

    def stat(order):
        i, j = order[:nx], order[nx:]
        return 2.0 * D[np.ix_(i, j)].mean() - D[np.ix_(i, i)].mean() - D[np.ix_(j, j)].mean()

    observed = stat(np.arange(pooled.shape[0]))
    hits = sum(stat(rng.permutation(pooled.shape[0])) >= observed for _ in range(n_perm))
    return float(observed), float((1 + hits) / (1 + n_perm))
