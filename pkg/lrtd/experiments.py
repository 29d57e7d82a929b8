"""Pipeline steps shared by the CLI commands: data, labels, training, evaluation and theory checks."""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .calibration import (
    calibrate_tau,
    dkw_epsilon,
    ensure_fingerprint,
    live_fingerprint,
    realized_type1,
    run_h0_chains,
)
from .dataset import OfflineDataset, standardize, standardize_actions, standardize_states
from .envs import BanditEnv, Env, gen_bandit_dataset, gen_pointmass_dataset, make_env, rollout_return
from .exceptions import ConfigError, LRTDError
from .labeling import CorruptedCritic, OracleCritic, advantages, fit_expectile_critic, label_top_p
from .metrics import (
    KNNSupport,
    alpha_max,
    alpha_max_empirical,
    displacement_bound,
    energy_two_sample_test,
    gate_activation_rate,
    knn_ood_rate,
    llr_moment_check,
    np_power_check,
    return_gap_report,
    soft_hard_coupling,
    step_bound,
    subgaussian_tail_check,
    union_ood_bound,
    variance_proxy,
)
from .policy import TwoHeadPolicy, init_policy, train
from .sampler import SamplerSetup, destandardize
from .schedule import Schedule, schedule_from_params
from .schemas import BanditSpec, BoundReport, CalibrationResult, PointMassSpec, RunConfig, StandardizationStats, SweepRow
from .seeding import draw_chain_inputs, make_rng
from .storage import load_critic, load_dataset, load_policy

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunPaths:
    """Fixed layout of a run directory."""

    root: Path

    @property
    def raw(self) -> Path:
        return self.root / "data" / "raw"

    @property
    def dataset(self) -> Path:
        return self.root / "data" / "labeled"

    @property
    def critic(self) -> Path:
        return self.root / "critic"

    @property
    def policy(self) -> Path:
        return self.root / "policy"

    @property
    def calibration(self) -> Path:
        return self.root / "calibration"

    @property
    def reports(self) -> Path:
        path = self.root / "reports"
        path.mkdir(parents=True, exist_ok=True)
        return path


def load_config(path: Optional[str]) -> RunConfig:
    """Parse a JSON run config; a missing path gives the defaults."""
    if not path:
        return RunConfig()
    file = Path(path)
    if not file.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        return RunConfig.parse_obj(json.loads(file.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}")


def override(cfg: RunConfig, section: str, **changes) -> RunConfig:
    """Copy of cfg with fields of one section replaced and re-validated."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    current = getattr(cfg, section)
    try:
        updated = type(current)(**{**current.dict(), **changes})
    except ValidationError as e:
        raise ConfigError(f"Invalid {section} override: {e}")
    return cfg.copy(update={section: updated})


# ---------------------------------------------------------------------------
# pipeline steps

def generate_data(cfg: RunConfig) -> OfflineDataset:
    rng = make_rng(cfg.seed, "data")
    if cfg.data.env == "bandit":
        return gen_bandit_dataset(BanditSpec(p_good=cfg.data.p_good), cfg.data.n, rng, seed=cfg.seed)
    return gen_pointmass_dataset(PointMassSpec(), cfg.data.episodes, rng, seed=cfg.seed)


def env_for(dataset: OfflineDataset) -> Env:
    return make_env(dataset.meta.env, dataset.meta.env_spec)


def label_dataset(raw: OfflineDataset, cfg: RunConfig):
    """Standardize, fit (or build) the critic and attach top-p labels."""
    dataset, stats = standardize(raw)
    if cfg.critic.oracle:
        env = env_for(raw)
        if not isinstance(env, BanditEnv):
            raise ConfigError("The oracle critic needs an environment with an analytic action-value")
        critic = OracleCritic(env, stats)
    else:
        critic = fit_expectile_critic(dataset, cfg.critic.gamma, cfg.critic.expectile, cfg.critic)
    labels = label_top_p(advantages(critic, dataset), cfg.critic.p)
    logger.info(f"Labeled {int(labels.labels.sum())}/{dataset.n} rows as good (kappa={labels.kappa:.4f})")
    return dataset.with_labels(labels.advantages, labels.labels, labels.kappa, labels.p), critic


def train_policy(dataset: OfflineDataset, cfg: RunConfig) -> Tuple[TwoHeadPolicy, Schedule]:
    sched = schedule_from_params(cfg.schedule)
    policy = train(init_policy(dataset.d_s, dataset.d_a, cfg.train), dataset, sched, cfg.train)
    return policy, sched


def calibration_states(dataset: OfflineDataset, cfg: RunConfig) -> np.ndarray:
    """Held-out calibration states: a seeded subset of dataset states."""
    rng = make_rng(cfg.seed, "calibration-states")
    n = min(cfg.calibration.n_states, dataset.n)
    return dataset.states[rng.choice(dataset.n, size=n, replace=False)]


def evaluation_states(dataset: OfflineDataset, cfg: RunConfig, stream: str = "evaluation-states") -> np.ndarray:
    rng = make_rng(cfg.seed, stream)
    n = min(cfg.evaluation.ood_queries, dataset.n)
    return dataset.states[rng.choice(dataset.n, size=n, replace=False)]


def calibrate(policy, sched, cfg: RunConfig, states_cal, critic=None, alpha: float = None) -> CalibrationResult:
    c = cfg.calibration
    return calibrate_tau(
        policy, sched, cfg.gate, cfg.q_compose, states_cal,
        alpha if alpha is not None else c.alpha, c.n, c.K, c.momentum,
        seed=cfg.seed, critic=critic, zeta=c.zeta,
    )


# ---------------------------------------------------------------------------
# sampler setups and evaluation

def lrt_setup(cfg: RunConfig, tau: float, name: str = "lrt") -> SamplerSetup:
    return SamplerSetup(name=name, gate=cfg.gate, q_compose=cfg.q_compose, tau=tau)


def baseline_setups(cfg: RunConfig, with_critic: bool) -> List[SamplerSetup]:
    """Fixed-threshold comparisons: closed gate, always-conditional and pure critic guidance."""
    no_q = cfg.q_compose.copy(update={"enabled": False})
    setups = [
        SamplerSetup("gate-closed", cfg.gate, no_q, math.inf),
        SamplerSetup("always-conditional", cfg.gate, no_q, -math.inf),
    ]
    if with_critic:
        qg_gate = cfg.gate.copy(update={"beta_max": 0.0})
        qg_q = cfg.q_compose.copy(update={"enabled": True, "center": "unconditional"})
        setups.append(SamplerSetup("qg", qg_gate, qg_q, math.inf))
    return setups


class PolicyActor:
    """Maps env-scale state batches to env-scale actions through one sampler setup."""

    def __init__(self, policy: TwoHeadPolicy, sched: Schedule, setup: SamplerSetup, stats: StandardizationStats, critic=None):
        self.policy, self.sched, self.setup, self.stats, self.critic = policy, sched, setup, stats, critic

    def standardized(self, states_std, rng: np.random.Generator) -> np.ndarray:
        states_std = np.atleast_2d(states_std)
        noise = rng.standard_normal((states_std.shape[0], self.sched.T + 1, self.policy.d_a))
        a0, _ = self.setup.run(self.policy, self.sched, states_std, noise, self.critic)
        return a0

    def __call__(self, states_env, rng: np.random.Generator) -> np.ndarray:
        a0 = self.standardized(standardize_states(states_env, self.stats), rng)
        return destandardize(a0, self.stats)


def deployed_actions(a0, stats: StandardizationStats) -> np.ndarray:
    """Standardized view of the clipped env-scale action a sampler actually executes."""
    return standardize_actions(destandardize(a0, stats), stats)


def seeded_return(actor: PolicyActor, env: Env, cfg: RunConfig, name: str) -> Tuple[float, float]:
    """Mean over seeds of per-seed mean return, with the standard error across seeds."""
    means = []
    for s in range(cfg.evaluation.seeds):
        mean, _ = rollout_return(env, actor, cfg.evaluation.episodes, make_rng(cfg.seed, "rollout", name, s))
        means.append(mean)
    means = np.asarray(means)
    se = float(means.std(ddof=1) / math.sqrt(means.size)) if means.size > 1 else 0.0
    return float(means.mean()), se


def evaluate_setup(
    setup: SamplerSetup,
    policy: TwoHeadPolicy,
    sched: Schedule,
    dataset: OfflineDataset,
    support: KNNSupport,
    cfg: RunConfig,
    states_cal,
    critic=None,
    alpha: float = float("nan"),
) -> SweepRow:
    env = env_for(dataset)
    actor = PolicyActor(policy, sched, setup, dataset.stats, critic)
    ret, se = seeded_return(actor, env, cfg, setup.name)
    type1 = realized_type1(
        policy, sched, setup.gate, setup.q_compose, setup.tau, states_cal,
        cfg.evaluation.type1_chains, seed=cfg.seed, critic=critic,
    )
    query = evaluation_states(dataset, cfg)
    a0 = actor.standardized(query, make_rng(cfg.seed, "ood", setup.name))
    actions = deployed_actions(a0, dataset.stats)
    ood = knn_ood_rate(dataset, query, actions, support=support).rate
    row = SweepRow(alpha=alpha, tau_hat=setup.tau, return_mean=ret, return_se=se, type1=type1, ood=ood, method=setup.name)
    logger.info(
        f"{setup.name}: alpha={alpha} tau={setup.tau:.4f} return={ret:.4f}±{se:.4f} type1={type1:.4f} ood={ood:.4f}"
    )
    return row


def evaluate(
    policy, sched, dataset: OfflineDataset, cfg: RunConfig, calibration: CalibrationResult, critic=None
) -> List[SweepRow]:
    """Calibrated LRT plus the baseline samplers, fingerprint-checked against the calibration."""
    ensure_fingerprint(calibration, live_fingerprint(policy, sched, cfg.gate, cfg.q_compose, critic))
    states_cal = calibration_states(dataset, cfg)
    support = KNNSupport(dataset.states, dataset.actions, cfg.evaluation.ood_k, cfg.evaluation.ood_q)
    name = "lrt+q" if cfg.q_compose.enabled else "lrt"
    setups = [lrt_setup(cfg, calibration.tau_hat, name)] + baseline_setups(cfg, critic is not None)
    return [
        evaluate_setup(
            s, policy, sched, dataset, support, cfg, states_cal, critic,
            alpha=calibration.alpha if s.name == name else float("nan"),
        )
        for s in setups
    ]


def sweep(policy, sched, dataset: OfflineDataset, cfg: RunConfig, alphas: List[float], critic=None) -> List[SweepRow]:
    """Calibrate and evaluate the deployment sampler at every level in the grid."""
    states_cal = calibration_states(dataset, cfg)
    support = KNNSupport(dataset.states, dataset.actions, cfg.evaluation.ood_k, cfg.evaluation.ood_q)
    rows = []
    for alpha in alphas:
        result = calibrate(policy, sched, cfg, states_cal, critic, alpha=alpha)
        setup = lrt_setup(cfg, result.tau_hat, "lrt+q" if cfg.q_compose.enabled else "lrt")
        rows.append(evaluate_setup(setup, policy, sched, dataset, support, cfg, states_cal, critic, alpha=alpha))
    return rows


# ---------------------------------------------------------------------------
# theory suite

TAIL_MULTIPLES = (1.0, 2.0, 3.0)
CORRUPTION_LEVELS = (0.5, 1.0)


def check_theory(
    policy: TwoHeadPolicy,
    sched: Schedule,
    dataset: OfflineDataset,
    cfg: RunConfig,
    calibration: CalibrationResult,
    critic=None,
) -> BoundReport:
    """Evaluate every executable bound on H0 chains of the calibrated deployment sampler."""
    gcfg, qcfg, tau = cfg.gate, cfg.q_compose, calibration.tau_hat
    ensure_fingerprint(calibration, live_fingerprint(policy, sched, gcfg, qcfg, critic))
    states_cal = calibration_states(dataset, cfg)
    m = cfg.evaluation.type1_chains
    T_gated = gcfg.gated_steps(sched.T)
    checks: Dict[str, bool] = {}
    details: Dict[str, object] = {}

    _, trace = run_h0_chains(policy, sched, gcfg, qcfg, tau, states_cal, m, cfg.seed, "theory", 0, critic)
    V = variance_proxy(trace)
    tail = subgaussian_tail_check(trace.llr_cum, V, [c * math.sqrt(V) for c in TAIL_MULTIPLES], calibration.zeta)
    checks["subgaussian_tail"] = not tail.violations

    lam = qcfg.lambda_max if qcfg.enabled else 0.0
    sigma2 = np.array([rec.sigma2 for rec in trace.steps])
    B_t = displacement_bound(gcfg.beta_max, trace.dmu_norm, lam, sigma2[:, None], qcfg.grad_clip)
    checks["displacement"] = bool(np.all(trace.displacement <= B_t * (1 + 1e-9) + 1e-15))
    D = gcfg.dmu_clamp if gcfg.dmu_clamp is not None else float(trace.dmu_norm.max())
    B_step = step_bound(gcfg.beta_max, D, lam, float(sigma2.max()), qcfg.grad_clip)

    type1 = float(np.mean(trace.llr_cum >= tau))
    eta_gate, step_rates = gate_activation_rate(trace, tau, gcfg.gate_window)
    step_alpha = float(step_rates.max()) if step_rates.size else 0.0
    union = union_ood_bound(step_alpha, T_gated)
    checks["union_bound_covers_activation"] = eta_gate <= union + dkw_epsilon(m, calibration.zeta)
    details["type1"] = type1
    details["gate_activation"] = eta_gate
    details["step_alpha"] = step_alpha

    first = trace.steps[0]
    moments = llr_moment_check(
        first.m[0], first.mu_u[0], first.mu_c[0], first.sigma2, 100_000, make_rng(cfg.seed, "moments")
    )
    checks["llr_moments"] = moments.holds
    details["llr_moments"] = moments.dict()

    power = np_power_check(0.0, 1.0, 1.0, calibration.alpha, 100_000, 20, make_rng(cfg.seed, "np-power"))
    checks["neyman_pearson"] = power.dominated
    details["np_power"] = power.dict()

    n_couple = min(1000, m)
    idx, noise = draw_chain_inputs(cfg.seed, "coupling", 0, n_couple, states_cal.shape[0], sched.T, policy.d_a)
    coupling = soft_hard_coupling(policy, sched, gcfg, qcfg, tau, states_cal[idx], noise, critic=critic)
    checks["soft_hard_coupling"] = coupling.monotone and coupling.fractions[-1] < 0.05
    details["coupling"] = coupling.dict()

    no_q = qcfg.copy(update={"enabled": False})
    a_closed, _ = run_h0_chains(policy, sched, gcfg, no_q, math.inf, states_cal, 1000, cfg.seed, "energy-closed")
    a_uncond, _ = run_h0_chains(
        policy, sched, gcfg.copy(update={"beta_max": 0.0}), no_q, math.inf, states_cal, 1000, cfg.seed, "energy-uncond"
    )
    stat, p_value = energy_two_sample_test(a_closed, a_uncond, 200, make_rng(cfg.seed, "energy"))
    checks["closed_gate_marginal"] = p_value > 0.01
    details["energy"] = {"statistic": stat, "p_value": p_value}

    report = BoundReport(
        union_bound=union_ood_bound(calibration.alpha, T_gated),
        variance_proxy=V,
        displacement_bounds=np.max(B_t, axis=1).tolist(),
        B_step=B_step,
        tail_violations=tail.violations,
        checks=checks,
        details=details,
    )

    env = env_for(dataset)
    if isinstance(env, BanditEnv):
        _return_gap_checks(report, policy, sched, dataset, cfg, tau, env, T_gated)

    for name, ok in report.checks.items():
        logger.info(f"{'✅' if ok else '❌'} {name}")
    return report


def _return_gap_checks(report: BoundReport, policy, sched, dataset, cfg: RunConfig, tau: float, env: BanditEnv, T_gated: int) -> None:
    """Return-gap inequality with an analytic critic corrupted off-support, plus the alpha_max diagnostics."""
    stats = dataset.stats
    states = evaluation_states(dataset, cfg, "gap-states")
    gate_only = cfg.q_compose.copy(update={"enabled": False})
    lrt = SamplerSetup("lrt", cfg.gate, gate_only, tau)
    qg = baseline_setups(cfg, with_critic=True)[-1]
    gaps = {}
    for c in CORRUPTION_LEVELS:
        critic = CorruptedCritic(OracleCritic(env, stats), c, env.in_support, stats)
        gap = return_gap_report(env, policy, sched, lrt, qg, critic, states, stats, make_rng(cfg.seed, "gap", c))
        gaps[str(c)] = gap.dict()
        report.checks[f"return_gap_c{c}"] = gap.holds
    report.details["return_gap"] = gaps

    worst = gaps[str(CORRUPTION_LEVELS[-1])]
    if worst["nu"] > 0:
        report.alpha_max = alpha_max(worst["delta_qhat"], worst["eps_in"], worst["nu"], worst["eta_q"], sched.T)
        report.alpha_max_window = alpha_max(worst["delta_qhat"], worst["eps_in"], worst["nu"], worst["eta_q"], T_gated)
    report.alpha_max_empirical_slack = alpha_max_empirical(
        worst["delta_qhat"], worst["eps_in"], worst["nu"], worst["eta_lrt"], worst["eta_q"]
    )


# ---------------------------------------------------------------------------
# artifacts

def load_run_critic(run_paths: RunPaths, dataset: OfflineDataset):
    """The critic written by the label step, or None when the run has none."""
    if (run_paths.critic / "oracle.json").exists():
        return OracleCritic(env_for(dataset), dataset.stats)
    if (run_paths.critic / "model.json").exists():
        return load_critic(run_paths.critic)[0]
    return None


def load_trained(run_paths: RunPaths) -> Tuple[OfflineDataset, TwoHeadPolicy, Schedule, object]:
    if not run_paths.policy.exists():
        raise ConfigError(f"No trained policy at {run_paths.policy}; run train first")
    dataset = load_dataset(run_paths.dataset)
    policy, meta = load_policy(run_paths.policy)
    if meta.schedule is None:
        raise LRTDError(f"Checkpoint {run_paths.policy} does not record its noise schedule", exit_code=2)
    return dataset, policy, schedule_from_params(meta.schedule), load_run_critic(run_paths, dataset)
