"""Monte-Carlo calibration of the gate threshold under the background hypothesis.

The threshold is the (1 - alpha) quantile of the cumulative LLR produced by
the exact deployment sampler, refined by a damped fixed-point iteration since
the sampler itself depends on the threshold through the gate.
"""

import hashlib
import json
import logging
import math
from typing import Optional, Tuple

import numpy as np

from .exceptions import CalibrationError, FingerprintMismatchError, InvalidRangeError
from .labeling import order_statistic_index
from .policy import TwoHeadPolicy, parameter_digest
from .sampler import LLRTrace, sample_batch
from .schedule import Schedule
from .schemas import CalibrationResult, GateConfig, QComposeConfig
from .seeding import draw_chain_inputs

logger = logging.getLogger(__name__)

CALIBRATION_STREAM = "calibration"
TYPE1_STREAM = "type1"
CONVERGENCE_IQR_FRACTION = 0.05
SPREAD_IQR_FRACTION = 0.25


def empirical_quantile(samples, level: float) -> float:
    """Smallest order statistic x with F_n(x) >= level."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InvalidRangeError("Cannot take the quantile of an empty sample")
    if not 0.0 <= level <= 1.0:
        raise InvalidRangeError(f"level must be in [0, 1], got {level}")
    return float(np.sort(x)[order_statistic_index(level, x.size)])


def dkw_epsilon(n: int, zeta: float) -> float:
    if n < 1:
        raise InvalidRangeError(f"n must be >= 1, got {n}")
    if not 0.0 < zeta < 1.0:
        raise InvalidRangeError(f"zeta must be in (0, 1), got {zeta}")
    return math.sqrt(math.log(2.0 / zeta) / (2.0 * n))


def dkw_budget(eps: float, zeta: float) -> int:
    """Smallest n with dkw_epsilon(n, zeta) <= eps."""
    if eps <= 0:
        raise InvalidRangeError(f"eps must be > 0, got {eps}")
    if not 0.0 < zeta < 1.0:
        raise InvalidRangeError(f"zeta must be in (0, 1), got {zeta}")
    return int(math.ceil(math.log(2.0 / zeta) / (2.0 * eps ** 2)))


def critic_identity(critic) -> Optional[str]:
    if critic is None:
        return None
    if hasattr(critic, "parameters"):
        return parameter_digest(critic)
    base = getattr(critic, "base", None)
    if base is not None:
        return f"{type(critic).__name__}:{getattr(critic, 'c', '')}:{critic_identity(base)}"
    return type(critic).__name__


def sampler_fingerprint(
    policy_id: str,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    critic_id: Optional[str] = None,
) -> str:
    """Hash of everything that shapes the deployed sampling law except the threshold."""
    payload = {
        "policy": policy_id,
        "schedule": sched.params.dict(),
        "gate": gcfg.dict(),
        "q_compose": qcfg.dict() if qcfg.enabled else {"enabled": False},
        "critic": critic_id if qcfg.enabled else None,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def live_fingerprint(policy: TwoHeadPolicy, sched: Schedule, gcfg: GateConfig, qcfg: QComposeConfig, critic=None) -> str:
    return sampler_fingerprint(parameter_digest(policy), sched, gcfg, qcfg, critic_identity(critic))


def ensure_fingerprint(result: CalibrationResult, fingerprint: str) -> None:
    if result.sampler_fingerprint != fingerprint:
        raise FingerprintMismatchError(
            "Calibration was run with a different sampler configuration "
            f"({result.sampler_fingerprint[:12]} != {fingerprint[:12]}); recalibrate before sampling"
        )


def run_h0_chains(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau: float,
    states,
    n: int,
    seed: int,
    stream: str,
    iteration: int = 0,
    critic=None,
) -> Tuple[np.ndarray, LLRTrace]:
    """n deployment chains on states drawn uniformly from ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise InvalidRangeError("Need at least one state to run chains")
    idx, noise = draw_chain_inputs(seed, stream, iteration, n, states.shape[0], sched.T, policy.d_a)
    return sample_batch(policy, sched, gcfg, qcfg, tau, states[idx], noise, critic)


def tau_settled(history, llrs) -> bool:
    """Whether the fixed-point iterates settled relative to the H0 LLR spread.

    The last step must move tau by at most 5% of the IQR of the final LLR
    sample and the later half of the history must span at most 25% of it.
    """
    history = np.asarray(history, dtype=np.float64)
    if history.size < 2:
        return True
    if not np.all(np.isfinite(history)):
        return False
    q75, q25 = np.percentile(llrs, [75, 25])
    iqr = q75 - q25
    tail = history[history.size // 2:]
    last_gap = abs(history[-1] - history[-2])
    return bool(last_gap <= CONVERGENCE_IQR_FRACTION * iqr and tail.max() - tail.min() <= SPREAD_IQR_FRACTION * iqr)


def calibrate_tau(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    states_cal,
    alpha: float,
    n: int,
    K: int = 6,
    momentum: float = 0.5,
    seed: int = 0,
    critic=None,
    zeta: float = 0.05,
) -> CalibrationResult:
    """Fixed-point calibration starting from a closed gate (tau = +inf).

    Iteration k runs n fresh chains at the current tau and moves tau toward the
    (1 - alpha) quantile of their cumulative LLR. The first iteration takes the
    quantile directly; the last returns the plain quantile of its own sample
    so the retained sample satisfies F_n(tau_hat) >= 1 - alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise InvalidRangeError(f"alpha must be in (0, 1), got {alpha}")
    if n < 100:
        raise InvalidRangeError(f"Calibration needs n >= 100 chains, got {n}")
    if K < 1:
        raise InvalidRangeError(f"K must be >= 1, got {K}")
    if not 0.0 <= momentum < 1.0:
        raise InvalidRangeError(f"momentum must be in [0, 1), got {momentum}")

    tau = math.inf
    history = []
    llrs = np.zeros(0)
    for k in range(1, K + 1):
        _, trace = run_h0_chains(policy, sched, gcfg, qcfg, tau, states_cal, n, seed, CALIBRATION_STREAM, k, critic)
        llrs = trace.llr_cum
        if not np.all(np.isfinite(llrs)):
            raise CalibrationError(f"Non-finite cumulative LLR in calibration iteration {k}")
        q = empirical_quantile(llrs, 1.0 - alpha)
        if k == 1 or k == K or not math.isfinite(tau):
            tau = q
        else:
            tau = momentum * tau + (1.0 - momentum) * q
        history.append(tau)
        logger.info(f"Calibration iteration {k}/{K}: quantile={q:.5f} tau={tau:.5f}")

    converged = tau_settled(history, llrs)
    if not converged:
        logger.warning(
            f"❌ Calibration did not settle: tau history {[round(h, 4) for h in history]} "
            f"is wide against the H0 LLR IQR"
        )

    result = CalibrationResult(
        tau_hat=tau,
        alpha=alpha,
        n=n,
        K=K,
        momentum=momentum,
        zeta=zeta,
        dkw_epsilon=dkw_epsilon(n, zeta),
        sampler_fingerprint=live_fingerprint(policy, sched, gcfg, qcfg, critic),
        tau_history=history,
        converged=converged,
        h0_llrs=llrs.tolist(),
    )
    logger.info(f"✅ Calibrated tau_hat={tau:.5f} at alpha={alpha} (eps_n={result.dkw_epsilon:.4f})")
    return result


def realized_type1(
    policy: TwoHeadPolicy,
    sched: Schedule,
    gcfg: GateConfig,
    qcfg: QComposeConfig,
    tau_hat: float,
    states,
    m: int,
    seed: int = 0,
    critic=None,
) -> float:
    """Fraction of m fresh chains (stream disjoint from calibration) with l_cum >= tau_hat."""
    if tau_hat == math.inf:
        return 0.0
    if tau_hat == -math.inf:
        return 1.0
    if m < 1:
        raise InvalidRangeError(f"m must be >= 1, got {m}")
    _, trace = run_h0_chains(policy, sched, gcfg, qcfg, tau_hat, states, m, seed, TYPE1_STREAM, 0, critic)
    return float(np.mean(trace.llr_cum >= tau_hat))
