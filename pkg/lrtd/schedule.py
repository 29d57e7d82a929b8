"""DDPM forward/reverse noise schedule shared by both heads."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatchError, InvalidRangeError
from .schemas import ScheduleParams

SIGMA2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Schedule:
    """Linear-in-beta schedule. Arrays are indexed by ``t - 1`` for t in 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2_reverse: np.ndarray
    params: ScheduleParams = field(compare=False)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise InvalidRangeError(f"t={t} outside [1, {self.T}]")

    def sigma2(self, t: int) -> float:
        self._check_t(t)
        return float(self.sigma2_reverse[t - 1])

    def llr_sigma2(self, t: int, convention: str = "clipped") -> float:
        """Variance used to divide in the LLR and variance proxy.

        Equals the posterior variance for t >= 2. At t = 1 the posterior
        variance is 0: ``clipped`` substitutes the t = 2 value, ``floor``
        floors it at 1e-12.
        """
        s2 = self.sigma2(t)
        if t == 1:
            if convention == "clipped" and self.T >= 2:
                return float(self.sigma2_reverse[1])
            return max(s2, SIGMA2_FLOOR)
        return max(s2, SIGMA2_FLOOR)


def build_schedule(T: int, beta_start: float, beta_end: float) -> Schedule:
    if T < 1:
        raise InvalidRangeError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRangeError(
            f"Require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    sigma2[0] = 0.0
    for arr in (beta, alpha, alpha_bar, sigma2):
        arr.setflags(write=False)
    return Schedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma2_reverse=sigma2,
        params=ScheduleParams(T=T, beta_start=beta_start, beta_end=beta_end),
    )


def schedule_from_params(params: ScheduleParams) -> Schedule:
    return build_schedule(params.T, params.beta_start, params.beta_end)


def mean_from_eps(sched: Schedule, t: int, a_t, eps_hat) -> np.ndarray:
    """Reverse-step mean induced by a noise prediction.

    Broadcasts over leading batch dimensions; the last axis is the action.
    """
    sched._check_t(t)
    a_t = np.asarray(a_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if a_t.shape != eps_hat.shape:
        raise DimensionMismatchError(f"a_t shape {a_t.shape} != eps_hat shape {eps_hat.shape}")
    alpha_t = sched.alpha[t - 1]
    coef = (1.0 - alpha_t) / np.sqrt(1.0 - sched.alpha_bar[t - 1])
    return (a_t - coef * eps_hat) / np.sqrt(alpha_t)


def q_sample(sched: Schedule, a0, t, eps):
    """Forward diffusion a_t = sqrt(abar_t) a0 + sqrt(1 - abar_t) eps, t 1-based (array ok)."""
    t = np.asarray(t)
    ab = sched.alpha_bar[t - 1][..., None]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
