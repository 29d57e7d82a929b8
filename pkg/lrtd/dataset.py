import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .exceptions import DimensionMismatchError, FormatError
from .schemas import DatasetMeta, StandardizationStats

logger = logging.getLogger(__name__)


@dataclass
class OfflineDataset:
    """Transition table (s, a, r, s', done) with optional advantage labels.

    ``modes`` is the generator's mixture component per row; it is kept for
    diagnostics only and never reaches training.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    meta: DatasetMeta
    modes: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.ascontiguousarray(self.states, dtype=np.float64)
        self.actions = np.ascontiguousarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.ascontiguousarray(self.next_states, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=np.uint8).reshape(-1)
        if self.modes is not None:
            self.modes = np.asarray(self.modes, dtype=np.uint8).reshape(-1)
        if self.advantages is not None:
            self.advantages = np.asarray(self.advantages, dtype=np.float64).reshape(-1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        n = self.states.shape[0]
        columns = {
            "actions": self.actions,
            "rewards": self.rewards,
            "next_states": self.next_states,
            "dones": self.dones,
            "modes": self.modes,
            "advantages": self.advantages,
            "labels": self.labels,
        }
        for name, col in columns.items():
            if col is not None and col.shape[0] != n:
                raise FormatError(f"Column '{name}' has {col.shape[0]} rows, expected {n}")
        if self.next_states.shape[1:] != self.states.shape[1:]:
            raise DimensionMismatchError("next_states and states differ in dimension")

    @property
    def n(self) -> int:
        return int(self.states.shape[0])

    @property
    def d_s(self) -> int:
        return int(self.states.shape[1])

    @property
    def d_a(self) -> int:
        return int(self.actions.shape[1])

    @property
    def stats(self) -> StandardizationStats:
        if self.meta.stats is None:
            raise FormatError("Dataset carries no standardization stats")
        return self.meta.stats

    def with_labels(self, advantages, labels, kappa: float, p: float) -> "OfflineDataset":
        meta = self.meta.copy(update={"labeled": True, "kappa": float(kappa), "p": float(p)})
        return replace(self, advantages=advantages, labels=labels, meta=meta)


def _column_stats(x: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    zero = std <= 1e-12
    if np.any(zero):
        logger.warning(f"Zero-variance {name} dimension(s) {np.flatnonzero(zero).tolist()}; using unit divisor")
        std = np.where(zero, 1.0, std)
    return mean, std


def standardize_array(x, mean, std) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - mean) / std


def destandardize_array(x, mean, std) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * std + mean


def standardize(raw: OfflineDataset, action_low=None, action_high=None) -> Tuple[OfflineDataset, StandardizationStats]:
    """Per-dimension zero-mean unit-variance states and actions; rewards untouched."""
    if raw.n == 0:
        raise FormatError("Cannot standardize an empty dataset")
    if raw.meta.standardized:
        raise FormatError("Dataset is already standardized")
    s_mean, s_std = _column_stats(raw.states, "state")
    a_mean, a_std = _column_stats(raw.actions, "action")
    if action_low is None:
        action_low = raw.meta.env_spec.get("action_low", (-np.inf,) * raw.d_a)
    if action_high is None:
        action_high = raw.meta.env_spec.get("action_high", (np.inf,) * raw.d_a)
    stats = StandardizationStats(
        state_mean=s_mean.tolist(),
        state_std=s_std.tolist(),
        action_mean=a_mean.tolist(),
        action_std=a_std.tolist(),
        action_low=[float(v) for v in action_low],
        action_high=[float(v) for v in action_high],
    )
    meta = raw.meta.copy(update={"standardized": True, "stats": stats})
    out = replace(
        raw,
        states=standardize_array(raw.states, s_mean, s_std),
        actions=standardize_array(raw.actions, a_mean, a_std),
        next_states=standardize_array(raw.next_states, s_mean, s_std),
        meta=meta,
    )
    return out, stats


def standardize_states(states, stats: StandardizationStats) -> np.ndarray:
    return standardize_array(states, stats.arrays("state_mean"), stats.arrays("state_std"))


def standardize_actions(actions, stats: StandardizationStats) -> np.ndarray:
    return standardize_array(actions, stats.arrays("action_mean"), stats.arrays("action_std"))


def destandardize_states(states, stats: StandardizationStats) -> np.ndarray:
    return destandardize_array(states, stats.arrays("state_mean"), stats.arrays("state_std"))
