"""Shared-backbone two-head epsilon-prediction network and its weighted training loop."""

import copy
import hashlib
import logging
import math
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .dataset import OfflineDataset
from .exceptions import DimensionMismatchError, InvalidRangeError, LRTDError, TrainingDivergedError
from .schedule import Schedule, q_sample
from .schemas import TrainConfig
from .seeding import make_rng

logger = logging.getLogger(__name__)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half, 1))
    args = t.reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def mlp(in_dim: int, hidden: int, n_layers: int, out_dim: Optional[int] = None) -> nn.Sequential:
    layers: List[nn.Module] = []
    width = in_dim
    for _ in range(n_layers):
        layers += [nn.Linear(width, hidden), nn.SiLU()]
        width = hidden
    if out_dim is not None:
        layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


class TwoHeadPolicy(nn.Module):
    """Backbone phi(s, a_t, emb(t)) feeding an unconditional and a conditional head."""

    def __init__(self, d_s: int, d_a: int, hidden: int = 64, n_layers: int = 2, temb_dim: int = 16):
        super().__init__()
        self.d_s, self.d_a = d_s, d_a
        self.hidden, self.n_layers, self.temb_dim = hidden, n_layers, temb_dim
        self.backbone = mlp(d_s + d_a + temb_dim, hidden, n_layers)
        self.head_u = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, d_a))
        self.head_c = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, d_a))
        self.frozen = False
        self.train_history: List[float] = []

    def features(self, s: torch.Tensor, a_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t.to(s.dtype), self.temb_dim)
        return self.backbone(torch.cat([s, a_t, emb], dim=-1))

    def forward(self, s, a_t, t) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.features(s, a_t, t)
        return self.head_u(h), self.head_c(h)

    def freeze(self) -> "TwoHeadPolicy":
        self.requires_grad_(False)
        self.eval()
        self.frozen = True
        return self

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def init_policy(d_s: int, d_a: int, cfg: TrainConfig) -> TwoHeadPolicy:
    torch.manual_seed(cfg.seed)
    return TwoHeadPolicy(d_s, d_a, hidden=cfg.hidden, n_layers=cfg.n_layers, temb_dim=cfg.temb_dim)


def forward_heads(policy: TwoHeadPolicy, s, a_t, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Evaluate both heads on numpy inputs; accepts a single vector or a (B, d) batch."""
    if policy is None or not isinstance(policy, TwoHeadPolicy):
        raise LRTDError("Policy is not initialized")
    s = np.ascontiguousarray(s, dtype=np.float64)
    a_t = np.ascontiguousarray(a_t, dtype=np.float64)
    single = a_t.ndim == 1
    s2, a2 = np.atleast_2d(s), np.atleast_2d(a_t)
    if s2.shape[-1] != policy.d_s or a2.shape[-1] != policy.d_a:
        raise DimensionMismatchError(
            f"Expected state dim {policy.d_s} and action dim {policy.d_a}, got {s2.shape[-1]} and {a2.shape[-1]}"
        )
    if s2.shape[0] != a2.shape[0]:
        raise DimensionMismatchError(f"Batch sizes differ: {s2.shape[0]} states vs {a2.shape[0]} actions")
    dtype = policy.dtype
    with torch.no_grad():
        tt = torch.full((a2.shape[0],), float(t), dtype=dtype)
        eps_u, eps_c = policy(torch.as_tensor(s2, dtype=dtype), torch.as_tensor(a2, dtype=dtype), tt)
    eps_u = eps_u.double().numpy()
    eps_c = eps_c.double().numpy()
    if single:
        return eps_u[0], eps_c[0]
    return eps_u, eps_c


def class_balance_weight(c, rho_hat: float, eps_w: float):
    if not 0.0 < rho_hat < 1.0:
        raise InvalidRangeError(f"rho_hat must be in (0, 1), got {rho_hat}")
    c = np.asarray(c)
    w = np.where(c == 1, 1.0 / (2.0 * rho_hat + eps_w), 1.0 / (2.0 * (1.0 - rho_hat) + eps_w))
    return float(w) if w.ndim == 0 else w


def soft_positive_weight(c, A, kappa: float, tau_A: float, u_max: float):
    c = np.asarray(c)
    A = np.asarray(A, dtype=np.float64)
    bonus = np.minimum(np.maximum(0.0, (A - kappa) / tau_A), u_max - 1.0)
    u = 1.0 + (c == 1) * bonus
    return float(u) if u.ndim == 0 else u


def batch_weights(labels, advantages, rho_hat: float, cfg: TrainConfig, kappa: float = 0.0) -> np.ndarray:
    """Normalized per-sample weights; their mean is 1."""
    labels = np.asarray(labels).reshape(-1)
    advantages = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if labels.size == 0:
        raise InvalidRangeError("Empty batch")
    if labels.shape != advantages.shape:
        raise DimensionMismatchError("labels and advantages differ in length")
    if cfg.weighting == "uniform":
        return np.ones(labels.size)
    raw = class_balance_weight(labels, rho_hat, cfg.eps_w) * soft_positive_weight(
        labels, advantages, kappa, cfg.tau_A, cfg.u_max
    )
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    return raw / raw.mean()


def weighted_eps_loss(
    policy: TwoHeadPolicy,
    sched: Schedule,
    s: torch.Tensor,
    a0: torch.Tensor,
    labels: np.ndarray,
    advantages: np.ndarray,
    t: np.ndarray,
    eps: torch.Tensor,
    rho_hat: float,
    cfg: TrainConfig,
    kappa: float = 0.0,
) -> torch.Tensor:
    """Weighted epsilon-prediction loss of both heads on one batch.

    The unconditional head sees every row; the conditional head only the
    c = 1 rows, with weights normalized within that subset.
    """
    dtype = a0.dtype
    a_t = torch.as_tensor(q_sample(sched, a0.detach().cpu().numpy(), t, eps.detach().cpu().numpy()), dtype=dtype)
    eps_u, eps_c = policy(s, a_t, torch.as_tensor(t, dtype=dtype))

    w_u = torch.as_tensor(batch_weights(labels, advantages, rho_hat, cfg, kappa), dtype=dtype)
    loss = (w_u * ((eps_u - eps) ** 2).sum(-1)).mean()

    pos = np.flatnonzero(np.asarray(labels) == 1)
    if pos.size:
        w_c = torch.as_tensor(batch_weights(labels[pos], advantages[pos], rho_hat, cfg, kappa), dtype=dtype)
        idx = torch.as_tensor(pos)
        loss = loss + (w_c * ((eps_c[idx] - eps[idx]) ** 2).sum(-1)).mean()
    return loss


def train(
    policy_init: TwoHeadPolicy,
    dataset: OfflineDataset,
    sched: Schedule,
    cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> TwoHeadPolicy:
    """Train both heads jointly and return a frozen copy of the policy."""
    if dataset.labels is None or dataset.advantages is None:
        raise LRTDError("Training requires a labeled dataset", exit_code=2)
    if not dataset.meta.standardized:
        raise LRTDError("Training requires a standardized dataset", exit_code=2)
    rng = rng if rng is not None else make_rng(cfg.seed, "train")
    policy = copy.deepcopy(policy_init)
    policy.requires_grad_(True)
    policy.train()
    dtype = policy.dtype

    labels = dataset.labels.astype(np.int64)
    advantages = dataset.advantages
    kappa = float(dataset.meta.kappa or 0.0)
    states = torch.as_tensor(dataset.states, dtype=dtype)
    actions = torch.as_tensor(dataset.actions, dtype=dtype)
    rho_hat = cfg.rho_init if cfg.rho_init is not None else float(np.clip(labels.mean(), 1e-3, 1 - 1e-3))

    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    history: List[float] = []
    n = dataset.n
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_rate = float(labels[idx].mean())
            rho_hat = float(np.clip(cfg.ema_decay * rho_hat + (1.0 - cfg.ema_decay) * batch_rate, 1e-6, 1 - 1e-6))
            t = rng.integers(1, sched.T + 1, size=idx.size)
            eps = torch.as_tensor(rng.standard_normal((idx.size, dataset.d_a)), dtype=dtype)
            loss = weighted_eps_loss(
                policy, sched, states[idx], actions[idx], labels[idx], advantages[idx], t, eps, rho_hat, cfg, kappa
            )
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite loss at epoch {epoch + 1}, batch starting {start} (rho_hat={rho_hat:.4f}, lr={cfg.learning_rate})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * idx.size
            count += idx.size
        history.append(total / max(count, 1))
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: loss={history[-1]:.5f} rho_hat={rho_hat:.3f}")

    policy.train_history = history
    return policy.freeze()


def flat_parameters(module: nn.Module) -> np.ndarray:
    """All parameters in declaration order as one little-endian float32 vector."""
    with torch.no_grad():
        parts = [p.detach().reshape(-1).to(torch.float32).cpu().numpy() for p in module.parameters()]
    flat = np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)
    return flat.astype("<f4", copy=False)


def load_flat_parameters(module: nn.Module, flat: np.ndarray) -> None:
    flat = np.asarray(flat, dtype=np.float32).reshape(-1)
    expected = sum(p.numel() for p in module.parameters())
    if flat.size != expected:
        raise DimensionMismatchError(f"Weight vector has {flat.size} values, model expects {expected}")
    offset = 0
    with torch.no_grad():
        for p in module.parameters():
            n = p.numel()
            p.copy_(torch.as_tensor(flat[offset:offset + n]).reshape(p.shape).to(p.dtype))
            offset += n


def parameter_digest(module: nn.Module) -> str:
    """sha256 of the float32 weight bytes; identifies a checkpoint."""
    return hashlib.sha256(flat_parameters(module).tobytes()).hexdigest()
