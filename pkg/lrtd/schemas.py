from pydantic import BaseModel, Field, validator
from typing import Optional, List, Tuple, Dict, Any
import math

import numpy as np

FORMAT_VERSION = 1


# Schema for the noise schedule parameters
class ScheduleParams(BaseModel):
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @validator("T")
    def validate_T(cls, v):
        if v < 1:
            raise ValueError("T must be >= 1")
        return v


# Schema for the two-head training loop
class TrainConfig(BaseModel):
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    ema_decay: float = 0.99
    rho_init: Optional[float] = None  # None: dataset-global positive rate
    tau_A: float = 1.0
    u_max: float = 3.0
    eps_w: float = 1e-8
    weighting: str = "balanced"
    hidden: int = 64
    n_layers: int = 2
    temb_dim: int = 16
    seed: int = 0

    @validator("tau_A")
    def validate_tau_A(cls, v):
        if v <= 0:
            raise ValueError("tau_A must be > 0")
        return v

    @validator("u_max")
    def validate_u_max(cls, v):
        if v < 1:
            raise ValueError("u_max must be >= 1")
        return v

    @validator("eps_w")
    def validate_eps_w(cls, v):
        if v <= 0:
            raise ValueError("eps_w must be > 0")
        return v

    @validator("ema_decay")
    def validate_ema_decay(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("ema_decay must be in [0, 1]")
        return v

    @validator("rho_init")
    def validate_rho_init(cls, v):
        if v is not None and not 0.0 < v < 1.0:
            raise ValueError("rho_init must be in (0, 1)")
        return v

    @validator("weighting")
    def validate_weighting(cls, v):
        valid = ["balanced", "uniform"]
        if v not in valid:
            raise ValueError(f'Weighting must be one of: {", ".join(valid)}')
        return v

    @validator("epochs", "batch_size", "hidden", "n_layers", "temb_dim")
    def validate_non_negative(cls, v, field):
        if v < 0 or (field.name != "epochs" and v == 0):
            raise ValueError(f"{field.name} out of range: {v}")
        return v


# Schema for the expectile critic and labeling step
class CriticConfig(BaseModel):
    gamma: float = 0.99
    expectile: float = 0.7
    steps: int = 2000
    learning_rate: float = 3e-4
    batch_size: int = 256
    hidden: int = 64
    p: float = 0.2
    oracle: bool = False
    seed: int = 0

    @validator("expectile", "p")
    def validate_open_unit(cls, v, field):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{field.name} must be in (0, 1)")
        return v

    @validator("gamma")
    def validate_gamma(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        return v


class GateConfig(BaseModel):
    beta_max: float = 1.0
    delta: float = 1.0
    gate_kind: str = "soft"
    dmu_clamp: Optional[float] = None
    gate_window: Optional[Tuple[int, int]] = None  # inclusive (start, end), 1-based
    t1_variance: str = "clipped"

    @validator("beta_max")
    def validate_beta_max(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("beta_max must be in [0, 1]")
        return v

    @validator("delta")
    def validate_delta(cls, v):
        if v <= 0:
            raise ValueError("delta must be > 0")
        return v

    @validator("gate_kind")
    def validate_gate_kind(cls, v):
        valid = ["soft", "hard"]
        if v not in valid:
            raise ValueError(f'Gate kind must be one of: {", ".join(valid)}')
        return v

    @validator("dmu_clamp")
    def validate_dmu_clamp(cls, v):
        if v is not None and v < 0:
            raise ValueError("dmu_clamp must be >= 0")
        return v

    @validator("gate_window")
    def validate_gate_window(cls, v):
        if v is not None:
            start, end = v
            if start < 1 or end < start:
                raise ValueError("gate_window must satisfy 1 <= start <= end")
        return v

    @validator("t1_variance")
    def validate_t1_variance(cls, v):
        valid = ["clipped", "floor"]
        if v not in valid:
            raise ValueError(f't1_variance must be one of: {", ".join(valid)}')
        return v

    def gated(self, t: int) -> bool:
        if self.gate_window is None:
            return True
        return self.gate_window[0] <= t <= self.gate_window[1]

    def gated_steps(self, T: int) -> int:
        if self.gate_window is None:
            return T
        return max(0, min(T, self.gate_window[1]) - self.gate_window[0] + 1)


class QComposeConfig(BaseModel):
    enabled: bool = False
    lambda_max: float = 0.1
    grad_clip: float = 5.0
    center: str = "lrt"
    blend_rho: Optional[float] = None  # None with center=blend: adaptive rho = beta_t / beta_max
    llr_after_compose: bool = False
    fd_step: float = 1e-4

    @validator("lambda_max")
    def validate_lambda_max(cls, v):
        if v < 0:
            raise ValueError("lambda_max must be >= 0")
        return v

    @validator("grad_clip")
    def validate_grad_clip(cls, v):
        if v <= 0:
            raise ValueError("grad_clip must be > 0")
        return v

    @validator("center")
    def validate_center(cls, v):
        valid = ["unconditional", "lrt", "blend"]
        if v not in valid:
            raise ValueError(f'Center must be one of: {", ".join(valid)}')
        return v

    @validator("blend_rho")
    def validate_blend_rho(cls, v):
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("blend_rho must be in [0, 1]")
        return v


class CalibrationConfig(BaseModel):
    alpha: float = 0.1
    n: int = 4000
    K: int = 6
    momentum: float = 0.5
    zeta: float = 0.05
    n_states: int = 1000

    @validator("alpha", "zeta")
    def validate_open_unit(cls, v, field):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{field.name} must be in (0, 1)")
        return v

    @validator("n")
    def validate_n(cls, v):
        if v < 100:
            raise ValueError("n must be >= 100")
        return v

    @validator("K")
    def validate_K(cls, v):
        if v < 1:
            raise ValueError("K must be >= 1")
        return v

    @validator("momentum")
    def validate_momentum(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        return v


class EvaluationConfig(BaseModel):
    seeds: int = 5
    episodes: int = 10
    type1_chains: int = 5000
    ood_k: int = 50
    ood_q: float = 95.0
    ood_queries: int = 1000
    alpha_grid: List[float] = [0.20, 0.10, 0.05, 0.02, 0.01]

    @validator("ood_q")
    def validate_ood_q(cls, v):
        if not 0.0 < v < 100.0:
            raise ValueError("ood_q must be in (0, 100)")
        return v

    @validator("alpha_grid")
    def validate_alpha_grid(cls, v):
        if not v or any(not 0.0 < a < 1.0 for a in v):
            raise ValueError("alpha_grid must be a nonempty list of values in (0, 1)")
        return v


class DataConfig(BaseModel):
    env: str = "bandit"
    n: int = 10000
    episodes: int = 500
    p_good: float = 0.2

    @validator("env")
    def validate_env(cls, v):
        valid = ["bandit", "pointmass"]
        if v not in valid:
            raise ValueError(f'Environment must be one of: {", ".join(valid)}')
        return v


# Schema for a full experiment configuration file
class RunConfig(BaseModel):
    seed: int = 0
    data: DataConfig = DataConfig()
    critic: CriticConfig = CriticConfig()
    train: TrainConfig = TrainConfig()
    schedule: ScheduleParams = ScheduleParams()
    gate: GateConfig = GateConfig()
    q_compose: QComposeConfig = QComposeConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    evaluation: EvaluationConfig = EvaluationConfig()


# Schema for dataset standardization statistics
class StandardizationStats(BaseModel):
    state_mean: List[float]
    state_std: List[float]
    action_mean: List[float]
    action_std: List[float]
    action_low: List[float]
    action_high: List[float]

    def arrays(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=np.float64)


# Schema for dataset meta.json
class DatasetMeta(BaseModel):
    format_version: int = FORMAT_VERSION
    env: str
    env_spec: Dict[str, Any] = {}
    seed: int
    n_rows: int
    d_s: int
    d_a: int
    standardized: bool = False
    stats: Optional[StandardizationStats] = None
    labeled: bool = False
    kappa: Optional[float] = None
    p: Optional[float] = None


# Schema for checkpoint model.json
class CheckpointMeta(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: str
    d_s: int
    d_a: int
    hidden: int
    n_layers: int
    temb_dim: int = 0
    activation: str = "silu"
    schedule: Optional[ScheduleParams] = None
    config_digest: str = ""
    param_count: int
    content_hash: str = ""
    extra: Dict[str, Any] = {}

    @validator("kind")
    def validate_kind(cls, v):
        valid = ["policy", "critic"]
        if v not in valid:
            raise ValueError(f'Checkpoint kind must be one of: {", ".join(valid)}')
        return v


class CalibrationResult(BaseModel):
    format_version: int = FORMAT_VERSION
    tau_hat: float
    alpha: float
    n: int
    K: int
    momentum: float
    zeta: float = 0.05
    dkw_epsilon: float
    sampler_fingerprint: str
    tau_history: List[float] = []
    converged: bool = True
    h0_llrs: List[float] = Field(default_factory=list)

    @property
    def llrs(self) -> np.ndarray:
        return np.asarray(self.h0_llrs, dtype=np.float64)


class OODReport(BaseModel):
    rate: float
    k: int
    q: float
    flags: List[bool]
    radii_threshold: List[float]
    action_distance: str = "min"

    @validator("k")
    def validate_k(cls, v):
        if v < 1:
            raise ValueError("k must be >= 1")
        return v


class TailRow(BaseModel):
    x: float
    empirical: float
    bound: float
    violated: bool


class TailReport(BaseModel):
    V: float
    n: int
    dkw_slack: float
    rows: List[TailRow]

    @property
    def violations(self) -> List[TailRow]:
        return [r for r in self.rows if r.violated]


class GapReport(BaseModel):
    delta_qhat: float
    delta_qtrue: float
    eta_lrt: float
    eta_q: float
    eps_in: float
    eps_out: float
    nu: float
    lower_bound: float
    slack: float
    holds: bool


class BoundReport(BaseModel):
    union_bound: float
    alpha_max: Optional[float] = None
    alpha_max_window: Optional[float] = None
    alpha_max_empirical_slack: Optional[float] = None
    variance_proxy: float
    displacement_bounds: List[float] = []
    B_step: Optional[float] = None
    tail_violations: List[TailRow] = []
    checks: Dict[str, bool] = {}
    details: Dict[str, Any] = {}


class MomentReport(BaseModel):
    draws: int
    var_empirical: float
    var_theory: float
    var_rel_error: float
    mean_empirical: float
    mean_bound: float
    holds: bool


class NPPowerReport(BaseModel):
    tau: float
    size_lrt: float
    power_lrt: float
    alternative_sizes: List[float]
    alternative_powers: List[float]
    tolerance: float
    dominated: bool


class CouplingReport(BaseModel):
    deltas: List[float]
    fractions: List[float]
    tol: float

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.fractions, self.fractions[1:]))


# Schema for one row of the risk-return sweep
class SweepRow(BaseModel):
    alpha: float
    tau_hat: float
    return_mean: float
    return_se: float
    type1: float
    ood: float
    method: str = "lrt"

    @validator("type1", "ood")
    def validate_rate(cls, v):
        if not (0.0 <= v <= 1.0 or math.isnan(v)):
            raise ValueError("rates must be in [0, 1]")
        return v


# Schema for the one-step bandit environment
class BanditSpec(BaseModel):
    d_s: int = 2
    d_a: int = 2
    W: List[List[float]] = [[1.0, 0.5], [-0.5, 1.0]]
    background_std: float = 0.5
    good_std: float = 0.1
    p_good: float = 0.2
    action_low: List[float] = [-2.0, -2.0]
    action_high: List[float] = [2.0, 2.0]
    support_radius: float = 3.0

    @validator("p_good")
    def validate_p_good(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("p_good must be in [0, 1)")
        return v


# Schema for the multi-step point-mass environment
class PointMassSpec(BaseModel):
    d_s: int = 2
    d_a: int = 2
    dt: float = 0.1
    horizon: int = 20
    behavior_noise: float = 0.3
    gamma: float = 0.99
    action_low: List[float] = [-1.0, -1.0]
    action_high: List[float] = [1.0, 1.0]
    init_low: float = -1.0
    init_high: float = 1.0

    @validator("horizon")
    def validate_horizon(cls, v):
        if v < 1:
            raise ValueError("horizon must be >= 1")
        return v
