from dataclasses import dataclass

import numpy as np
import pytest
import torch

from lrtd.dataset import OfflineDataset, standardize
from lrtd.envs import BanditEnv, gen_bandit_dataset
from lrtd.experiments import calibrate, calibration_states, generate_data, label_dataset, train_policy
from lrtd.labeling import OracleCritic, advantages, label_top_p
from lrtd.policy import TwoHeadPolicy
from lrtd.schedule import Schedule, build_schedule
from lrtd.schemas import BanditSpec, CalibrationResult, CriticConfig, DataConfig, RunConfig, TrainConfig
from lrtd.seeding import make_rng


@pytest.fixture(autouse=True)
def no_ledger_url(monkeypatch):
    monkeypatch.delenv("LRTD_DATABASE_URL", raising=False)
    monkeypatch.delenv("LRTD_THREADS", raising=False)


@pytest.fixture
def sched():
    return build_schedule(10, 1e-4, 2e-2)


@pytest.fixture
def policy():
    torch.manual_seed(0)
    return TwoHeadPolicy(2, 2, hidden=16, n_layers=2, temb_dim=8).freeze()


@pytest.fixture
def states():
    return make_rng(0, "test-states").standard_normal((64, 2))


@pytest.fixture
def bandit_raw():
    return gen_bandit_dataset(BanditSpec(), 400, make_rng(0, "data"))


@pytest.fixture
def bandit_labeled(bandit_raw):
    dataset, stats = standardize(bandit_raw)
    critic = OracleCritic(BanditEnv(BanditSpec()), stats)
    labels = label_top_p(advantages(critic, dataset), 0.2)
    return dataset.with_labels(labels.advantages, labels.labels, labels.kappa, labels.p)


@pytest.fixture
def oracle(bandit_labeled):
    return OracleCritic(BanditEnv(BanditSpec()), bandit_labeled.stats)


@dataclass
class TrainedBandit:
    cfg: RunConfig
    dataset: OfflineDataset
    policy: TwoHeadPolicy
    sched: Schedule
    critic: OracleCritic
    states_cal: np.ndarray


@pytest.fixture(scope="session")
def trained_bandit():
    """Full-size bandit pipeline: 10k rows, oracle labels, 40 epochs, T = 50."""
    cfg = RunConfig(data=DataConfig(n=10_000), critic=CriticConfig(oracle=True), train=TrainConfig(epochs=40))
    dataset, critic = label_dataset(generate_data(cfg), cfg)
    policy, sched = train_policy(dataset, cfg)
    return TrainedBandit(cfg, dataset, policy, sched, critic, calibration_states(dataset, cfg))


@pytest.fixture(scope="session")
def calibrated_bandit(trained_bandit) -> CalibrationResult:
    tb = trained_bandit
    cfg = tb.cfg.copy(update={"calibration": tb.cfg.calibration.copy(update={"n": 3000})})
    return calibrate(tb.policy, tb.sched, cfg, tb.states_cal, alpha=0.1)


def shared_noise(n: int, T: int, d_a: int = 2, seed: int = 0) -> np.ndarray:
    return make_rng(seed, "test-noise").standard_normal((n, T + 1, d_a))
