import logging

from . import ledger_run, paths, require, run_config
from ..experiments import override, train_policy
from ..storage import config_digest, load_dataset, persist_policy

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    parser = subparsers.add_parser("train", parents=parents, help="train the two-head diffusion policy")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--weighting", choices=["balanced", "uniform"])
    parser.set_defaults(handler=train_command)


def train_command(args) -> int:
    """Train both heads on the labeled dataset and write <out>/policy"""
    cfg = run_config(args)
    cfg = override(cfg, "train", epochs=args.epochs, weighting=args.weighting)
    run_paths = paths(args)
    with ledger_run(args, "train", cfg) as (db, run):
        dataset = load_dataset(require(run_paths.dataset, "labeled dataset"))
        policy, sched = train_policy(dataset, cfg)
        meta = persist_policy(policy, run_paths.policy, sched.params, config_digest(cfg.train))
        run.fingerprint = meta.content_hash
    return 0
