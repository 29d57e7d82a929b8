import logging

from . import ledger_run, paths, require, run_config
from ..experiments import generate_data, label_dataset, override
from ..labeling import Critic
from ..storage import config_digest, load_dataset, persist_critic, persist_dataset, write_json

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    gen = subparsers.add_parser("gen-data", parents=parents, help="generate a synthetic offline dataset")
    gen.add_argument("--env", choices=["bandit", "pointmass"])
    gen.add_argument("--n", type=int, help="bandit rows")
    gen.add_argument("--episodes", type=int, help="point-mass episodes")
    gen.set_defaults(handler=gen_data)

    label = subparsers.add_parser("label", parents=parents, help="standardize, fit the critic and label top-p rows")
    label.add_argument("--p", type=float, help="fraction of rows labeled good")
    label.add_argument("--oracle-critic", action="store_true", dest="oracle_critic", help="use the analytic reward as critic")
    label.set_defaults(handler=label_rows)


def gen_data(args) -> int:
    """Generate the raw dataset into <out>/data/raw"""
    cfg = run_config(args)
    cfg = override(cfg, "data", env=args.env, n=args.n, episodes=args.episodes)
    run_paths = paths(args)
    with ledger_run(args, "gen-data", cfg):
        dataset = generate_data(cfg)
        persist_dataset(dataset, run_paths.raw)
    return 0


def label_rows(args) -> int:
    """Standardize the raw dataset, fit the critic and write the labeled dataset"""
    cfg = run_config(args)
    cfg = override(cfg, "critic", p=args.p, oracle=True if args.oracle_critic else None)
    run_paths = paths(args)
    with ledger_run(args, "label", cfg):
        raw = load_dataset(require(run_paths.raw, "raw dataset"))
        dataset, critic = label_dataset(raw, cfg)
        persist_dataset(dataset, run_paths.dataset)
        if isinstance(critic, Critic):
            persist_critic(critic, run_paths.critic, config_digest(cfg.critic))
        else:
            run_paths.critic.mkdir(parents=True, exist_ok=True)
            write_json(run_paths.critic / "oracle.json", {"kind": "oracle", "env": raw.meta.env})
    return 0
