import logging
from typing import List

from . import finite_or_none, ledger_run, paths, require, run_config
from ..exceptions import ConfigError
from ..experiments import evaluate, load_trained, override, sweep
from ..metrics import suggest_alpha_grid
from ..models import SweepPoint
from ..schemas import SweepRow
from ..storage import load_calibration, read_json, write_sweep_csv

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    ev = subparsers.add_parser("evaluate", parents=parents, help="return, Type-I and OOD for the calibrated sampler and baselines")
    ev.add_argument("--seeds", type=int)
    ev.add_argument("--episodes", type=int)
    ev.set_defaults(handler=evaluate_command)

    sw = subparsers.add_parser("sweep", parents=parents, help="calibrate and evaluate across a grid of alpha levels")
    sw.add_argument("--alphas", type=lambda v: [float(a) for a in v.split(",")], help="comma-separated levels")
    sw.add_argument("--auto-grid", action="store_true", dest="auto_grid", help="grid below the alpha_max in reports/bounds.json")
    sw.add_argument("--seeds", type=int)
    sw.add_argument("--episodes", type=int)
    sw.set_defaults(handler=sweep_command)


def record_rows(db, run, rows: List[SweepRow]) -> None:
    for row in rows:
        db.add(SweepPoint(
            run_id=run.id,
            method=row.method,
            alpha=finite_or_none(row.alpha),
            tau_hat=finite_or_none(row.tau_hat),
            return_mean=row.return_mean,
            return_se=row.return_se,
            type1=finite_or_none(row.type1),
            ood=finite_or_none(row.ood),
        ))
    db.commit()


def evaluate_command(args) -> int:
    """Evaluate the calibrated sampler next to the fixed-threshold baselines"""
    cfg = run_config(args)
    cfg = override(cfg, "evaluation", seeds=args.seeds, episodes=args.episodes)
    run_paths = paths(args)
    with ledger_run(args, "evaluate", cfg) as (db, run):
        dataset, policy, sched, critic = load_trained(run_paths)
        calibration = load_calibration(require(run_paths.calibration, "calibration"))
        rows = evaluate(policy, sched, dataset, cfg, calibration, critic)
        run.fingerprint = calibration.sampler_fingerprint
        write_sweep_csv(run_paths.reports / "evaluate.csv", rows)
        record_rows(db, run, rows)
    return 0


def alpha_grid(args, cfg, run_paths) -> List[float]:
    if args.alphas:
        return args.alphas
    if not args.auto_grid:
        return list(cfg.evaluation.alpha_grid)
    bounds = read_json(require(run_paths.reports / "bounds.json", "theory report"))
    alpha_max_hat = bounds.get("alpha_max")
    if alpha_max_hat is None:
        raise ConfigError("bounds.json has no alpha_max; the return-gap check needs a bandit run")
    grid = suggest_alpha_grid(alpha_max_hat)
    logger.info(f"Suggested alpha grid from alpha_max={alpha_max_hat:.4g}: {grid}")
    return grid


def sweep_command(args) -> int:
    """Risk-return sweep written to <out>/reports/sweep.csv"""
    cfg = run_config(args)
    cfg = override(cfg, "evaluation", seeds=args.seeds, episodes=args.episodes)
    run_paths = paths(args)
    with ledger_run(args, "sweep", cfg) as (db, run):
        dataset, policy, sched, critic = load_trained(run_paths)
        if cfg.q_compose.enabled and critic is None:
            raise ConfigError("Q-composition needs a critic; run label first")
        rows = sweep(policy, sched, dataset, cfg, alpha_grid(args, cfg, run_paths), critic)
        write_sweep_csv(run_paths.reports / "sweep.csv", rows)
        record_rows(db, run, rows)
    return 0
