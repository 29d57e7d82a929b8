import logging

from . import ledger_run, paths, require, run_config
from ..experiments import check_theory, load_trained
from ..storage import load_calibration, write_json

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    parser = subparsers.add_parser("check-theory", parents=parents, help="evaluate the executable bounds on H0 chains")
    parser.add_argument("--strict", action="store_true", help="exit 1 when any check fails")
    parser.set_defaults(handler=check_theory_command)


def check_theory_command(args) -> int:
    cfg = run_config(args)
    run_paths = paths(args)
    with ledger_run(args, "check-theory", cfg) as (db, run):
        dataset, policy, sched, critic = load_trained(run_paths)
        calibration = load_calibration(require(run_paths.calibration, "calibration"))
        report = check_theory(policy, sched, dataset, cfg, calibration, critic)
        run.fingerprint = calibration.sampler_fingerprint
        write_json(run_paths.reports / "bounds.json", report)
    failed = [name for name, ok in report.checks.items() if not ok]
    if failed:
        logger.warning(f"❌ {len(failed)} check(s) failed: {', '.join(failed)}")
        return 1 if args.strict else 0
    return 0
