import logging

from sqlalchemy import desc

from . import ledger_run, paths, run_config
from ..models import Run, SweepPoint
from ..storage import write_csv

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["run_id", "command", "method", "alpha", "tau_hat", "return_mean", "return_se", "type1", "ood"]


def register(subparsers, parents):
    parser = subparsers.add_parser("report", parents=parents, help="collect every recorded sweep point into one CSV")
    parser.add_argument("--method", help="only points of this sampler")
    parser.add_argument("--limit", type=int, help="newest N points")
    parser.set_defaults(handler=report_command)


def report_command(args) -> int:
    """Long-format table of every sweep point in the run ledger"""
    cfg = run_config(args)
    run_paths = paths(args)
    with ledger_run(args, "report", cfg) as (db, run):
        query = db.query(SweepPoint, Run.command).join(Run, SweepPoint.run_id == Run.id)
        if args.method:
            query = query.filter(SweepPoint.method == args.method)
        query = query.order_by(desc(SweepPoint.created_at), desc(SweepPoint.id))
        if args.limit:
            query = query.limit(args.limit)
        rows = [
            {
                "run_id": point.run_id,
                "command": command,
                "method": point.method,
                "alpha": _blank(point.alpha),
                "tau_hat": _blank(point.tau_hat),
                "return_mean": point.return_mean,
                "return_se": point.return_se,
                "type1": _blank(point.type1),
                "ood": _blank(point.ood),
            }
            for point, command in query.all()
        ]
        write_csv(run_paths.reports / "report.csv", REPORT_COLUMNS, rows)
        logger.info(f"Wrote {len(rows)} sweep points to {run_paths.reports / 'report.csv'}")
    return 0


def _blank(value):
    return "" if value is None else value
