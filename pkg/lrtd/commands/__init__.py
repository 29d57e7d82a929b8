"""CLI subcommands.

Every module exposes ``register(subparsers, parents)`` adding its commands;
each command stores its handler as ``args.handler``.
"""

import argparse
import json
import logging
import math
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Tuple

from ..database import ledger_session
from ..exceptions import ConfigError, LRTDError
from ..experiments import RunPaths, load_config, override
from ..models import Run
from ..schemas import RunConfig
from ..seeding import stream_keys
from ..storage import write_manifest

logger = logging.getLogger(__name__)


def parse_gate_window(value: str) -> Tuple[int, int]:
    try:
        start, end = (int(v) for v in value.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"gate window must look like A:B, got '{value}'")
    return start, end


def parse_q_compose(value: str) -> dict:
    """off | uncond | lrt | blend | blend:R"""
    if value == "off":
        return {"enabled": False}
    if value == "uncond":
        return {"enabled": True, "center": "unconditional"}
    if value == "lrt":
        return {"enabled": True, "center": "lrt"}
    if value == "blend":
        return {"enabled": True, "center": "blend", "blend_rho": None}
    if value.startswith("blend:"):
        try:
            rho = float(value.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"blend weight must be a number, got '{value}'")
        return {"enabled": True, "center": "blend", "blend_rho": rho}
    raise argparse.ArgumentTypeError(f"--q-compose must be off, uncond, lrt or blend:R, got '{value}'")


def parse_tau(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"tau must be a number or inf, got '{value}'")


def common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--alpha", type=float, help="target Type-I level")
    parser.add_argument("--beta-max", type=float, dest="beta_max")
    parser.add_argument("--delta", type=float, help="soft gate temperature")
    parser.add_argument("--gate", choices=["soft", "hard"])
    parser.add_argument("--gate-window", type=parse_gate_window, dest="gate_window", help="gated steps A:B (inclusive)")
    parser.add_argument("--q-compose", type=parse_q_compose, dest="q_compose", help="off, uncond, lrt or blend:R")
    parser.add_argument("--lambda-max", type=float, dest="lambda_max")
    parser.add_argument("--grad-clip", type=float, dest="grad_clip")
    parser.add_argument("--out", default="run", help="run directory")
    return parser


def run_config(args) -> RunConfig:
    """The config file merged with flag overrides."""
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.copy(update={"seed": args.seed})
    cfg = override(cfg, "calibration", alpha=args.alpha)
    cfg = override(
        cfg, "gate",
        beta_max=args.beta_max, delta=args.delta, gate_kind=args.gate,
        gate_window=list(args.gate_window) if args.gate_window else None,
    )
    q_changes = dict(args.q_compose or {})
    blend_adaptive = "blend_rho" in q_changes and q_changes["blend_rho"] is None
    cfg = override(cfg, "q_compose", lambda_max=args.lambda_max, grad_clip=args.grad_clip, **q_changes)
    if blend_adaptive:
        cfg = cfg.copy(update={"q_compose": cfg.q_compose.copy(update={"blend_rho": None})})
    return cfg


def paths(args) -> RunPaths:
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    return RunPaths(root)


def finite_or_none(value: Optional[float]) -> Optional[float]:
    return value if value is not None and math.isfinite(value) else None


@contextmanager
def ledger_run(args, command: str, cfg: RunConfig) -> Iterator[Tuple[object, Run]]:
    """Record the command in the run ledger; failures roll back and mark the run failed."""
    with ledger_session(args.out) as db:
        run = Run(
            run_dir=str(Path(args.out).resolve()),
            command=command,
            seed=cfg.seed,
            config_json=json.dumps(cfg.dict(), sort_keys=True),
            status="running",
        )
        db.add(run)
        db.commit()
        db.refresh(run)
        try:
            yield db, run
            run.status = "succeeded"
            db.commit()
            write_manifest(
                args.out, getattr(args, "argv", []), cfg, cfg.seed,
                {"command": command, "fingerprint": run.fingerprint, "streams": stream_keys(cfg.seed)},
            )
            logger.info(f"✅ {command} finished (run {run.id})")
        except LRTDError as e:
            db.rollback()
            _mark_failed(db, run, e.detail)
            raise
        except Exception as e:
            db.rollback()
            _mark_failed(db, run, str(e))
            raise LRTDError(f"Failed to {command}: {str(e)}") from e


def _mark_failed(db, run: Run, detail: str) -> None:
    run.status = "failed"
    run.error = detail
    db.commit()
    logger.error(f"❌ {run.command} failed: {detail}")


def require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"No {what} at {path}; run the earlier pipeline step first")
    return path
