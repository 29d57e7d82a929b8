import logging

import numpy as np

from . import ledger_run, parse_tau, paths, require, run_config
from ..calibration import ensure_fingerprint, live_fingerprint
from ..dataset import standardize_states
from ..exceptions import ConfigError, DimensionMismatchError
from ..experiments import calibrate, calibration_states, load_trained, override
from ..sampler import destandardize, sample_batch, trace_rows
from ..seeding import make_rng
from ..storage import load_calibration, persist_calibration, write_csv, write_trace_csv

logger = logging.getLogger(__name__)


def register(subparsers, parents):
    cal = subparsers.add_parser("calibrate", parents=parents, help="calibrate the gate threshold under H0")
    cal.add_argument("--n", type=int, help="chains per fixed-point iteration")
    cal.add_argument("--K", type=int, help="fixed-point iterations")
    cal.set_defaults(handler=calibrate_command)

    sample = subparsers.add_parser("sample", parents=parents, help="draw actions with the calibrated sampler")
    sample.add_argument("--tau", type=parse_tau, help="explicit threshold (e.g. inf) instead of the calibrated one")
    sample.add_argument("--state", help="comma-separated env-scale state; default: calibration states")
    sample.add_argument("--count", type=int, default=16)
    sample.set_defaults(handler=sample_command)


def calibrate_command(args) -> int:
    """Calibrate tau for the configured sampler and write <out>/calibration"""
    cfg = run_config(args)
    cfg = override(cfg, "calibration", n=args.n, K=args.K)
    run_paths = paths(args)
    with ledger_run(args, "calibrate", cfg) as (db, run):
        dataset, policy, sched, critic = load_trained(run_paths)
        if cfg.q_compose.enabled and critic is None:
            raise ConfigError("Q-composition needs a critic; run label first")
        result = calibrate(policy, sched, cfg, calibration_states(dataset, cfg), critic)
        persist_calibration(result, run_paths.calibration)
        run.fingerprint = result.sampler_fingerprint
    return 0


def sample_command(args) -> int:
    """Sample env-scale actions and their evidence traces into <out>/reports"""
    cfg = run_config(args)
    run_paths = paths(args)
    with ledger_run(args, "sample", cfg) as (db, run):
        dataset, policy, sched, critic = load_trained(run_paths)
        fingerprint = live_fingerprint(policy, sched, cfg.gate, cfg.q_compose, critic)
        if args.tau is None:
            result = load_calibration(require(run_paths.calibration, "calibration"))
            ensure_fingerprint(result, fingerprint)
            tau = result.tau_hat
        else:
            tau = args.tau
        run.fingerprint = fingerprint

        if args.state:
            state = np.array([float(v) for v in args.state.split(",")])
            if state.size != dataset.d_s:
                raise DimensionMismatchError(f"--state has {state.size} values, environment has d_s={dataset.d_s}")
            states = np.repeat(standardize_states(state, dataset.stats)[None, :], args.count, axis=0)
        else:
            states = calibration_states(dataset, cfg)[: args.count]

        rng = make_rng(cfg.seed, "sample")
        noise = rng.standard_normal((states.shape[0], sched.T + 1, policy.d_a))
        a0, trace = sample_batch(policy, sched, cfg.gate, cfg.q_compose, tau, states, noise, critic)
        actions = destandardize(a0, dataset.stats)
        rows = [
            {"chain": i, **{f"a{j}": float(v) for j, v in enumerate(a)}, "llr_cum": float(trace.llr_cum[i])}
            for i, a in enumerate(actions)
        ]
        fields = ["chain"] + [f"a{j}" for j in range(policy.d_a)] + ["llr_cum"]
        write_csv(run_paths.reports / "samples.csv", fields, rows)
        write_trace_csv(run_paths.reports / "trace.csv", trace_rows(trace))
        logger.info(f"Sampled {len(rows)} actions at tau={tau}")
    return 0
