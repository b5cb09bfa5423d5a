"""Command-line entry point: ``cellfit simulate|identify|perturb|scan|report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

from . import experiments
from .config import ConfigError, load_config
from .data_io import ObservationFormatError
from .optimizer import LMAbort
from .solver import SolverError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORWARD = 3
EXIT_NOT_CONVERGED = 4

log = logging.getLogger("cellfit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellfit", description="Parameter identification for evolving-curve cell motility models.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "run the forward model and write the trajectory"),
        ("identify", "fit the free parameters to observations"),
        ("perturb", "replicated identification from noisy observations"),
        ("scan", "evaluate the objective on a 2-parameter grid"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, type=Path, help="TOML experiment file")
        sp.add_argument("--output", type=Path, help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="noise seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="worker processes (default: $CELLFIT_THREADS or 1)")
    rp = sub.add_parser("report", help="summarise a run directory")
    rp.add_argument("run_dir", nargs="?", type=Path, help="run directory")
    rp.add_argument("--config", type=Path, help="take the run directory from this config")
    rp.add_argument("--output", type=Path, help="run directory (same as the positional argument)")
    rp.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    rp.add_argument("--threads", type=int, help=argparse.SUPPRESS)
    return p


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("CELLFIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CELLFIT_THREADS must be an integer, got {env!r}") from None
    return 1


@contextmanager
def _mapper(threads: int):
    if threads <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=threads) as pool:
        yield pool.map


def _sidecar_log(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.INFO)
    root = logging.getLogger("cellfit")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _run(args) -> int:
    if args.command == "report":
        run_dir = args.run_dir or args.output
        if run_dir is None and args.config is not None:
            run_dir = load_config(args.config).output
        if run_dir is None:
            raise ConfigError("report needs a run directory or --config")
        print(experiments.report(run_dir), end="")
        return EXIT_OK

    cfg = load_config(args.config, output=args.output, seed=args.seed)
    threads = _threads(args.threads)
    handler = _sidecar_log(cfg.output)
    try:
        log.info("%s: config=%s output=%s threads=%d", args.command, args.config, cfg.output, threads)
        with _mapper(threads) as map_fn:
            if args.command == "simulate":
                summary = experiments.run_simulate(cfg)
                print(f"simulate: {summary['n_snapshots']} snapshots, final area {summary['final_area']:.6f}")
                return EXIT_OK
            if args.command == "identify":
                result, payload = experiments.run_identify(cfg, map_fn)
                params = ", ".join(f"{k}={v:.6g}" for k, v in payload["parameters"].items())
                print(f"identify: {result.termination} after {result.n_iterations} iterations "
                      f"({result.nfev} evaluations): {params}")
                if payload.get("relative_errors"):
                    errs = ", ".join(f"{e['error']:.4g}%" for e in payload["relative_errors"])
                    print(f"relative errors: {errs}")
                return EXIT_OK if result.converged else EXIT_NOT_CONVERGED
            if args.command == "perturb":
                runs, summary = experiments.run_perturb(cfg, map_fn)
                for s in summary:
                    means = ", ".join(f"{m:.4g}" for m in s["mean"])
                    print(f"perturb: {s['distribution']} k_n={s['k_n']}: mean relative errors [{means}]% "
                          f"({s['failed']} of {s['runs']} runs failed)")
                return EXIT_OK
            if args.command == "scan":
                rows = experiments.run_scan(cfg, map_fn)
                failed = sum(1 for r in rows if r[5] is None)
                print(f"scan: {len(rows)} rows written to {cfg.output / 'scan.csv'} ({failed} failed)")
                return EXIT_OK
    finally:
        logging.getLogger("cellfit").removeHandler(handler)
        handler.close()
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    for h in logging.getLogger().handlers:
        h.setLevel(logging.WARNING)  # INFO goes to the sidecar log only
    try:
        return _run(args)
    except (ConfigError, ObservationFormatError) as exc:
        print(f"cellfit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, LMAbort) as exc:
        print(f"cellfit: forward solve failed: {exc}", file=sys.stderr)
        return EXIT_FORWARD


if __name__ == "__main__":
    sys.exit(main())
