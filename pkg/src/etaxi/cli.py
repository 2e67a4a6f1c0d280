"""``etaxi`` command line.

    etaxi synth-demand --out city/
    etaxi ingest --config city/config.yaml
    etaxi build-network --config city/config.yaml
    etaxi estimate --config city/config.yaml
    etaxi solve --config city/config.yaml [--strict-paper]
    etaxi simulate --config city/config.yaml [--gas-sweep]
    etaxi report --config city/config.yaml

Exit codes: 0 ok, 2 configuration error, 3 data or artifact error,
4 the solved start state has no feasible action.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE = 0, 2, 3, 4
STAGES = ("ingest", "build-network", "estimate", "solve", "simulate", "report")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="etaxi", description="Electric-taxi service strategy pipeline.")
    ap.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", default=None, help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. solver.horizon_min=240")
        p.add_argument("--strict-paper", action="store_true",
                       help="charge the bare trip energy against delivery rewards (suffixes outputs)")
        p.add_argument("--log-level", default=None)
        if name == "simulate":
            p.add_argument("--gas-sweep", action="store_true",
                           help="also solve and roll out the gasoline taxi at each simulation.gas_prices")
    p = sub.add_parser("synth-demand", help="write the synthetic 25-junction city fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    return ap


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(max(1, n))


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    # thread caps only take effect before numpy is first imported
    _limit_threads(args.threads)

    from . import pipeline
    from .artifacts import ArtifactError
    from .config import ConfigError, load_config
    from .ingest import SchemaError
    from .mdp import DeadStateError
    from .network import NoPathError

    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    log = logging.getLogger("etaxi")
    try:
        if args.command == "synth-demand":
            summary = pipeline.run_synth(args.out, args.seed)
        else:
            overrides = list(args.overrides)
            if args.strict_paper:
                overrides.append("solver.strict_paper=true")
            cfg = load_config(args.config, overrides)
            log.setLevel(args.log_level or cfg["logging"]["level"])
            run = {"ingest": pipeline.run_ingest, "build-network": pipeline.run_build_network,
                   "estimate": pipeline.run_estimate, "solve": pipeline.run_solve,
                   "report": pipeline.run_report}.get(args.command)
            if args.command == "simulate":
                summary = pipeline.run_simulate(cfg, args.gas_sweep)
            else:
                summary = run(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DeadStateError as exc:
        log.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    except (ArtifactError, SchemaError, NoPathError, OSError, ValueError, KeyError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    print(json.dumps(summary, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
