"""Command-line entry point.

    attrakt run --config exp.ini --out runs/a
    attrakt verify --out runs/a          # re-run one stage from persisted artifacts
    attrakt report --out runs/a

Exit codes: 0 success, 10 gate, 11 injectivity, 12 beta ladder,
13 settling, 14 integrator, 1 any other library error, 2 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import AttraktError
from .pipeline import STAGES, SUMMARY, reproduction_sweep, run_pipeline

log = logging.getLogger("attrakt")


def _thread_limit():
    raw = os.environ.get("ATTRAKT_THREADS")
    if not raw:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(raw)))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment file (defaults apply when omitted)")
    common.add_argument("--out", type=Path, help="run directory (overrides [output] directory)")
    common.add_argument("--seed", type=int, help="sampling seed (overrides [sampling] seed)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="attrakt", description="Attractor-preserving ODE surrogates.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage only")
    run = sub.add_parser("run", parents=[common], help="run all stages")
    run.add_argument("--stage-from", choices=STAGES, help="restart from this stage using persisted artifacts")
    sub.add_parser("report", parents=[common], help="print the summary of a run directory")
    sub.add_parser("sweep", parents=[common], help="reproduction error under joint refinement of n and tol")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.output["directory"] = str(args.out)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.output["directory"])
        if args.command == "report":
            path = out / SUMMARY
            if not path.exists():
                print(f"no summary in {out}", file=sys.stderr)
                return 1
            print(path.read_text())
            return 0
        with _thread_limit():
            if args.command == "sweep":
                rows = reproduction_sweep(cfg)
                out.mkdir(parents=True, exist_ok=True)
                text = json.dumps(rows, indent=2, sort_keys=True)
                (out / "sweep.json").write_text(text)
                for r in rows:
                    print(f"n={r['n']:5d} tol={r['tol']:.0e} sup error={r['sup_error']:.4g}")
                return 0
            if args.command == "run":
                art = run_pipeline(cfg, out, stage_from=args.stage_from)
            else:
                art = run_pipeline(cfg, out, stage_from=args.command, stage_to=args.command)
    except AttraktError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    for name in STAGES:
        if name in art.status:
            print(f"{name:10s} {art.status[name]}")
    if art.failure:
        print(f"failed at {art.failure['stage']}: {art.failure['message']}", file=sys.stderr)
    return art.exit_code


if __name__ == "__main__":
    sys.exit(main())
