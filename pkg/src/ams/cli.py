"""Command line entry point: run, suite, replay-trace, report."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import AMSError
from .harness import (
    TraceWriter,
    configure_logging,
    get_mode,
    load_scenario,
    replay_trace,
    report,
    run_episode,
    run_suite,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ams", description="Action-management runtime on a simulated arm.")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one episode and print its report as JSON")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--mode", default="ams", help="baseline, context, exception or ams")
    run.add_argument("--seed", type=int, default=None, help="reseed layout and faults")
    run.add_argument("--trace-out", type=Path, default=None)

    suite = sub.add_parser("suite", help="run a seeded suite and write CSVs")
    suite.add_argument("--config", required=True, type=Path)
    suite.add_argument("--out", required=True, type=Path)
    suite.add_argument("--workers", type=int, default=None)

    rt = sub.add_parser("replay-trace", help="re-execute a trace and verify it")
    rt.add_argument("trace", type=Path)

    rep = sub.add_parser("report", help="print a suite summary")
    rep.add_argument("dir", type=Path)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    configure_logging()
    try:
        if args.cmd == "run":
            scenario = load_scenario(args.scenario, args.seed)
            trace = TraceWriter() if args.trace_out else None
            rep = run_episode(scenario, get_mode(args.mode), args.seed, trace)
            if trace is not None:
                trace.write(args.trace_out)
            print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        elif args.cmd == "suite":
            config = json.loads(args.config.read_text())
            res = run_suite(config, args.out, base_dir=args.config.parent, workers=args.workers)
            sys.stdout.write(res.summary_csv)
        elif args.cmd == "replay-trace":
            v = replay_trace(args.trace)
            if v.match:
                print(f"match: {v.ticks} steps reproduced bit-exactly")
            else:
                print(f"divergence at tick {v.divergence_tick}: {v.detail}")
                return 1
        elif args.cmd == "report":
            sys.stdout.write(report(args.dir))
    except (AMSError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
