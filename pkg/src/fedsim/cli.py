"""Command line entry point.

    fedsim run --config exp.json [--out DIR] [--seed N] [--dump-schedule] [--dump-events]
               [--strategies a,b,c] [--grid-filter PATTERN]
    fedsim partition-report --config exp.json

Exit status: 0 when every cell succeeds, 2 when some cells failed, 1 on a
configuration error.  FEDSIM_THREADS caps the number of cells run concurrently.
"""

from __future__ import annotations

import argparse
import fnmatch
import logging
import sys

from .errors import ConfigurationError, FedSimError
from .experiment import emit_plot_data, load_config, partition_report, run_grid


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment grid")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=int, help="master seed (overrides master_seed)")
    run.add_argument("--dump-schedule", action="store_true", help="write chunk schedules as JSON")
    run.add_argument("--dump-events", action="store_true", help="write simulated event logs as JSON lines")
    run.add_argument("--strategies", help="comma-separated strategy names to keep")
    run.add_argument("--grid-filter", help="glob matched against setting ids, e.g. 'imbalanced_*'")

    rep = sub.add_parser("partition-report", help="print shard sizes and label histograms")
    rep.add_argument("--config", required=True)
    return parser


def _select(cfg, strategies: str | None, grid_filter: str | None):
    if strategies:
        wanted = [s.strip() for s in strategies.split(",") if s.strip()]
        known = {s.label for s in cfg.strategies}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise ConfigurationError(f"unknown strategies {unknown}; configured: {sorted(known)}", "--strategies")
        cfg.strategies = [s for s in cfg.strategies if s.label in wanted]
    if grid_filter:
        cfg.grid = [g for g in cfg.grid if fnmatch.fnmatch(g.setting, grid_filter)]
        if not cfg.grid:
            raise ConfigurationError(f"no grid cell matches {grid_filter!r}", "--grid-filter")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "partition-report":
            print(partition_report(cfg))
            return 0
        if args.out:
            cfg.output_dir = args.out
        if args.seed is not None:
            cfg.master_seed = args.seed
        _select(cfg, args.strategies, args.grid_filter)
    except (ConfigurationError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except FedSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    bundle = run_grid(cfg, dump_schedule=args.dump_schedule, dump_events=args.dump_events)
    emit_plot_data(bundle)
    for c in bundle.cells:
        final = f"acc={c.records[-1].accuracy:.4f} sim_time={c.records[-1].sim_time:.1f}" if c.records else c.error
        print(f"{c.setting:<28} {c.strategy:<16} {c.status:<7} {final}")
    print(f"results written to {bundle.output_dir}")
    return 2 if bundle.failed else 0


if __name__ == "__main__":
    sys.exit(main())
