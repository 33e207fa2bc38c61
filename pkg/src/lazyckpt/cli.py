"""``lazyckpt`` command line: simulate | bench | verify | defaults | gc.

Exit codes: 0 success, 1 internal or consistency failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from typing import Iterable, List, Optional, TextIO

from . import __version__
from .config import ScenarioConfig, defaults_text, load_config
from .consolidation import garbage_collect
from .errors import ConfigError, SizeExceedsCapacity
from .harness import BenchConfig, run_bench, run_verify, scratch_dir
from .simulator import Metrics, Strategy, simulate

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("strategy", "model", "dp", "checkpoint_every", "blocked_s", "throughput_Bps", "iter_s", "end_to_end_s")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("lazyckpt")


def metrics_row(m: Metrics) -> List[str]:
    return [
        m.strategy,
        m.model,
        str(m.dp),
        "none" if m.checkpoint_every is None else str(m.checkpoint_every),
        f"{m.mean_blocked:.6f}",
        f"{m.throughput:.6e}",
        f"{m.iter_s:.6f}",
        f"{m.end_to_end:.6f}",
    ]


def write_csv(rows: Iterable[Metrics], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for m in rows:
        w.writerow(metrics_row(m))


def simulate_scenario(sc: ScenarioConfig, strategy: Optional[str] = None) -> List[Metrics]:
    if strategy:
        wanted = Strategy.parse(strategy).kind
        sc.strategies = [s for s in sc.strategies if s.kind is wanted] or [Strategy.parse(strategy)]
    return [simulate(cfg) for cfg in sc.runs()]


# -- verbs -------------------------------------------------------------------
def cmd_simulate(args) -> int:
    sc = load_config(args.config)
    results = simulate_scenario(sc, args.strategy)
    target = args.csv or sc.csv
    if target and target != "-":
        with open(target, "w", encoding="utf-8", newline="") as fp:
            write_csv(results, fp)
        print(f"wrote {len(results)} rows to {target}", file=sys.stderr)
    else:
        buf = io.StringIO()
        write_csv(results, buf)
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def bench_config(sc: ScenarioConfig, args) -> BenchConfig:
    """BenchConfig defaults, overridden only by keys the scenario file sets."""
    cfg = BenchConfig()
    given = sc.given
    if sc.state_size is not None:
        cfg.state_size = sc.state_size
    elif sc.param_count is not None:
        cfg.state_size = round(sc.param_count * (sc.bytes_per_param_model + sc.bytes_per_param_optimizer))
    if "cluster.dp" in given:
        cfg.dp = sc.dp[0]
    cfg.pp, cfg.tp = sc.pp or cfg.pp, sc.tp or cfg.tp
    for key, attr in (("cluster.gpus_per_node", "gpus_per_node"), ("model.layer_count", "layer_count"),
                      ("run.iterations", "iterations"), ("run.buffer_capacity", "buffer_capacity"),
                      ("run.chunk_quantum", "chunk_quantum"), ("run.t_forward", "t_forward"),
                      ("run.t_backward", "t_backward"), ("run.t_update", "t_update")):
        if key in given:
            setattr(cfg, attr, getattr(sc, attr))
    cfg.layer_count = max(cfg.layer_count, cfg.pp)
    if "run.checkpoint_every" in given:
        cfg.checkpoint_every = sc.checkpoint_every[0] or 1
    if "cluster.b_d2h_pinned" in given:
        cfg.d2h_bandwidth = sc.cluster.b_d2h_pinned
    if "cluster.per_writer_cap" in given:
        cfg.storage_bandwidth = sc.cluster.per_writer_cap
    cfg.kill_at_step = args.kill_at_step
    cfg.fsync = not args.no_fsync
    return cfg


def cmd_bench(args) -> int:
    if args.config:
        cfg = bench_config(load_config(args.config), args)
    else:
        cfg = BenchConfig(kill_at_step=args.kill_at_step, fsync=not args.no_fsync)
    root = scratch_dir(args.scratch)
    report = run_bench(cfg, root)
    print(f"root={report.root}")
    print(f"state_bytes={report.state_bytes}")
    print(f"checkpoints={len(report.steps)}")
    for step, b in zip(report.steps, report.blocked):
        print(f"step={step} blocked_s={b:.6f}")
    print(f"mean_blocked_s={report.mean_blocked:.6f}")
    print(f"throughput_Bps={report.throughput:.6e}")
    print(f"end_to_end_s={report.end_to_end:.6f}")
    print(f"committed={','.join(map(str, report.committed)) or 'none'}")
    print(f"latest_committed={report.latest_committed if report.latest_committed is not None else 'none'}")
    if report.crashed_at is not None:
        print(f"crashed_at_step={report.crashed_at}")
    if not report.consistent:
        print(f"consistency FAILED: {report.detail}", file=sys.stderr)
        return EXIT_FAIL
    expected = report.steps if report.crashed_at is None else [s for s in report.steps if s < report.crashed_at]
    if report.committed != expected:
        print(f"commit FAILED: expected steps {expected}, manifest has {report.committed}", file=sys.stderr)
        return EXIT_FAIL
    print("restore-consistency: ok")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_verify(args.trials, args.seed, skip_barrier=args.skip_barrier, scratch=args.scratch)
    n = len(report.results)
    print(f"verify: {report.passed}/{n} trials byte-exact (seed={args.seed}, {report.elapsed:.1f}s)")
    if report.torn:
        print(f"torn snapshots detected: {report.torn}/{n}")
    fail = report.first_failure
    if fail is not None:
        kind = "TornSnapshot" if fail.torn else "divergence"
        print(f"first failure: trial {fail.trial} ({fail.layout}): {kind}: {fail.detail}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(defaults_text())
    return EXIT_OK


def cmd_gc(args) -> int:
    if not os.path.isdir(args.root):
        raise ConfigError(f"{args.root} is not a directory")
    removed = garbage_collect(args.root, dry_run=args.dry_run)
    verb = "would remove" if args.dry_run else "removed"
    for name in removed:
        print(f"{verb} {name}")
    print(f"{verb} {len(removed)} item(s)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lazyckpt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="run the cluster simulator over a scenario matrix")
    s.add_argument("config", help="scenario INI file")
    s.add_argument("--strategy", help="only this strategy (sync, async_snapshot, chunked[:N], lazy)")
    s.add_argument("--csv", help="output file (default: [run] csv or stdout)")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="drive the real engine with an emulated trainer")
    b.add_argument("config", nargs="?", help="scenario INI file ([run] state_size, iterations, ...)")
    b.add_argument("--scratch", help="scratch directory (default: $LZCKPT_SCRATCH or the system temp dir)")
    b.add_argument("--kill-at-step", type=int, help="crash rank (0,0,0) mid-flush of this step")
    b.add_argument("--no-fsync", action="store_true", help="skip fsync (faster on slow disks)")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="randomized capture/mutate/restore consistency trials")
    v.add_argument("--trials", type=int, default=500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--skip-barrier", action="store_true", help="negative control: mutate before the update barrier")
    v.add_argument("--scratch", help="scratch directory")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("defaults", help="print every config key with its default")
    d.set_defaults(func=cmd_defaults)

    g = sub.add_parser("gc", help="delete step directories not committed in the manifest")
    g.add_argument("root", help="checkpoint root directory")
    g.add_argument("--dry-run", action="store_true")
    g.set_defaults(func=cmd_gc)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SizeExceedsCapacity) as exc:
        print(f"lazyckpt: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # pragma: no cover - reported, not raised
        log.debug("internal error", exc_info=True)
        print(f"lazyckpt: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
