"""``moesim`` command line: gen-trace, simulate, sweep, validate.

Exit status: 0 success, 1 a validation check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from .cache import Policy
from .core import (
    ConfigError,
    derive_cache_geometry,
    derive_seed,
    load_config,
    load_preset,
    zero_geometry,
)
from .engine import MissExecution, Strategy, StrategyTag, SweepFailure, run_sweep, simulate
from .metrics import (
    read_csv,
    result_row,
    summary,
    sweep_rows,
    write_csv,
    write_series_json,
)
from .trace import SynthParams, TraceError, analyze_patterns, generate_trace, parse_trace, write_trace

logger = logging.getLogger("moesim")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_synth(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--synth expects key=value pairs, got {item!r}")
        if key not in ("p_token_reuse", "p_layer_follow", "tokens"):
            raise UsageError(f"unknown --synth key {key!r}")
        try:
            out[key] = int(value) if key == "tokens" else float(value)
        except ValueError:
            raise UsageError(f"--synth {key}: not a number: {value!r}") from None
    return out


def _int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in values):
        raise UsageError(f"{flag}: values must be >= 1")
    return values


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MOESIM_OUT_DIR") or "moesim-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    return out


def _load_specs(args):
    if args.config and args.preset:
        raise UsageError("give either --preset or --config, not both")
    if args.config:
        return load_config(args.config)
    return load_preset(args.preset or "mixtral-8x7b")


def _synth_params(args, seed_tag: str = "trace") -> SynthParams:
    raw = _parse_synth(args.synth)
    return SynthParams(
        p_token_reuse=raw.get("p_token_reuse", 0.45),
        p_layer_follow=raw.get("p_layer_follow", 0.0),
        seed=derive_seed(args.seed, seed_tag),
        tokens=raw.get("tokens", 200),
    )


def _load_trace(args, model):
    if args.trace and args.synth:
        raise UsageError("give either --trace or --synth, not both")
    if args.trace:
        if not Path(args.trace).exists():
            raise UsageError(f"trace file not found: {args.trace}")
        return parse_trace(args.trace, model)
    if args.synth:
        return generate_trace(model, _synth_params(args))
    raise UsageError("a trace source is required: --trace PATH or --synth key=value ...")


def _strategy(args, threads: int) -> Strategy:
    return Strategy(
        tag=StrategyTag(args.strategy.upper()),
        threads=threads,
        miss_execution=(
            MissExecution.SPLIT if args.miss_exec == "split" else MissExecution.WHOLE_LAYER_CPU
        ),
        policy=Policy(args.policy.upper()),
    )


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_trace(args) -> int:
    model, _, _ = _load_specs(args)
    if not args.synth:
        raise UsageError("gen-trace needs --synth key=value ...")
    params = _synth_params(args)
    trace = generate_trace(model, params)
    out = _out_dir(args)
    path = out / args.name
    write_trace(path, trace)
    report = analyze_patterns(trace).to_dict() if trace.num_tokens >= 2 else None
    sidecar = path.with_name(path.name.split(".")[0] + ".patterns.json")
    sidecar.write_text(
        json.dumps(
            {"schema": "moesim.patterns/1", "model": model.name, "params": vars(params),
             "patterns": report},
            indent=2, sort_keys=True,
        ) + "\n"
    )
    print(f"wrote {path} ({len(trace)} records, sha256 {_file_digest(path)[:16]})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, hw, costs = _load_specs(args)
    trace = _load_trace(args, model)
    threads = _int_list(args.threads, "--threads")
    if len(threads) != 1:
        raise UsageError("simulate takes a single --threads value")
    strategy = _strategy(args, threads[0])
    ways_given = args.ways is not None
    ways = _int_list(args.ways, "--ways") if ways_given else [4]
    if len(ways) != 1:
        raise UsageError("simulate takes a single --ways value")
    if strategy.uses_cache:
        geometry = derive_cache_geometry(model, hw, ways[0])
    else:
        if ways_given:
            logger.warning("--ways ignored: strategy %s has no expert cache", strategy.tag.value)
        geometry = zero_geometry()

    result = simulate(
        trace, model, costs, geometry, strategy, derive_seed(args.seed, "cache"),
        weight_channels=hw.weight_channel_count,
        activation_channels=hw.activation_channel_count,
        record_events=args.events,
    )
    out = _out_dir(args)
    summ = summary(result, costs)
    (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
    if trace.num_tokens > 1:
        write_csv(out / "metrics.csv", [result_row(result, costs)])
    if args.events:
        result.write_events(out / "events.jsonl")
    tps = summ.get("throughput_tps")
    geo = summ["config"]["geometry"]
    geo_txt = f" S={geo['total_slots']} N={geo['indexes']} M={geo['ways']}" if geo else ""
    print(
        f"{strategy.tag.value} threads={strategy.threads}{geo_txt}: "
        + (f"{tps:.3f} tok/s" if tps is not None else "single token, no throughput")
        + f" -> {out}"
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, hw, costs = _load_specs(args)
    trace = _load_trace(args, model)
    threads = _int_list(args.threads, "--threads")
    ways = _int_list(args.ways or "", "--ways")
    if not threads or not ways:
        raise UsageError("sweep needs non-empty --threads and --ways lists")
    for th in threads:
        try:
            costs.check_threads(th)
        except ConfigError as exc:
            raise UsageError(f"invalid grid element threads={th}: {exc}") from None
    strategy = _strategy(args, threads[0])
    if not strategy.uses_cache:
        raise UsageError("sweep varies cache ways; use simulate for cache-free baselines")
    out = _out_dir(args)
    csv_path = out / "sweep.csv"

    done = set()
    if csv_path.exists():
        for row in read_csv(csv_path):
            done.add((int(row["threads"]), int(row["ways"])))
    grid = [(th, w) for th in threads for w in ways if (th, w) not in done]
    if done:
        print(f"resuming: {len(done)} points already in {csv_path}, {len(grid)} to run")

    results = run_sweep(trace, model, hw, costs, grid, strategy, derive_seed(args.seed, "sweep"),
                        jobs=args.jobs)
    failures = [r for r in results if isinstance(r, SweepFailure)]
    # CSV written from the main process only, in grid order
    write_csv(csv_path, sweep_rows(results, costs), append=True)
    write_series_json(out / "series.json", read_csv(csv_path))
    for f in failures:
        print(f"point threads={f.threads} ways={f.ways} failed: {f.error}", file=sys.stderr)
    print(f"wrote {csv_path} ({len(results) - len(failures)} new rows)")
    return EXIT_USAGE if failures else EXIT_OK


def cmd_validate(args) -> int:
    from .validation import run_checks

    checks = run_checks(args.seed)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help="built-in preset: mixtral-8x7b or phi3.5-moe")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (default: $MOESIM_OUT_DIR or ./moesim-out)")
    common.add_argument("--synth", nargs="+", default=[], metavar="KEY=VALUE",
                        help="p_token_reuse=.. p_layer_follow=.. tokens=..")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--trace", help="JSONL routing trace (.gz accepted)")
    run.add_argument("--strategy", default="COLLABORATIVE",
                     choices=[s.value for s in StrategyTag] + [s.value.lower() for s in StrategyTag])
    run.add_argument("--miss-exec", default="split", choices=["split", "whole"])
    run.add_argument("--policy", default="LRU", choices=["LRU", "FIFO", "RANDOM_STATIC",
                                                        "lru", "fifo", "random_static"])
    run.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gen-trace", parents=[common], help="write a synthetic routing trace")
    p.add_argument("--name", default="trace.jsonl", help="file name inside --out")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", parents=[common, run], help="run one simulation")
    p.add_argument("--threads", default="24")
    p.add_argument("--ways")
    p.add_argument("--events", action="store_true", help="also write events.jsonl")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[common, run], help="threads x ways grid to CSV")
    p.add_argument("--threads", default="1,2,4,8,16,24")
    p.add_argument("--ways", default="2,4,8")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="analytical and reference self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ConfigError, TraceError, ValueError, KeyError, OSError) as exc:
        print(f"moesim {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
