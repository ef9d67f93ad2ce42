"""Throughput, hit rates, energy and comparison tables derived from SimResults."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

from .core import CostModel, HardwareSpec, ModelSpec, derive_cache_geometry
from .engine import SimResult, Strategy, StrategyTag, SweepFailure, simulate
from .trace import RoutingTrace

METRICS_SCHEMA = "moesim.metrics/1"

CSV_FIELDS = [
    "schema",
    "strategy",
    "threads",
    "indexes",
    "ways",
    "throughput_tps",
    "hit_at_least_one",
    "hit_all_k",
    "hit_at_least_one_all_layers",
    "hit_all_k_all_layers",
    "joules_per_token",
]


def throughput(result: SimResult, warmup_tokens: int = 1) -> float:
    """Steady-state tokens per second, excluding the first ``warmup_tokens``."""
    timings = result.token_timings
    if warmup_tokens < 0:
        raise ValueError("warmup_tokens must be >= 0")
    if len(timings) <= warmup_tokens:
        raise ValueError(
            f"need more than {warmup_tokens} tokens to measure throughput, got {len(timings)}"
        )
    window_start = timings[warmup_tokens - 1].end if warmup_tokens else timings[0].start
    elapsed_ms = timings[-1].end - window_start
    return (len(timings) - warmup_tokens) / (elapsed_ms / 1000.0)


@dataclass(frozen=True)
class EnergyReport:
    p_cpu: float
    p_gpu: float
    tokens_per_second: float
    joules_per_token: float


def energy_per_token(tokens_per_second: float, costs: CostModel, threads: int) -> EnergyReport:
    """Package power (CPU + GPU) at ``threads`` divided by decode rate."""
    try:
        p_cpu = costs.p_cpu_watts[threads]
        p_gpu = costs.p_gpu_watts[threads]
    except KeyError:
        raise KeyError(f"no power entry for {threads} threads") from None
    if not tokens_per_second > 0:
        raise ValueError("throughput must be > 0")
    return EnergyReport(p_cpu, p_gpu, tokens_per_second, (p_cpu + p_gpu) / tokens_per_second)


@dataclass(frozen=True)
class HitRateReport:
    covered_layers: int
    per_layer_at_least_one: list[float]
    per_layer_all_k: list[float]
    # aggregate over covered layers only (what the hit-rate plots show)
    covered_at_least_one: float
    covered_all_k: float
    # aggregate with uncovered layers counted as misses
    all_layers_at_least_one: float
    all_layers_all_k: float


def _ratio(num, den) -> float:
    return float(num) / float(den) if den else 0.0


def hit_rate_report(result: SimResult) -> HitRateReport:
    stats = result.cache_stats
    if stats is None:
        raise ValueError("result has no cache statistics (strategy does not use the cache)")
    covered = result.geometry.covered_layers if result.geometry is not None else 0
    acc = stats.accesses
    one = stats.at_least_one_hit
    both = stats.all_k_hit
    return HitRateReport(
        covered_layers=covered,
        per_layer_at_least_one=[_ratio(a, b) for a, b in zip(one, acc)],
        per_layer_all_k=[_ratio(a, b) for a, b in zip(both, acc)],
        covered_at_least_one=_ratio(one[:covered].sum(), acc[:covered].sum()),
        covered_all_k=_ratio(both[:covered].sum(), acc[:covered].sum()),
        all_layers_at_least_one=_ratio(one.sum(), acc.sum()),
        all_layers_all_k=_ratio(both.sum(), acc.sum()),
    )


@dataclass(frozen=True)
class ComparisonRow:
    label: str
    strategy: str
    threads: int
    throughput_tps: float
    speedup: float
    joules_per_token: float


def compare_strategies(
    results: Mapping[str, SimResult],
    baseline: str,
    costs: CostModel,
    warmup_tokens: int = 1,
) -> list[ComparisonRow]:
    """Throughput, speedup over ``baseline`` and J/token for each labelled run."""
    if baseline not in results:
        raise KeyError(f"baseline {baseline!r} not among results {sorted(results)}")
    traces = {r.config.get("trace") for r in results.values()}
    models = {r.config.get("model") for r in results.values()}
    if len(traces) > 1 or len(models) > 1:
        raise ValueError("results come from different traces or models")
    base = throughput(results[baseline], warmup_tokens)
    rows = []
    for label, r in results.items():
        tps = throughput(r, warmup_tokens)
        threads = r.config["threads"]
        rows.append(
            ComparisonRow(
                label=label,
                strategy=r.config["strategy"],
                threads=threads,
                throughput_tps=tps,
                speedup=tps / base,
                joules_per_token=energy_per_token(tps, costs, threads).joules_per_token,
            )
        )
    return rows


def result_row(result: SimResult, costs: CostModel, warmup_tokens: int = 1) -> dict:
    """One CSV/JSON row for a simulation run."""
    cfg = result.config
    geom = cfg.get("geometry") or {}
    tps = throughput(result, warmup_tokens)
    row = {
        "schema": METRICS_SCHEMA,
        "strategy": cfg["strategy"],
        "threads": cfg["threads"],
        "indexes": geom.get("indexes", 0),
        "ways": geom.get("ways", 0),
        "throughput_tps": tps,
        "hit_at_least_one": "",
        "hit_all_k": "",
        "hit_at_least_one_all_layers": "",
        "hit_all_k_all_layers": "",
        "joules_per_token": energy_per_token(tps, costs, cfg["threads"]).joules_per_token,
    }
    if result.cache_stats is not None:
        hr = hit_rate_report(result)
        row.update(
            hit_at_least_one=hr.covered_at_least_one,
            hit_all_k=hr.covered_all_k,
            hit_at_least_one_all_layers=hr.all_layers_at_least_one,
            hit_all_k_all_layers=hr.all_layers_all_k,
        )
    return row


def write_csv(path: str | Path, rows: Iterable[dict], append: bool = False) -> None:
    path = Path(path)
    new_file = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def series_json(rows: Sequence[dict]) -> dict:
    """Plot-ready series: throughput vs threads per (indexes, ways), and hit rates."""
    throughput_series: dict[str, list[list[float]]] = {}
    hit_series: dict[str, dict[str, float]] = {}
    for row in rows:
        key = f"({row['indexes']},{row['ways']})" if int(row["ways"]) else row["strategy"]
        throughput_series.setdefault(key, []).append(
            [int(row["threads"]), float(row["throughput_tps"])]
        )
        if row.get("hit_at_least_one") not in ("", None):
            hit_series[key] = {
                "at_least_one": float(row["hit_at_least_one"]),
                "all_k": float(row["hit_all_k"]),
            }
    for pts in throughput_series.values():
        pts.sort()
    return {"schema": METRICS_SCHEMA, "throughput": throughput_series, "hit_rates": hit_series}


def write_series_json(path: str | Path, rows: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(series_json(rows), indent=2, sort_keys=True) + "\n")


def sweep_rows(
    results: Sequence[SimResult | SweepFailure], costs: CostModel, warmup_tokens: int = 1
) -> list[dict]:
    return [result_row(r, costs, warmup_tokens) for r in results if isinstance(r, SimResult)]


def calibrate_t_other(
    trace: RoutingTrace,
    model: ModelSpec,
    hw: HardwareSpec,
    costs: CostModel,
    target_tps: float,
    threads: int = 24,
    ways_options: Sequence[int] = (2, 4, 8),
    warmup_tokens: int = 1,
    upper_ms: float = 10.0,
) -> float:
    """Fit ``t_other_layer_ms`` so the best cache config hits ``target_tps``.

    Throughput falls monotonically as the per-layer attention time grows, so
    a bracketing root finder on [0, upper_ms] suffices.
    """

    def best(t_other: float) -> float:
        c = costs.with_updates(t_other_layer_ms=t_other)
        return max(
            throughput(
                simulate(
                    trace, model, c, derive_cache_geometry(model, hw, w),
                    Strategy(StrategyTag.COLLABORATIVE, threads), record_events=False,
                ),
                warmup_tokens,
            )
            for w in ways_options
        )

    lo, hi = best(0.0) - target_tps, best(upper_ms) - target_tps
    if lo < 0 or hi > 0:
        raise ValueError(f"target {target_tps} tok/s not reachable with t_other in [0, {upper_ms}]")
    return float(brentq(lambda x: best(x) - target_tps, 0.0, upper_ms, xtol=1e-4))


def summary(result: SimResult, costs: CostModel, warmup_tokens: int = 1) -> dict:
    out = {"schema": METRICS_SCHEMA, "config": result.config}
    lat = result.latencies
    out["tokens"] = len(lat)
    out["mean_token_latency_ms"] = float(np.mean(lat))
    out["channel_busy_ms"] = result.channel_busy
    if len(lat) > warmup_tokens:
        tps = throughput(result, warmup_tokens)
        out["throughput_tps"] = tps
        out["energy"] = asdict(energy_per_token(tps, costs, result.config["threads"]))
    if result.cache_stats is not None:
        out["hit_rates"] = asdict(hit_rate_report(result))
        out["cache_stats"] = result.cache_stats.to_dict()
    return out
