"""Deterministic discrete-event simulation of MoE decode under offloading.

One token runs its layers back to back on a single critical path. Transfers
live on channels (weight and activation lanes, one per copy engine); a
channel serves segments FIFO and never overlaps two of them. Weight fetches
issued by the collaborative strategy complete in the background and are
applied to the cache only when the simulated clock reaches their end time.
"""

from __future__ import annotations

import enum
import heapq
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .cache import CacheStats, ExpertCache, Policy
from .core import CacheGeometry, CostModel, HardwareSpec, ModelSpec, derive_cache_geometry
from .trace import RoutingTrace

logger = logging.getLogger(__name__)

EVENT_SCHEMA = "moesim.events/1"


class StrategyTag(str, enum.Enum):
    COLLABORATIVE = "COLLABORATIVE"
    ON_DEMAND = "ON_DEMAND"
    PREFETCH_IDEAL = "PREFETCH_IDEAL"
    CPU_ONLY = "CPU_ONLY"


class MissExecution(str, enum.Enum):
    SPLIT = "SPLIT"
    WHOLE_LAYER_CPU = "WHOLE_LAYER_CPU"


@dataclass(frozen=True)
class Strategy:
    tag: StrategyTag
    threads: int = 24
    miss_execution: MissExecution = MissExecution.SPLIT
    policy: Policy = Policy.LRU
    # PREFETCH_IDEAL: how many layers ahead a transfer may be issued
    lookahead: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tag", StrategyTag(self.tag))
        object.__setattr__(self, "miss_execution", MissExecution(self.miss_execution))
        object.__setattr__(self, "policy", Policy(self.policy))
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.lookahead < 0:
            raise ValueError("lookahead must be >= 0")

    @property
    def uses_cache(self) -> bool:
        return self.tag is StrategyTag.COLLABORATIVE


class EventKind(str, enum.Enum):
    LAYER_OTHER = "LAYER_OTHER"
    GPU_EXPERT = "GPU_EXPERT"
    CPU_EXPERT = "CPU_EXPERT"
    ACT_XFER = "ACT_XFER"
    WEIGHT_XFER_START = "WEIGHT_XFER_START"
    WEIGHT_XFER_DONE = "WEIGHT_XFER_DONE"
    CACHE_EVICT = "CACHE_EVICT"


@dataclass(frozen=True)
class Event:
    time_ms: float
    kind: EventKind
    token: int
    layer: int
    payload: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "time_ms": self.time_ms,
                "kind": self.kind.value,
                "token": self.token,
                "layer": self.layer,
                "payload": self.payload,
            },
            sort_keys=True,
        )


class Channel:
    """A FIFO transfer lane. Reservations are made in arrival order."""

    def __init__(self, name: str, index: int = 0):
        self.name = name
        self.index = index
        self.busy_until = 0.0
        self.busy_total = 0.0

    def reserve(self, ready: float, duration: float) -> tuple[float, float]:
        start = max(ready, self.busy_until)
        end = start + duration
        self.busy_until = end
        self.busy_total += duration
        return start, end


def _pick(channels: list[Channel]) -> Channel:
    return min(channels, key=lambda c: (c.busy_until, c.index))


# columns of TokenTiming.breakdown
OTHER, GPU, CPU, ACT, STALL = range(5)


@dataclass
class TokenTiming:
    token_index: int
    start: float
    end: float
    # (layers, 5): other, compute_gpu, compute_cpu, act_transfer, stall
    breakdown: np.ndarray
    layer_latency: np.ndarray

    @property
    def latency(self) -> float:
        return self.end - self.start


@dataclass
class SimResult:
    token_timings: list[TokenTiming]
    cache_stats: CacheStats | None
    channel_busy: dict[str, float]
    events: list[Event]
    config: dict[str, Any]
    geometry: CacheGeometry | None = None

    @property
    def latencies(self) -> np.ndarray:
        return np.array([tt.latency for tt in self.token_timings])

    @property
    def token_ends(self) -> np.ndarray:
        return np.array([tt.end for tt in self.token_timings])

    def events_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def write_events(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"schema": EVENT_SCHEMA, **self.config}, sort_keys=True) + "\n")
            f.write(self.events_jsonl())


class _Log:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.items: list[tuple[float, int, Event]] = []

    def __call__(self, time, kind, token, layer, **payload):
        if self.enabled:
            self.items.append((time, len(self.items), Event(time, kind, token, layer, payload)))

    def ordered(self) -> list[Event]:
        return [e for _, _, e in sorted(self.items, key=lambda x: (x[0], x[1]))]


class _Run:
    """State for one simulation; built and consumed by ``simulate``."""

    def __init__(self, trace, model, costs, geometry, strategy, seed, weight_channels,
                 activation_channels, record_events):
        self.trace = trace
        self.model = model
        self.costs = costs
        self.strategy = strategy
        self.k = model.top_k
        self.t_other = costs.t_other_layer_ms
        self.t_gpu = costs.t_gpu_moe_layer_ms
        self.t_cpu = costs.t_cpu(strategy.threads)
        self.t_act = costs.t_act_roundtrip_ms
        self.t_weight = costs.t_weight_moe_layer_ms
        self.weight = [Channel("WEIGHT", i) for i in range(weight_channels)]
        self.act = [Channel("ACTIVATION", i) for i in range(activation_channels)]
        self.log = _Log(record_events)
        self.cache = None
        if strategy.uses_cache:
            self.cache = ExpertCache(
                geometry, model.num_layers, model.experts_per_layer, strategy.policy, seed
            )
        self.completions: list[tuple[float, int, Any, Channel]] = []
        self._seq = 0

    def gpu_experts(self, start, experts, token, layer):
        per = self.t_gpu / self.k
        for i, e in enumerate(experts):
            self.log(start + i * per, EventKind.GPU_EXPERT, token, layer,
                     expert=int(e), duration_ms=per)
        return len(experts) / self.k * self.t_gpu

    def cpu_offload(self, ready, experts, token, layer):
        """Activation round trip then CPU compute; returns (act_wait, act_end, cpu_ms)."""
        ch = _pick(self.act)
        a_start, a_end = ch.reserve(ready, self.t_act)
        self.log(a_start, EventKind.ACT_XFER, token, layer,
                 channel=ch.index, duration_ms=self.t_act)
        per = self.t_cpu / self.k
        for i, e in enumerate(experts):
            self.log(a_end + i * per, EventKind.CPU_EXPERT, token, layer,
                     expert=int(e), duration_ms=per, threads=self.strategy.threads)
        return a_start - ready, a_end, len(experts) / self.k * self.t_cpu

    def drain(self, now):
        while self.completions and self.completions[0][0] <= now:
            end, _, ticket, _ = heapq.heappop(self.completions)
            evicted = self.cache.complete_fetch(ticket)
            if evicted is not None:
                self.log(end, EventKind.CACHE_EVICT, -1, evicted[0],
                         expert=evicted[1], inserted=ticket.expert)

    def post_fetch(self, now, misses, token, layer):
        per = self.t_weight / self.k
        for e in misses:
            ticket = self.cache.request_fetch(layer, int(e))
            if ticket is None:
                continue
            ch = _pick(self.weight)
            start, end = ch.reserve(now, per)
            self.log(start, EventKind.WEIGHT_XFER_START, token, layer, expert=int(e),
                     channel=ch.index, duration_ms=per, requested_ms=now,
                     ticket=ticket.ticket_id)
            self.log(end, EventKind.WEIGHT_XFER_DONE, token, layer, expert=int(e),
                     channel=ch.index, ticket=ticket.ticket_id)
            heapq.heappush(self.completions, (end, self._seq, ticket, ch))
            self._seq += 1

    # one method per strategy; each returns (layer_end, breakdown_row)

    def layer_cpu_only(self, now, t1, experts, token, layer):
        wait, a_end, cpu = self.cpu_offload(t1, experts, token, layer)
        return a_end + cpu, (0.0, cpu, self.t_act, wait)

    def layer_collaborative(self, now, t1, experts, token, layer):
        cache = self.cache
        self.drain(t1)
        hits, misses = cache.lookup(layer, experts)
        if not cache.is_covered(layer):
            return self.layer_cpu_only(now, t1, experts, token, layer)
        if not misses:
            gpu = self.gpu_experts(t1, hits, token, layer)
            return t1 + gpu, (gpu, 0.0, 0.0, 0.0)
        if self.strategy.miss_execution is MissExecution.WHOLE_LAYER_CPU:
            on_gpu, on_cpu = [], list(experts)
        else:
            on_gpu, on_cpu = hits, misses
        gpu = self.gpu_experts(t1, on_gpu, token, layer)
        wait, a_end, cpu = self.cpu_offload(t1, on_cpu, token, layer)
        self.post_fetch(t1, misses, token, layer)
        return max(t1 + gpu, a_end + cpu), (gpu, cpu, self.t_act, wait)

    def layer_on_demand(self, now, t1, experts, token, layer):
        per = self.t_weight / self.k
        x_end = t1
        for e in experts:
            ch = _pick(self.weight)
            start, end = ch.reserve(t1, per)
            self.log(start, EventKind.WEIGHT_XFER_START, token, layer, expert=int(e),
                     channel=ch.index, duration_ms=per, requested_ms=t1)
            self.log(end, EventKind.WEIGHT_XFER_DONE, token, layer, expert=int(e),
                     channel=ch.index)
            x_end = max(x_end, end)
        gpu = self.gpu_experts(x_end, experts, token, layer)
        return x_end + gpu, (gpu, 0.0, 0.0, x_end - t1)

    def issue_prefetch(self, arr, flat, ready):
        """Reserve the single prefetch lane for the layer at flat index ``flat``."""
        t, layer = divmod(flat, self.trace.num_layers)
        per = self.t_weight / self.k
        lane = self.weight[0]
        x_end = ready
        for e in arr[t][layer]:
            start, x_end = lane.reserve(ready, per)
            self.log(start, EventKind.WEIGHT_XFER_START, t, layer, expert=int(e),
                     channel=0, duration_ms=per, requested_ms=ready)
            self.log(x_end, EventKind.WEIGHT_XFER_DONE, t, layer, expert=int(e), channel=0)
        self.prefetched[flat] = x_end

    def run(self) -> SimResult:
        trace, strategy = self.trace, self.strategy
        num_layers = trace.num_layers
        total = trace.num_tokens * num_layers
        arr = trace.experts.tolist()
        layer_fn = {
            StrategyTag.COLLABORATIVE: self.layer_collaborative,
            StrategyTag.CPU_ONLY: self.layer_cpu_only,
            StrategyTag.ON_DEMAND: self.layer_on_demand,
        }.get(strategy.tag)
        prefetch = strategy.tag is StrategyTag.PREFETCH_IDEAL
        look = strategy.lookahead
        if prefetch:
            # serialized transfers on one lane, issued `look` layers ahead
            self.weight = self.weight[:1]
            self.prefetched: dict[int, float] = {}
            for flat in range(min(look, total)):
                self.issue_prefetch(arr, flat, 0.0)

        now = 0.0
        timings = []
        for t in range(trace.num_tokens):
            start = now
            breakdown = np.zeros((num_layers, 5))
            lat = np.zeros(num_layers)
            for layer in range(num_layers):
                experts = arr[t][layer]
                t1 = now + self.t_other
                self.log(now, EventKind.LAYER_OTHER, t, layer, duration_ms=self.t_other)
                if prefetch:
                    flat = t * num_layers + layer
                    if flat + look < total:
                        self.issue_prefetch(arr, flat + look, now)
                    begin = max(t1, self.prefetched.pop(flat))
                    gpu = self.gpu_experts(begin, experts, t, layer)
                    end, row = begin + gpu, (gpu, 0.0, 0.0, begin - t1)
                else:
                    end, row = layer_fn(now, t1, experts, t, layer)
                breakdown[layer] = (self.t_other, *row)
                lat[layer] = end - now
                now = end
            timings.append(TokenTiming(t, start, now, breakdown, lat))

        return SimResult(
            token_timings=timings,
            cache_stats=self.cache.stats if self.cache is not None else None,
            channel_busy={
                "WEIGHT": sum(c.busy_total for c in self.weight),
                "ACTIVATION": sum(c.busy_total for c in self.act),
            },
            events=self.log.ordered(),
            config={},
        )


def simulate(
    trace: RoutingTrace,
    model: ModelSpec,
    costs: CostModel,
    geometry: CacheGeometry,
    strategy: Strategy,
    seed: int = 0,
    *,
    weight_channels: int = 1,
    activation_channels: int = 1,
    record_events: bool = True,
) -> SimResult:
    """Replay ``trace`` under ``strategy`` and return timings, stats and events.

    Fully deterministic in its inputs; ``seed`` only affects the resident
    set chosen by the RANDOM_STATIC policy.
    """
    if not isinstance(strategy, Strategy):
        raise TypeError(f"expected Strategy, got {type(strategy).__name__}")
    trace.check_model(model)
    costs.check_threads(strategy.threads)
    if weight_channels < 1 or activation_channels < 1:
        raise ValueError("channel counts must be >= 1")
    if not strategy.uses_cache:
        geometry = None

    run = _Run(trace, model, costs, geometry, strategy, seed, weight_channels,
               activation_channels, record_events)
    result = run.run()
    result.geometry = geometry
    result.config = {
        "model": model.name,
        "strategy": strategy.tag.value,
        "threads": strategy.threads,
        "miss_execution": strategy.miss_execution.value,
        "policy": strategy.policy.value,
        "lookahead": strategy.lookahead,
        "seed": seed,
        "tokens": trace.num_tokens,
        "trace": trace.fingerprint(),
        "t_other_layer_ms": costs.t_other_layer_ms,
        "geometry": None if geometry is None else {
            "total_slots": geometry.total_slots,
            "ways": geometry.ways,
            "indexes": geometry.indexes,
            "covered_layers": geometry.covered_layers,
        },
    }
    return result


def point_seed(seed: int, threads: int, ways: int) -> int:
    """Fixed derivation of a sweep point's seed from the run seed."""
    return int(np.random.SeedSequence([seed, threads, ways]).generate_state(1)[0])


@dataclass
class SweepFailure:
    threads: int
    ways: int
    error: str


def _sweep_point(args):
    trace, model, hw, costs, strategy, threads, ways, seed, record_events = args
    try:
        geometry = derive_cache_geometry(model, hw, ways)
        return simulate(
            trace, model, costs, geometry, replace(strategy, threads=threads),
            point_seed(seed, threads, ways),
            weight_channels=hw.weight_channel_count,
            activation_channels=hw.activation_channel_count,
            record_events=record_events,
        )
    except (ValueError, KeyError) as exc:
        logger.warning("sweep point threads=%s ways=%s failed: %s", threads, ways, exc)
        return SweepFailure(threads, ways, str(exc))


def run_sweep(
    trace: RoutingTrace,
    model: ModelSpec,
    hw: HardwareSpec,
    costs: CostModel,
    grid: Iterable[tuple[int, int]],
    strategy: Strategy | None = None,
    seed: int = 0,
    *,
    jobs: int = 1,
    record_events: bool = False,
) -> list[SimResult | SweepFailure]:
    """Simulate every ``(threads, ways)`` point; failures are returned, not raised."""
    strategy = strategy or Strategy(StrategyTag.COLLABORATIVE)
    tasks = [
        (trace, model, hw, costs, strategy, int(th), int(w), seed, record_events)
        for th, w in grid
    ]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_point, tasks))
    return [_sweep_point(t) for t in tasks]


def check_event_log(events: Sequence[Event], top_k: int) -> list[str]:
    """Audit an event log; returns a list of violations (empty when clean).

    Checks conservation of expert executions, per-channel non-overlap and
    FIFO order, fetch causality, and that no cached expert is computed on
    the GPU before the transfer that brought it in has finished.
    """
    problems = []
    times = [e.time_ms for e in events]
    if any(b < a for a, b in zip(times, times[1:])):
        problems.append("event log not time-ordered")

    executions: dict[tuple[int, int], int] = {}
    segments: dict[tuple[str, int], list[tuple[float, float]]] = {}
    done_at: dict[int, float] = {}
    arrived: dict[tuple[int, int], float] = {}
    evicted_at: dict[tuple[int, int], float] = {}
    fetch_mode = False
    for e in events:
        if e.kind in (EventKind.GPU_EXPERT, EventKind.CPU_EXPERT):
            key = (e.token, e.layer)
            executions[key] = executions.get(key, 0) + 1
        if e.kind is EventKind.WEIGHT_XFER_START:
            start, dur = e.time_ms, e.payload["duration_ms"]
            segments.setdefault(("WEIGHT", e.payload["channel"]), []).append((start, start + dur))
            if start < e.payload.get("requested_ms", start) - 1e-9:
                problems.append(f"transfer starts before request at {start}")
            if "ticket" in e.payload:
                fetch_mode = True
                done_at[e.payload["ticket"]] = start + dur
        elif e.kind is EventKind.ACT_XFER:
            start, dur = e.time_ms, e.payload["duration_ms"]
            segments.setdefault(("ACTIVATION", e.payload["channel"]), []).append(
                (start, start + dur)
            )
        elif e.kind is EventKind.WEIGHT_XFER_DONE and "ticket" in e.payload:
            expected = done_at.get(e.payload["ticket"])
            if expected is None or abs(expected - e.time_ms) > 1e-6:
                problems.append(f"ticket {e.payload['ticket']} done at inconsistent time")
            arrived[(e.layer, e.payload["expert"])] = e.time_ms
        elif e.kind is EventKind.CACHE_EVICT:
            evicted_at[(e.layer, e.payload["expert"])] = e.time_ms

    for key, count in executions.items():
        if count != top_k:
            problems.append(f"token {key[0]} layer {key[1]}: {count} expert executions")
    for (name, idx), segs in segments.items():
        # log order is start order; FIFO means ends are ordered too
        for (s0, e0), (s1, e1) in zip(segs, segs[1:]):
            if s1 < e0 - 1e-9:
                problems.append(f"{name}[{idx}] overlap at {s1}")

    if fetch_mode:
        seen_done: dict[tuple[int, int], float] = {}
        for e in events:
            if e.kind is EventKind.WEIGHT_XFER_DONE and "ticket" in e.payload:
                seen_done[(e.layer, e.payload["expert"])] = e.time_ms
            elif e.kind is EventKind.GPU_EXPERT:
                key = (e.layer, e.payload["expert"])
                if key not in seen_done or seen_done[key] > e.time_ms + 1e-9:
                    problems.append(
                        f"GPU use of layer {key[0]} expert {key[1]} at {e.time_ms} "
                        "before its fetch completed"
                    )
    return problems
