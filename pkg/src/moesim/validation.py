"""Self-checks run by ``moesim validate``.

Each check compares a simulated quantity against an independent reference:
closed-form hit probabilities, a naive list-based cache, the CPU-only
baseline, or published power/energy figures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import ExpertCache, Policy, random_policy_hit_rates
from .core import CacheGeometry, derive_cache_geometry, load_preset, zero_geometry
from .engine import Strategy, StrategyTag, simulate
from .metrics import energy_per_token
from .trace import SynthParams, generate_trace


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    expected: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return abs(self.measured - self.expected) <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: measured={self.measured:.6g} "
            f"expected={self.expected:.6g} |delta|={abs(self.measured - self.expected):.3g} "
            f"tol={self.tolerance:g}"
        )


class ReferenceCache:
    """Deliberately naive set-associative cache: one Python list per set."""

    def __init__(self, sets: int, ways: int, policy: str):
        self.sets = [[] for _ in range(sets)]
        self.ways = ways
        self.policy = policy

    def access(self, layer: int, experts) -> int:
        if layer >= len(self.sets):
            return 0
        entries = self.sets[layer]
        hits = 0
        misses = []
        for e in experts:
            if e in entries:
                hits += 1
                if self.policy == "LRU":
                    entries.remove(e)
                    entries.append(e)
            else:
                misses.append(e)
        for e in misses:
            entries.append(e)
            if len(entries) > self.ways:
                entries.pop(0)
        return hits


def replay_instant(cache: ExpertCache, experts: np.ndarray) -> int:
    """Replay a (T, L, K) trace with fetches that complete immediately."""
    hits = 0
    for t in range(experts.shape[0]):
        for layer in range(experts.shape[1]):
            h, misses = cache.lookup(layer, experts[t, layer].tolist())
            hits += len(h)
            if cache.is_covered(layer):
                for e in misses:
                    ticket = cache.request_fetch(layer, e)
                    if ticket is not None:
                        cache.complete_fetch(ticket)
    return hits


def uniform_top2(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` i.i.d. uniformly random distinct pairs out of ``n`` experts."""
    first = rng.integers(0, n, size=count)
    second = rng.integers(0, n - 1, size=count)
    second = second + (second >= first)
    return np.stack([first, second], axis=1)


def random_static_rates(n: int, ways: int, accesses: int, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    cache = ExpertCache(
        CacheGeometry.from_slots(ways, ways, 1), 1, n, Policy.RANDOM_STATIC, seed=seed
    )
    for pair in uniform_top2(rng, n, accesses).tolist():
        cache.lookup(0, pair)
    s = cache.stats
    return s.at_least_one_hit[0] / accesses, s.all_k_hit[0] / accesses


def run_checks(seed: int = 0) -> list[Check]:
    checks = []

    model, hw, costs = load_preset("mixtral-8x7b")
    geom = derive_cache_geometry(model, hw, 4)
    checks.append(Check("mixtral geometry slots (4 ways)", geom.total_slots, 56, 0))
    checks.append(Check("mixtral geometry indexes (4 ways)", geom.indexes, 14, 0))

    p_one, p_both = random_policy_hit_rates(8, 4)
    sim_one, sim_both = random_static_rates(8, 4, 100_000, seed)
    checks.append(Check("random-policy n=8 M=4: sim vs 11/14", sim_one, float(p_one), 0.01))
    checks.append(Check("random-policy n=8 M=4 both: sim vs 3/14", sim_both, float(p_both), 0.01))

    rng = np.random.default_rng(seed)
    mismatches = 0
    for i in range(20):
        n = int(rng.integers(2, 9))
        ways = int(rng.integers(1, min(4, n) + 1))
        sets = int(rng.integers(1, 4))
        layers = sets + int(rng.integers(0, 2))
        arr = np.stack(
            [uniform_top2(rng, n, 200) for _ in range(layers)], axis=1
        )
        for policy in ("LRU", "FIFO"):
            cache = ExpertCache(CacheGeometry.from_slots(sets * ways, ways, layers),
                                layers, n, policy)
            ref = ReferenceCache(sets, ways, policy)
            ref_hits = sum(
                ref.access(layer, arr[t, layer].tolist())
                for t in range(arr.shape[0]) for layer in range(layers)
            )
            mismatches += replay_instant(cache, arr) != ref_hits
    checks.append(Check("cache replay vs reference (LRU+FIFO, 20 traces)", mismatches, 0, 0))

    small = generate_trace(model, SynthParams(0.45, 0.0, seed, 20))
    collab = simulate(small, model, costs, zero_geometry(4),
                      Strategy(StrategyTag.COLLABORATIVE, 24), record_events=False)
    cpu = simulate(small, model, costs, zero_geometry(4),
                   Strategy(StrategyTag.CPU_ONLY, 24), record_events=False)
    diff = float(np.max(np.abs(collab.latencies - cpu.latencies)))
    checks.append(Check("S=0 collaborative == CPU_ONLY timings (max |diff| ms)", diff, 0.0, 0.0))

    report = energy_per_token(4.8, costs, 24)
    checks.append(Check("energy identity mixtral: 245.4 W / 4.8 tok/s = 51.1 J/token",
                        report.joules_per_token, 51.1, 0.01 * 51.1))
    _, _, phi_costs = load_preset("phi3.5-moe")
    report = energy_per_token(10.39, phi_costs, 24)
    checks.append(Check("energy identity phi3.5: 227.5 W / 10.39 tok/s = 21.9 J/token",
                        report.joules_per_token, 21.9, 0.01 * 21.9))
    return checks
