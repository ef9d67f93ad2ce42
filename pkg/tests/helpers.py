"""Independent oracles shared by the test modules.

Nothing here imports the code paths it is used to check: the reference
cache, the enumeration oracles and the event-log audits are written from
the definitions directly.
"""

from collections import defaultdict
from fractions import Fraction
from itertools import combinations

import numpy as np


class ListCache:
    """Brute-force set-associative cache, one plain list per set (front = victim)."""

    def __init__(self, sets, ways, policy):
        self.sets = [[] for _ in range(sets)]
        self.ways = ways
        self.policy = policy

    def access(self, layer, experts):
        if layer >= len(self.sets):
            return 0
        entries = self.sets[layer]
        hits = [e for e in experts if e in entries]
        if self.policy == "LRU":
            for e in hits:
                entries.remove(e)
                entries.append(e)
        for e in experts:
            if e not in hits:
                entries.append(e)
                if len(entries) > self.ways:
                    del entries[0]
        return len(hits)


def enumerate_static_hits(n, resident):
    """Exact (P(>=1 hit), P(both hit)) over all C(n, 2) router pairs."""
    pairs = list(combinations(range(n), 2))
    one = sum(1 for p in pairs if set(p) & resident)
    both = sum(1 for p in pairs if set(p) <= resident)
    return Fraction(one, len(pairs)), Fraction(both, len(pairs))


def reuse_probability(p, n, k):
    """P(record shares >= 1 expert with the previous token) for the synthetic generator.

    Enumerates the per-slot probability tree: repeat a not-yet-chosen expert of
    the previous token with probability ``p`` (falling back to a uniform pick
    if none is left), else pick uniformly among experts not yet chosen.
    """
    prev = set(range(k))  # by symmetry any previous set works

    def walk(chosen, slot):
        if slot == k:
            return 1.0 if set(chosen) & prev else 0.0
        rest = [e for e in range(n) if e not in chosen]
        total = 0.0
        carry = [e for e in prev if e not in chosen] or rest
        for e in carry:
            total += p / len(carry) * walk(chosen + [e], slot + 1)
        for e in rest:
            total += (1 - p) / len(rest) * walk(chosen + [e], slot + 1)
        return total

    return walk([], 0)


def audit_events(events, top_k, fetched_only=False, eps=1e-9):
    """Return violations of conservation, channel exclusivity and causality.

    With ``fetched_only`` every GPU expert execution must be preceded in the
    log by a finished fetch of that (layer, expert).
    """
    problems = []
    executions = defaultdict(int)
    lanes = defaultdict(list)
    requested = {}
    arrived = set()
    for ev in events:
        kind = ev.kind.value
        if kind in ("GPU_EXPERT", "CPU_EXPERT"):
            executions[(ev.token, ev.layer)] += 1
        if kind in ("WEIGHT_XFER_START", "ACT_XFER"):
            lane = ("W" if kind == "WEIGHT_XFER_START" else "A", ev.payload["channel"])
            lanes[lane].append((ev.time_ms, ev.time_ms + ev.payload["duration_ms"]))
            if ev.time_ms + eps < ev.payload.get("requested_ms", ev.time_ms):
                problems.append("transfer before its request")
            if "ticket" in ev.payload:
                requested[ev.payload["ticket"]] = (
                    ev.payload["requested_ms"] + ev.payload["duration_ms"]
                )
        if kind == "WEIGHT_XFER_DONE" and "ticket" in ev.payload:
            earliest = requested.get(ev.payload["ticket"])
            if earliest is None or ev.time_ms + eps < earliest:
                problems.append(f"ticket {ev.payload['ticket']} completes too early")
            arrived.add((ev.layer, ev.payload["expert"]))
        if kind == "GPU_EXPERT" and fetched_only:
            if (ev.layer, ev.payload["expert"]) not in arrived:
                problems.append(f"expert {(ev.layer, ev.payload['expert'])} used before arrival")
    for key, count in executions.items():
        if count != top_k:
            problems.append(f"{key}: {count} executions")
    for lane, segs in lanes.items():
        # log order is start order; a FIFO lane must also finish in that order
        for (s0, e0), (s1, e1) in zip(segs, segs[1:]):
            if s1 + eps < e0:
                problems.append(f"lane {lane} overlap at {s1}")
    times = [ev.time_ms for ev in events]
    if times != sorted(times):
        problems.append("log not time ordered")
    return problems


def uniform_pairs(rng, n, count):
    """First two entries of independent random permutations of range(n)."""
    return rng.random((count, n)).argsort(axis=1)[:, :2]
