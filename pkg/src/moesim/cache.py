"""N-index x M-way set-associative expert cache.

Layer ``l`` maps directly to set ``l`` (experts are layer-exclusive, so no
hashing is involved); layers at or beyond the number of indexes are never
cached. Fetches are two-phase: ``request_fetch`` registers a pending
transfer and hands back a ticket, ``complete_fetch`` inserts the expert
once the engine has drained the transfer.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import CacheGeometry


class Policy(str, enum.Enum):
    LRU = "LRU"
    FIFO = "FIFO"
    RANDOM_STATIC = "RANDOM_STATIC"


class UncoveredLayerError(ValueError):
    """A fetch was requested for a layer the cache does not cover."""


@dataclass(frozen=True)
class FetchTicket:
    layer: int
    expert: int
    ticket_id: int
    generation: int


class CacheStats:
    """Per-layer hit counters. Uncovered layers count as accesses with no hits."""

    def __init__(self, num_layers: int, experts_per_layer: int):
        self.accesses = np.zeros(num_layers, dtype=np.int64)
        self.at_least_one_hit = np.zeros(num_layers, dtype=np.int64)
        self.all_k_hit = np.zeros(num_layers, dtype=np.int64)
        self.coverage_misses = np.zeros(num_layers, dtype=np.int64)
        self.expert_hits = np.zeros((num_layers, experts_per_layer), dtype=np.int64)
        self.expert_misses = np.zeros((num_layers, experts_per_layer), dtype=np.int64)
        self.evictions = 0
        self.suppressed_fetches = 0

    def to_dict(self) -> dict:
        return {
            "accesses": self.accesses.tolist(),
            "at_least_one_hit": self.at_least_one_hit.tolist(),
            "all_k_hit": self.all_k_hit.tolist(),
            "coverage_misses": self.coverage_misses.tolist(),
            "expert_hits": self.expert_hits.tolist(),
            "expert_misses": self.expert_misses.tolist(),
            "evictions": self.evictions,
            "suppressed_fetches": self.suppressed_fetches,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheStats":
        hits = np.asarray(d["expert_hits"], dtype=np.int64)
        stats = cls(*hits.shape)
        for key in ("accesses", "at_least_one_hit", "all_k_hit", "coverage_misses"):
            setattr(stats, key, np.asarray(d[key], dtype=np.int64))
        stats.expert_hits = hits
        stats.expert_misses = np.asarray(d["expert_misses"], dtype=np.int64)
        stats.evictions = int(d["evictions"])
        stats.suppressed_fetches = int(d["suppressed_fetches"])
        return stats


class ExpertCache:
    def __init__(
        self,
        geometry: CacheGeometry,
        num_layers: int,
        experts_per_layer: int,
        policy: Policy | str = Policy.LRU,
        seed: int | None = None,
    ):
        self.geometry = geometry
        self.policy = Policy(policy)
        self.num_layers = num_layers
        self.experts_per_layer = experts_per_layer
        self.covered = min(geometry.indexes, num_layers)
        self.ways = geometry.ways
        # OrderedDict order is eviction order: first item goes first.
        self.sets: list[OrderedDict[int, None]] = [OrderedDict() for _ in range(self.covered)]
        self.pending: dict[tuple[int, int], FetchTicket] = {}
        self.stats = CacheStats(num_layers, experts_per_layer)
        self._outstanding: set[int] = set()
        self._next_ticket = 0
        self._generation: dict[tuple[int, int], int] = {}

        if self.policy is Policy.RANDOM_STATIC:
            rng = np.random.default_rng(seed)
            fill = min(self.ways, experts_per_layer)
            for s in self.sets:
                for e in sorted(rng.choice(experts_per_layer, size=fill, replace=False)):
                    s[int(e)] = None

    def is_covered(self, layer: int) -> bool:
        return layer < self.covered

    def residents(self, layer: int) -> list[int]:
        return list(self.sets[layer]) if self.is_covered(layer) else []

    def __contains__(self, key: tuple[int, int]) -> bool:
        layer, expert = key
        return self.is_covered(layer) and expert in self.sets[layer]

    def lookup(self, layer: int, experts) -> tuple[list[int], list[int]]:
        """Split ``experts`` into resident hits and misses, preserving order."""
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} outside [0, {self.num_layers})")
        stats = self.stats
        stats.accesses[layer] += 1
        if not self.is_covered(layer):
            stats.coverage_misses[layer] += 1
            misses = list(experts)
            for e in misses:
                stats.expert_misses[layer, e] += 1
            return [], misses

        s = self.sets[layer]
        hits, misses = [], []
        for e in experts:
            if e in s:
                hits.append(e)
                stats.expert_hits[layer, e] += 1
                if self.policy is Policy.LRU:
                    s.move_to_end(e)
            else:
                misses.append(e)
                stats.expert_misses[layer, e] += 1
        if hits:
            stats.at_least_one_hit[layer] += 1
            if not misses:
                stats.all_k_hit[layer] += 1
        return hits, misses

    def request_fetch(self, layer: int, expert: int) -> FetchTicket | None:
        """Register a pending host-to-device copy, or ``None`` if suppressed."""
        if not self.is_covered(layer):
            raise UncoveredLayerError(f"layer {layer} is beyond cache coverage ({self.covered})")
        key = (layer, expert)
        if (
            self.policy is Policy.RANDOM_STATIC
            or key in self.pending
            or expert in self.sets[layer]
        ):
            self.stats.suppressed_fetches += 1
            return None
        generation = self._generation.get(key, 0) + 1
        self._generation[key] = generation
        ticket = FetchTicket(layer, expert, self._next_ticket, generation)
        self._next_ticket += 1
        self.pending[key] = ticket
        self._outstanding.add(ticket.ticket_id)
        return ticket

    def complete_fetch(self, ticket: FetchTicket) -> tuple[int, int] | None:
        """Insert the fetched expert; return the evicted (layer, expert) if any."""
        if ticket.ticket_id not in self._outstanding:
            raise ValueError(f"ticket {ticket.ticket_id} is not outstanding")
        self._outstanding.discard(ticket.ticket_id)
        key = (ticket.layer, ticket.expert)
        if self.pending.get(key) != ticket:
            return None  # stale: superseded by a newer request
        del self.pending[key]

        s = self.sets[ticket.layer]
        s[ticket.expert] = None
        s.move_to_end(ticket.expert)
        if len(s) > self.ways:
            victim, _ = s.popitem(last=False)
            self.stats.evictions += 1
            return ticket.layer, victim
        return None


def random_policy_hit_rates(n: int, ways: int, k: int = 2) -> tuple[Fraction, Fraction]:
    """Exact hit probabilities for a static random resident set and top-2 routing.

    Returns ``(P(at least one hit), P(both hit))`` for ``ways`` residents out
    of ``n`` experts, with the router picking 2 distinct experts uniformly.
    """
    if k != 2:
        raise ValueError("closed form only covers top-2 routing")
    if not 1 <= ways <= n:
        raise ValueError(f"need 1 <= ways <= n, got ways={ways}, n={n}")
    if n < 2:
        raise ValueError("need at least 2 experts for top-2 routing")
    p_none = Fraction(n - ways, n) * Fraction(n - ways - 1, n - 1)
    p_both = Fraction(ways, n) * Fraction(ways - 1, n - 1)
    return 1 - p_none, p_both
