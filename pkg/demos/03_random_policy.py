"""
Hit rate of a static random cache
=================================

With M of n experts pinned at random and a router picking two distinct
experts uniformly, the hit probabilities have a closed form. Here it is
compared with a direct simulation and with LRU on a trace that has reuse.
"""

import numpy as np

from moesim.cache import ExpertCache, Policy, random_policy_hit_rates
from moesim.core import CacheGeometry, ModelSpec
from moesim.trace import SynthParams, generate_trace

rng = np.random.default_rng(0)
n = 8
for ways in (2, 4, 6):
    one, both = random_policy_hit_rates(n, ways)
    cache = ExpertCache(CacheGeometry.from_slots(ways, ways, 1), 1, n, Policy.RANDOM_STATIC, 1)
    for pair in rng.random((50_000, n)).argsort(axis=1)[:, :2].tolist():
        cache.lookup(0, pair)
    s = cache.stats
    print(f"M={ways}: closed form {float(one):.4f} / {float(both):.4f}, "
          f"simulated {s.at_least_one_hit[0] / s.accesses[0]:.4f} / "
          f"{s.all_k_hit[0] / s.accesses[0]:.4f}")

# LRU exploits token-to-token reuse; the static set cannot
model = ModelSpec("demo", 1, n, 2, 1, 0)
trace = generate_trace(model, SynthParams(0.45, 0.0, seed=2, tokens=20_000))
lru = ExpertCache(CacheGeometry.from_slots(4, 4, 1), 1, n, Policy.LRU)
for (sel,) in trace.experts.tolist():
    _, misses = lru.lookup(0, sel)
    for e in misses:
        lru.complete_fetch(lru.request_fetch(0, e))
print(f"LRU M=4 on reuse-heavy trace: {lru.stats.at_least_one_hit[0] / lru.stats.accesses[0]:.4f}"
      f" vs static {float(random_policy_hit_rates(n, 4)[0]):.4f}")
