"""
Indexes versus ways across CPU thread counts
============================================

With few CPU threads every miss is expensive, so covering more layers
(more indexes) pays off. With many threads the CPU absorbs misses cheaply
and deeper sets per layer win instead.
"""

from moesim.core import load_preset
from moesim.engine import run_sweep
from moesim.metrics import hit_rate_report, throughput
from moesim.trace import SynthParams, generate_trace

model, hw, costs = load_preset("mixtral-8x7b")
trace = generate_trace(model, SynthParams(0.45, 0.0, seed=0, tokens=200))
threads, ways = (1, 2, 4, 8, 16, 24), (2, 4, 8)
grid = [(t, w) for t in threads for w in ways]
results = dict(zip(grid, run_sweep(trace, model, hw, costs, grid, jobs=4)))

print("threads " + "".join(f"{f'({results[(1, w)].geometry.indexes},{w})':>10s}" for w in ways))
for t in threads:
    row = [throughput(results[(t, w)]) for w in ways]
    best = ways[row.index(max(row))]
    print(f"{t:7d} " + "".join(f"{v:10.2f}" for v in row) + f"   best ways={best}")

for w in ways:
    rep = hit_rate_report(results[(24, w)])
    print(f"ways={w}: hit >=1 {rep.covered_at_least_one:.3f}, both {rep.covered_all_k:.3f} "
          f"(covered layers), {rep.all_layers_at_least_one:.3f} over all layers")
