"""
Four ways to run experts that do not fit on the GPU
===================================================

CPU_ONLY ships activations to the CPU, ON_DEMAND copies weights before every
layer, PREFETCH_IDEAL overlaps those copies perfectly, and COLLABORATIVE
keeps an expert cache on the GPU and runs misses on the CPU while the
missing weights are copied in the background.
"""

from moesim.core import derive_cache_geometry, load_preset, zero_geometry
from moesim.engine import Strategy, StrategyTag, simulate
from moesim.metrics import compare_strategies
from moesim.trace import SynthParams, generate_trace

model, hw, costs = load_preset("mixtral-8x7b")
trace = generate_trace(model, SynthParams(0.45, 0.0, seed=0, tokens=200))

runs = {
    tag.value: simulate(trace, model, costs, zero_geometry(), Strategy(tag, 24), record_events=False)
    for tag in (StrategyTag.ON_DEMAND, StrategyTag.PREFETCH_IDEAL, StrategyTag.CPU_ONLY)
}
for ways in (2, 4, 8):
    runs[f"COLLABORATIVE ways={ways}"] = simulate(
        trace, model, costs, derive_cache_geometry(model, hw, ways),
        Strategy(StrategyTag.COLLABORATIVE, 24), record_events=False,
    )

for row in compare_strategies(runs, "ON_DEMAND", costs):
    print(f"{row.label:26s} {row.throughput_tps:6.2f} tok/s  x{row.speedup:4.2f}  "
          f"{row.joules_per_token:6.1f} J/token")

# where the time goes in a steady-state collaborative token
t = runs["COLLABORATIVE ways=4"].token_timings[-1]
names = ("other", "gpu", "cpu", "activation", "stall")
print({k: round(float(v), 2) for k, v in zip(names, t.breakdown.sum(axis=0))})
