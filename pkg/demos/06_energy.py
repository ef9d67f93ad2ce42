"""
Energy per generated token
==========================

Package power at a given thread count divided by the decode rate. The
attention time per layer is not known up front, so it is fitted to a
target peak rate before the energy numbers are read off.
"""

from moesim.core import derive_cache_geometry, load_preset
from moesim.engine import Strategy, StrategyTag, simulate
from moesim.metrics import calibrate_t_other, energy_per_token, throughput
from moesim.trace import SynthParams, generate_trace

for name, target in (("mixtral-8x7b", 4.8), ("phi3.5-moe", 10.4)):
    model, hw, costs = load_preset(name)
    trace = generate_trace(model, SynthParams(0.45, 0.0, seed=0, tokens=100))
    fitted = calibrate_t_other(trace, model, hw, costs, target)
    print(f"{name}: attention time fitted to {fitted:.3f} ms/layer (preset {costs.t_other_layer_ms})")

    for threads in (1, 8, 24):
        best = max(
            throughput(simulate(trace, model, costs, derive_cache_geometry(model, hw, w),
                                Strategy(StrategyTag.COLLABORATIVE, threads), record_events=False))
            for w in (2, 4, 8)
        )
        e = energy_per_token(best, costs, threads)
        print(f"  {threads:2d} threads: {best:5.2f} tok/s, {e.p_cpu + e.p_gpu:5.1f} W, "
              f"{e.joules_per_token:5.1f} J/token")
