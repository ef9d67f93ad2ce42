"""
Synthetic routing traces and their locality
===========================================

The generator mixes three choices per expert slot: repeat an expert the
previous token used, copy the layer below, or pick uniformly. The analyzer
measures how often each kind of reuse actually shows up.
"""

from moesim.core import load_preset
from moesim.trace import SynthParams, analyze_patterns, generate_trace

model, _, _ = load_preset("mixtral-8x7b")

for p in (0.0, 0.1, 0.45):
    trace = generate_trace(model, SynthParams(p, 0.0, seed=0, tokens=2000))
    rep = analyze_patterns(trace)
    one = sum(rep.at_least_one_token_reuse_rate_per_layer) / model.num_layers
    both = sum(rep.both_token_reuse_rate_per_layer) / model.num_layers
    print(f"p_token_reuse={p:.2f}: >=1 expert reused {one:.3f}, both reused {both:.3f}")

# a uniform router still repeats an expert 1 - C(6,2)/C(8,2) = 13/28 of the time
print(f"uniform baseline {13 / 28:.3f}")

trace = generate_trace(model, SynthParams(0.0, 0.44, seed=0, tokens=2000))
print(f"layer-follow 0.44 -> consecutive-layer match "
      f"{analyze_patterns(trace).consecutive_layer_match_rate:.3f}")
