"""
How much expert cache fits on the GPU
=====================================

Whatever memory is left after the always-resident weights is cut into
expert-sized slots. The slots are then arranged as N indexes (one per
covered layer) by M ways.
"""

from moesim.core import GiB, MiB, derive_cache_geometry, load_preset

model, hw, costs = load_preset("mixtral-8x7b")
print(f"usable {hw.usable_bytes / GiB:.2f} GiB, resident {model.resident_bytes / GiB:.0f} GiB, "
      f"expert {model.bytes_per_expert / MiB:.0f} MiB")

# the same slot budget, shaped three ways
for ways in (2, 4, 8):
    g = derive_cache_geometry(model, hw, ways)
    print(f"ways={ways}: {g.total_slots} slots -> {g.indexes} indexes, "
          f"layers 0..{g.covered_layers - 1} covered")

# smaller experts mean more slots, but 16 experts per layer need deeper sets
model, hw, _ = load_preset("phi3.5-moe")
g = derive_cache_geometry(model, hw, 8)
print(f"{model.name}: {g.total_slots} slots, {g.indexes} indexes, {g.covered_layers} covered")
