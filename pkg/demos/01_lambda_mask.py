#!/usr/bin/env python3
"""Lambda-shaped attention masks: what each position is allowed to see.

A lambda mask keeps two things per query row: a pinned prefix of n_global
tokens from the very start of the stream, and a sliding window of the
n_local most recent tokens. Everything in between is dropped. This script
prints the masks for a few small cases and shows how the visible set stays
bounded while a causal mask keeps growing.
"""

import numpy as np

from lm_infinite.masking import (
    MaskParams,
    build_mask,
    effective_distance,
    mask_density,
)

# --- a 5-token toy case you can check by eye -------------------------------
params = MaskParams(n_global=1, n_local=2, l_pretrain=8)
mask = build_mask(5, params)

print("n_global=1, n_local=2, seq_len=5")
print("dense mask (rows = queries, cols = keys, 1 = visible):")
for row in mask.dense():
    print("   ", "".join("1" if x else "0" for x in row))

print("\nper-row index ranges:")
for i in range(mask.seq_len):
    g_lo, g_hi, l_lo, l_hi = mask.row_ranges(i)
    print(f"    row {i}: global [{g_lo},{g_hi})  local [{l_lo},{l_hi})"
          f"  -> visible {[int(j) for j in mask.row_indices(i)]}")

# --- the visible set is bounded, causal attention is not -------------------
params = MaskParams(n_global=4, n_local=16, l_pretrain=16)
print("\nn_global=4, n_local=16: visible keys per row vs a causal mask")
for n in (8, 16, 64, 256, 1024):
    m = build_mask(n, params)
    last = m.row_size(n - 1)
    print(f"    seq_len {n:5d}: last row sees {last:2d} keys"
          f" (causal would see {n}); density {mask_density(m):.3f}")

# --- distances fed to the positional encoding are clamped ------------------
print("\neffective (clamped) distance for query 40, l_pretrain=16:")
i = 40
for j in (40, 39, 30, 24, 3, 0):
    d = effective_distance(i, j, params)
    tag = " (clamped)" if i - j > params.l_pretrain else ""
    print(f"    key {j:2d}: raw {i - j:2d} -> effective {d}{tag}")

print("\nThe far keys all collapse to the same effective distance, so the")
print("positional machinery never operates outside the range it saw in")
print("training, no matter how long the stream grows.")
