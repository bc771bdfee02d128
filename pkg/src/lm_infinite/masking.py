"""Lambda-shaped attention masks and clamped effective distances.

Each query row may attend to a pinned prefix of ``n_global`` starting keys
plus a sliding window of the ``n_local`` most recent keys. Rows are kept as
two disjoint half-open ranges, never a dense matrix, so memory stays O(n).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskParams:
    """Branch sizes of the mask plus the distance clamp bound."""

    n_global: int
    n_local: int
    l_pretrain: int

    def __post_init__(self):
        for field in ("n_global", "n_local", "l_pretrain"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ValueError(f"{field} must be an integer, got {value!r}")
        if self.n_global < 0:
            raise ValueError("n_global must be >= 0")
        if self.n_local < 1:
            raise ValueError("n_local must be >= 1")
        if self.l_pretrain < 1:
            raise ValueError("l_pretrain must be >= 1")
        if self.n_local > self.l_pretrain:
            raise ValueError(
                f"n_local ({self.n_local}) must not exceed l_pretrain ({self.l_pretrain})"
            )


@dataclass(frozen=True)
class LambdaMask:
    """Per-row allowed key ranges for a sequence of ``seq_len`` queries.

    Row i allows {j : j < n_global and j <= i} united with
    {j : i - n_local < j <= i}. The global range is truncated where it
    would overlap the local window, so every key appears exactly once.
    """

    seq_len: int
    params: MaskParams

    def row_ranges(self, i: int) -> tuple[int, int, int, int]:
        """(global_lo, global_hi, local_lo, local_hi) half-open, disjoint."""
        if not 0 <= i < self.seq_len:
            raise ValueError(f"row index {i} out of range [0, {self.seq_len})")
        local_lo = max(0, i + 1 - self.params.n_local)
        local_hi = i + 1
        global_lo = 0
        global_hi = min(self.params.n_global, i + 1, local_lo)
        return global_lo, global_hi, local_lo, local_hi

    def row_indices(self, i: int) -> np.ndarray:
        g_lo, g_hi, l_lo, l_hi = self.row_ranges(i)
        return np.concatenate([np.arange(g_lo, g_hi), np.arange(l_lo, l_hi)])

    def row_size(self, i: int) -> int:
        g_lo, g_hi, l_lo, l_hi = self.row_ranges(i)
        return (g_hi - g_lo) + (l_hi - l_lo)

    def dense(self) -> np.ndarray:
        """O(n^2) boolean materialization; test-oracle and display helper only."""
        out = np.zeros((self.seq_len, self.seq_len), dtype=bool)
        for i in range(self.seq_len):
            out[i, self.row_indices(i)] = True
        return out


def build_mask(seq_len: int, params: MaskParams) -> LambdaMask:
    """Construct the mask for ``seq_len`` queries.

    For seq_len <= n_local every local window covers the whole prefix, so
    the mask degenerates to the plain causal lower triangle. n_global = 0
    is legal but known to degrade generation quality on long sequences.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    return LambdaMask(seq_len=seq_len, params=params)


def effective_distance(i: int, j: int, params: MaskParams) -> int:
    """Clamped query-key distance min(i - j, l_pretrain).

    Keys inside the local window always keep their true distance because
    n_local <= l_pretrain; only far global keys saturate at the clamp.
    """
    if j > i:
        raise ValueError(f"anti-causal pair: key {j} is after query {i}")
    return min(i - j, params.l_pretrain)


def mask_density(mask: LambdaMask) -> float:
    """Fraction of the causal triangle the mask retains, in (0, 1]."""
    total = sum(mask.row_size(i) for i in range(mask.seq_len))
    causal = mask.seq_len * (mask.seq_len + 1) // 2
    return total / causal
