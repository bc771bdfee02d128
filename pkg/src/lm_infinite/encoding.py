"""Rotary (RoPE) and Alibi relative positional encodings, plus the
distance-limited logit ops used by the lambda attention path.

Adjacent component pairs (x_{2a}, x_{2a+1}) form the rotation planes.
All trig and dot-product accumulation runs in float64; public outputs are
stored in float32. The *_f64 helpers keep full precision for callers (the
attention/model stack) that need it for gradient checking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RopeParams:
    """Rotary-encoding constants: per-pair speeds omega_a = base**(-2a/head_dim)."""

    head_dim: int
    base: float = 10000.0

    def __post_init__(self):
        if not isinstance(self.head_dim, (int, np.integer)) or isinstance(self.head_dim, bool):
            raise ValueError(f"head_dim must be an integer, got {self.head_dim!r}")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not (float(self.base) > 0.0 and math.isfinite(self.base)):
            raise ValueError(f"base must be positive and finite, got {self.base}")

    def omegas(self) -> np.ndarray:
        """Rotation speeds, strictly decreasing, omega_0 = 1. Shape (head_dim//2,)."""
        a = np.arange(self.head_dim // 2, dtype=np.float64)
        return np.asarray(self.base, dtype=np.float64) ** (-2.0 * a / self.head_dim)


@dataclass(frozen=True)
class AlibiParams:
    """One positive slope per head."""

    slopes: tuple

    def __post_init__(self):
        slopes = tuple(float(m) for m in self.slopes)
        if len(slopes) < 1:
            raise ValueError("need at least one slope")
        for m in slopes:
            if not (m > 0.0 and math.isfinite(m)):
                raise ValueError(f"slopes must be positive and finite, got {m}")
        object.__setattr__(self, "slopes", slopes)


def default_alibi_slopes(n_heads: int) -> tuple:
    """Geometric head slopes m_h = 2**(-8h/H), h = 1..H."""
    if n_heads < 1:
        raise ValueError(f"n_heads must be >= 1, got {n_heads}")
    return tuple(2.0 ** (-8.0 * h / n_heads) for h in range(1, n_heads + 1))


def rope_cos_sin(positions, params: RopeParams):
    """Float64 cos/sin tables for the given positions.

    Returns (cos, sin) shaped positions.shape + (head_dim//2,), ready to
    broadcast against vectors whose trailing axis is head_dim.
    """
    pos = np.asarray(positions, dtype=np.float64)
    angles = pos[..., None] * params.omegas()
    return np.cos(angles), np.sin(angles)


def apply_rotation_f64(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate adjacent pairs of the trailing axis; float64 in, float64 out.

    cos/sin must broadcast against x[..., ::2]. Pass -sin to invert, which
    is also the transpose — handy for backpropagating through a rotation.
    """
    x = np.asarray(x, dtype=np.float64)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _check_vector(name: str, x: np.ndarray, head_dim: int):
    if x.shape[-1] != head_dim:
        raise ValueError(
            f"{name} has trailing dimension {x.shape[-1]}, expected head_dim {head_dim}"
        )


def rope_rotate(x, position: int, params: RopeParams) -> np.ndarray:
    """Rotate pair (x_{2a}, x_{2a+1}) by angle position * omega_a.

    Accepts a single vector or any (..., head_dim) stack. Output norm
    equals input norm; position 0 is the identity.
    """
    arr = np.asarray(x, dtype=np.float64)
    _check_vector("x", arr, params.head_dim)
    if position < 0:
        raise ValueError(f"position must be >= 0, got {position}")
    cos, sin = rope_cos_sin(position, params)
    return apply_rotation_f64(arr, cos, sin).astype(np.float32)


def rope_logit(q, k, dist: int, params: RopeParams) -> float:
    """Distance-limited rotary attention logit.

    Computes <rope_rotate(q, dist), k> / sqrt(head_dim) with k unrotated.
    ``dist`` must already be clamped (see masking.effective_distance):
    the true distance for local-branch pairs, l_pretrain for global ones.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_vector("q", q, params.head_dim)
    _check_vector("k", k, params.head_dim)
    if q.shape != k.shape:
        raise ValueError(f"q/k shape mismatch: {q.shape} vs {k.shape}")
    if dist < 0:
        raise ValueError(f"dist must be >= 0, got {dist}")
    cos, sin = rope_cos_sin(dist, params)
    rotated = apply_rotation_f64(q, cos, sin)
    value = np.sum(rotated * k, axis=-1) / math.sqrt(params.head_dim)
    return float(np.float32(value))


def alibi_logit(q, k, dist: int, slope: float) -> float:
    """Linear-bias attention logit <q,k>/sqrt(head_dim) - slope * dist.

    ``dist`` must already be clamped, which is what keeps the bias from
    ever dropping below -slope * l_pretrain.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise ValueError(f"q/k must be equal-length vectors, got {q.shape} vs {k.shape}")
    if not math.isfinite(slope) or slope < 0.0:
        raise ValueError(f"slope must be finite and >= 0, got {slope}")
    if dist < 0:
        raise ValueError(f"dist must be >= 0, got {dist}")
    value = float(q @ k) / math.sqrt(q.shape[-1]) - slope * dist
    return float(np.float32(value))
