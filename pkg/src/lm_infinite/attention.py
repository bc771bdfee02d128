"""Multi-head scaled-dot-product attention over the lambda mask.

Two execution paths share one module so the test suite can hold them
against each other:

* ``vanilla_causal`` — standard dense causal attention at raw distances,
  the quadratic baseline (and the thing that breaks past the training
  length).
* ``lambda`` — a per-row loop over the two allowed ranges with clamped
  effective distances, O(n) work and memory. It never materializes a
  dense matrix, and it never falls back to the dense path for short
  sequences; the equivalence of the two on short inputs is a theorem the
  tests check, not a dispatch shortcut.

Both paths have an analytic backward (``attend_with_stash`` /
``attend_backward``) used by the trainable model. Everything runs in
float64.

For RoPE in lambda mode, keys are kept unrotated for the far branch and
the query is rotated once to the clamp distance: for a far key j,
<R(l_pretrain) q_i, k_j> equals the logit at effective distance
l_pretrain. Near keys (true distance <= l_pretrain) use the standard
identity <R(i) q_i, R(j) k_j> = <R(i-j) q_i, k_j>.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lm_infinite.encoding import (
    AlibiParams,
    RopeParams,
    apply_rotation_f64,
    rope_cos_sin,
)
from lm_infinite.errors import CacheStateError, NanDetectedError
from lm_infinite.kv_cache import KvCache
from lm_infinite.masking import MaskParams, build_mask

MODES = ("vanilla_causal", "lambda")


@dataclass(frozen=True)
class AttentionConfig:
    n_heads: int
    head_dim: int
    mask_params: MaskParams
    encoding: object  # RopeParams | AlibiParams
    mode: str = "lambda"

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not isinstance(self.mask_params, MaskParams):
            raise ValueError("mask_params must be a MaskParams")
        if isinstance(self.encoding, RopeParams):
            if self.encoding.head_dim != self.head_dim:
                raise ValueError(
                    f"encoding head_dim {self.encoding.head_dim} != {self.head_dim}"
                )
        elif isinstance(self.encoding, AlibiParams):
            if len(self.encoding.slopes) != self.n_heads:
                raise ValueError(
                    f"need one slope per head: {len(self.encoding.slopes)} slopes "
                    f"for {self.n_heads} heads"
                )
        else:
            raise ValueError("encoding must be RopeParams or AlibiParams")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def is_rope(self) -> bool:
        return isinstance(self.encoding, RopeParams)


@dataclass(frozen=True)
class CaptureSpec:
    """Opt-in diagnostics retention; everything off keeps attend O(n) memory."""

    weights: bool = False
    entropy: bool = False
    last_row_logits: bool = False

    @property
    def any(self) -> bool:
        return self.weights or self.entropy or self.last_row_logits


@dataclass
class AttentionOutput:
    values: np.ndarray  # (seq_len, n_heads * head_dim)
    weights: list | None = None  # per row: (n_heads, row_size)
    key_indices: list | None = None  # per row: (row_size,) int
    row_entropy: np.ndarray | None = None  # (n_heads, seq_len)
    last_logits: np.ndarray | None = None  # (n_heads, last row size)
    last_indices: np.ndarray | None = None
    last_distances: np.ndarray | None = None  # clamped (lambda) or raw (vanilla)


@dataclass
class SingleStepOutput:
    values: np.ndarray  # (n_heads * head_dim,)
    weights: np.ndarray  # (n_heads, n_keys) over ascending positions
    positions: np.ndarray
    distances: np.ndarray


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _entropy_rows(w: np.ndarray) -> np.ndarray:
    logs = np.log(np.where(w > 0.0, w, 1.0))
    return -(w * logs).sum(axis=-1)


def _check_nan(q, k, v):
    for name, arr in (("q", q), ("k", k), ("v", v)):
        bad = np.isnan(arr)
        if bad.any():
            rows = bad.any(axis=(-1, -2))
            where = np.argwhere(rows)[0]
            if where.size == 1:
                raise NanDetectedError(f"NaN in attention input {name} at row {where[0]}")
            raise NanDetectedError(
                f"NaN in attention input {name} at batch {where[0]}, row {where[1]}"
            )


# ---------------------------------------------------------------------------
# Dense path (vanilla causal): raw distances, quadratic by nature.
# ---------------------------------------------------------------------------


@dataclass
class _DenseStash:
    config: AttentionConfig
    w: np.ndarray
    qr: np.ndarray
    kr: np.ndarray
    v: np.ndarray
    cos: np.ndarray | None
    sin: np.ndarray | None
    logits: np.ndarray | None


def _dense_forward(q, k, v, config, keep_logits=False):
    # Work head-major (..., H, S, hd) so the big contractions are stacked
    # GEMMs instead of einsum's generic loop.
    seq_len = q.shape[-3]
    scale = 1.0 / math.sqrt(config.head_dim)
    qh = np.ascontiguousarray(np.swapaxes(q, -3, -2))
    kh = np.ascontiguousarray(np.swapaxes(k, -3, -2))
    vh = np.ascontiguousarray(np.swapaxes(v, -3, -2))
    cos = sin = None
    if config.is_rope:
        cos, sin = rope_cos_sin(np.arange(seq_len), config.encoding)
        qh = apply_rotation_f64(qh, cos, sin)
        kh = apply_rotation_f64(kh, cos, sin)
    logits = (qh @ np.swapaxes(kh, -1, -2)) * scale
    if not config.is_rope:
        dist = np.arange(seq_len)[:, None] - np.arange(seq_len)[None, :]
        slopes = np.asarray(config.encoding.slopes, dtype=np.float64)
        logits = logits - slopes[:, None, None] * dist
    allowed = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    zmax = np.max(np.where(allowed, logits, -np.inf), axis=-1, keepdims=True)
    e = np.exp(np.where(allowed, logits - zmax, -np.inf))
    w = e / e.sum(axis=-1, keepdims=True)
    out = np.swapaxes(w @ vh, -3, -2)
    stash = _DenseStash(
        config, w, qh, kh, vh, cos, sin, logits if keep_logits else None
    )
    return out, stash


def _dense_backward(stash, d_out):
    config = stash.config
    scale = 1.0 / math.sqrt(config.head_dim)
    w, qh, kh, vh = stash.w, stash.qr, stash.kr, stash.v
    d_out_h = np.ascontiguousarray(np.swapaxes(d_out, -3, -2))
    dv = np.swapaxes(w, -1, -2) @ d_out_h
    dw = d_out_h @ np.swapaxes(vh, -1, -2)
    dz = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
    dq = (dz @ kh) * scale
    dk = (np.swapaxes(dz, -1, -2) @ qh) * scale
    if config.is_rope:
        dq = apply_rotation_f64(dq, stash.cos, -stash.sin)
        dk = apply_rotation_f64(dk, stash.cos, -stash.sin)
    return (
        np.swapaxes(dq, -3, -2),
        np.swapaxes(dk, -3, -2),
        np.swapaxes(dv, -3, -2),
    )


# ---------------------------------------------------------------------------
# Lambda path: per-row loop over the two allowed ranges, O(n) work.
# ---------------------------------------------------------------------------


@dataclass
class _LambdaStash:
    config: AttentionConfig
    rows: list  # per row: (far_hi, g_hi, l_lo, l_hi, weights)
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_rot: np.ndarray | None
    k_rot: np.ndarray | None
    q_clamp: np.ndarray | None
    cos: np.ndarray | None
    sin: np.ndarray | None
    cos_clamp: np.ndarray | None
    sin_clamp: np.ndarray | None


def _lambda_forward(q, k, v, config, capture=None, keep_logits=False):
    capture = capture or CaptureSpec()
    seq_len, n_heads, _ = q.shape
    params = config.mask_params
    clamp = params.l_pretrain
    scale = 1.0 / math.sqrt(config.head_dim)
    mask = build_mask(seq_len, params)

    q_rot = k_rot = q_clamp = cos = sin = cos_clamp = sin_clamp = None
    slopes = None
    if config.is_rope:
        c, s = rope_cos_sin(np.arange(seq_len), config.encoding)
        cos, sin = c[:, None, :], s[:, None, :]
        q_rot = apply_rotation_f64(q, cos, sin)
        k_rot = apply_rotation_f64(k, cos, sin)
        cos_clamp, sin_clamp = rope_cos_sin(clamp, config.encoding)
        q_clamp = apply_rotation_f64(q, cos_clamp, sin_clamp)
    else:
        slopes = np.asarray(config.encoding.slopes, dtype=np.float64)

    out = np.empty_like(v)
    rows = []
    row_entropy = np.empty((n_heads, seq_len)) if capture.entropy else None
    weights_list = [] if capture.weights else None
    indices_list = [] if capture.weights else None
    last = None

    for i in range(seq_len):
        _, g_hi, l_lo, l_hi = mask.row_ranges(i)
        far_hi = min(g_hi, max(0, i - clamp))
        if config.is_rope:
            parts = []
            if far_hi > 0:
                parts.append(np.einsum("hd,jhd->hj", q_clamp[i], k[:far_hi]))
            if g_hi > far_hi:
                parts.append(np.einsum("hd,jhd->hj", q_rot[i], k_rot[far_hi:g_hi]))
            parts.append(np.einsum("hd,jhd->hj", q_rot[i], k_rot[l_lo:l_hi]))
            logits = np.concatenate(parts, axis=1) * scale
        else:
            if g_hi > 0:
                kk = np.concatenate([k[:g_hi], k[l_lo:l_hi]], axis=0)
            else:
                kk = k[l_lo:l_hi]
            js = np.concatenate([np.arange(g_hi), np.arange(l_lo, l_hi)])
            d_eff = np.minimum(i - js, clamp)
            logits = np.einsum("hd,jhd->hj", q[i], kk) * scale - slopes[:, None] * d_eff
        w = _softmax(logits)
        if g_hi > 0:
            vv = np.concatenate([v[:g_hi], v[l_lo:l_hi]], axis=0)
        else:
            vv = v[l_lo:l_hi]
        out[i] = np.einsum("hj,jhd->hd", w, vv)
        rows.append((far_hi, g_hi, l_lo, l_hi, w))
        if capture.entropy:
            row_entropy[:, i] = _entropy_rows(w)
        if capture.weights:
            weights_list.append(w)
            indices_list.append(
                np.concatenate([np.arange(g_hi), np.arange(l_lo, l_hi)])
            )
        if (capture.last_row_logits or keep_logits) and i == seq_len - 1:
            js = np.concatenate([np.arange(g_hi), np.arange(l_lo, l_hi)])
            last = (logits.copy(), js, np.minimum(i - js, clamp))

    stash = _LambdaStash(
        config, rows, q, k, v, q_rot, k_rot, q_clamp, cos, sin, cos_clamp, sin_clamp
    )
    return out, stash, row_entropy, weights_list, indices_list, last


def _lambda_backward(stash, d_out):
    config = stash.config
    scale = 1.0 / math.sqrt(config.head_dim)
    q, k, v = stash.q, stash.k, stash.v
    dv = np.zeros_like(v)
    if config.is_rope:
        d_q_rot = np.zeros_like(q)
        d_q_clamp = np.zeros_like(q)
        d_k_rot = np.zeros_like(k)
        d_k_raw = np.zeros_like(k)
    else:
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)

    for i, (far_hi, g_hi, l_lo, l_hi, w) in enumerate(stash.rows):
        if g_hi > 0:
            vv = np.concatenate([v[:g_hi], v[l_lo:l_hi]], axis=0)
        else:
            vv = v[l_lo:l_hi]
        dw = np.einsum("hd,jhd->hj", d_out[i], vv)
        dv_row = np.einsum("hj,hd->jhd", w, d_out[i])
        dv[:g_hi] += dv_row[:g_hi]
        dv[l_lo:l_hi] += dv_row[g_hi:]
        dz = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        if config.is_rope:
            dz_far = dz[:, :far_hi]
            dz_near = dz[:, far_hi:g_hi]
            dz_loc = dz[:, g_hi:]
            if far_hi > 0:
                d_q_clamp[i] += np.einsum("hj,jhd->hd", dz_far, k[:far_hi]) * scale
                d_k_raw[:far_hi] += (
                    np.einsum("hj,hd->jhd", dz_far, stash.q_clamp[i]) * scale
                )
            if g_hi > far_hi:
                d_q_rot[i] += (
                    np.einsum("hj,jhd->hd", dz_near, stash.k_rot[far_hi:g_hi]) * scale
                )
                d_k_rot[far_hi:g_hi] += (
                    np.einsum("hj,hd->jhd", dz_near, stash.q_rot[i]) * scale
                )
            d_q_rot[i] += np.einsum("hj,jhd->hd", dz_loc, stash.k_rot[l_lo:l_hi]) * scale
            d_k_rot[l_lo:l_hi] += np.einsum("hj,hd->jhd", dz_loc, stash.q_rot[i]) * scale
        else:
            if g_hi > 0:
                kk = np.concatenate([k[:g_hi], k[l_lo:l_hi]], axis=0)
            else:
                kk = k[l_lo:l_hi]
            dq[i] = np.einsum("hj,jhd->hd", dz, kk) * scale
            dk_row = np.einsum("hj,hd->jhd", dz, q[i]) * scale
            dk[:g_hi] += dk_row[:g_hi]
            dk[l_lo:l_hi] += dk_row[g_hi:]

    if config.is_rope:
        dq = apply_rotation_f64(d_q_rot, stash.cos, -stash.sin) + apply_rotation_f64(
            d_q_clamp, stash.cos_clamp, -stash.sin_clamp
        )
        dk = apply_rotation_f64(d_k_rot, stash.cos, -stash.sin) + d_k_raw
    return dq, dk, dv


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def _validate_qkv(q, k, v, config, batched_ok):
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if q.ndim == 3:
        pass
    elif q.ndim == 4 and batched_ok:
        pass
    else:
        raise ValueError(
            f"expected (seq_len, n_heads, head_dim){' or batched' if batched_ok else ''},"
            f" got shape {q.shape}"
        )
    if q.shape[-2] != config.n_heads or q.shape[-1] != config.head_dim:
        raise ValueError(
            f"trailing dims {q.shape[-2:]} do not match "
            f"(n_heads, head_dim) = ({config.n_heads}, {config.head_dim})"
        )
    if q.shape[-3] < 1:
        raise ValueError("seq_len must be >= 1")


def attend(q_seq, k_seq, v_seq, config: AttentionConfig, capture=None) -> AttentionOutput:
    """Full-sequence attention. Inputs are (seq_len, n_heads, head_dim).

    Returns per-position outputs flattened to (seq_len, n_heads*head_dim),
    plus whatever the CaptureSpec asked to retain.
    """
    capture = capture or CaptureSpec()
    q = np.asarray(q_seq, dtype=np.float64)
    k = np.asarray(k_seq, dtype=np.float64)
    v = np.asarray(v_seq, dtype=np.float64)
    _validate_qkv(q, k, v, config, batched_ok=False)
    _check_nan(q, k, v)
    seq_len = q.shape[0]

    if config.mode == "lambda":
        out, _, row_entropy, weights_list, indices_list, last = _lambda_forward(
            q, k, v, config, capture
        )
        result = AttentionOutput(values=out.reshape(seq_len, -1))
        result.row_entropy = row_entropy
        result.weights = weights_list
        result.key_indices = indices_list
        if last is not None:
            result.last_logits, result.last_indices, result.last_distances = last
        return result

    out, stash = _dense_forward(q, k, v, config, keep_logits=capture.last_row_logits)
    result = AttentionOutput(values=out.reshape(seq_len, -1))
    if capture.entropy:
        result.row_entropy = _entropy_rows(stash.w)  # (n_heads, seq_len)
    if capture.weights:
        result.weights = [stash.w[:, i, : i + 1].copy() for i in range(seq_len)]
        result.key_indices = [np.arange(i + 1) for i in range(seq_len)]
    if capture.last_row_logits:
        result.last_logits = stash.logits[:, seq_len - 1, :].copy()
        result.last_indices = np.arange(seq_len)
        result.last_distances = seq_len - 1 - np.arange(seq_len)
    return result


def attend_with_stash(q_seq, k_seq, v_seq, config: AttentionConfig):
    """Forward pass retaining what the analytic backward needs.

    Accepts (seq_len, n_heads, head_dim) or a batched
    (batch, seq_len, n_heads, head_dim); returns (values, stash) with
    values un-flattened. Pair with attend_backward.
    """
    q = np.asarray(q_seq, dtype=np.float64)
    k = np.asarray(k_seq, dtype=np.float64)
    v = np.asarray(v_seq, dtype=np.float64)
    _validate_qkv(q, k, v, config, batched_ok=True)
    _check_nan(q, k, v)
    if config.mode == "vanilla_causal":
        out, stash = _dense_forward(q, k, v, config)
        return out, stash
    if q.ndim == 3:
        out, stash, *_ = _lambda_forward(q, k, v, config)
        return out, stash
    outs, stashes = [], []
    for b in range(q.shape[0]):
        o, s, *_ = _lambda_forward(q[b], k[b], v[b], config)
        outs.append(o)
        stashes.append(s)
    return np.stack(outs), stashes


def attend_backward(stash, d_values):
    """Gradients of attend_with_stash w.r.t. (q, k, v)."""
    d_values = np.asarray(d_values, dtype=np.float64)
    if isinstance(stash, _DenseStash):
        return _dense_backward(stash, d_values)
    if isinstance(stash, _LambdaStash):
        return _lambda_backward(stash, d_values)
    dqs, dks, dvs = [], [], []
    for b, s in enumerate(stash):
        dq, dk, dv = _lambda_backward(s, d_values[b])
        dqs.append(dq)
        dks.append(dk)
        dvs.append(dv)
    return np.stack(dqs), np.stack(dks), np.stack(dvs)


def attend_single(
    q, k_self, v_self, cache: KvCache, config: AttentionConfig, *, position: int
) -> SingleStepOutput:
    """One decode step at ``position`` against a cache of earlier entries.

    The cache cannot hold the current token (it is pushed after this call),
    so the token's own key/value are passed explicitly — every row attends
    at least to itself. Entries are filtered to the exact mask row: pinned
    entries always qualify, window entries only within n_local - 1 steps
    (the ring keeps one more than the row admits). Matches the full-
    sequence lambda attend() row to numerical precision.
    """
    if config.mode != "lambda":
        raise ValueError("attend_single implements the lambda policy; "
                         "vanilla decoding keeps a growing dense context instead")
    if position != cache.next_position:
        raise CacheStateError(
            f"query position {position} does not match cache next_position "
            f"{cache.next_position}"
        )
    n_heads, head_dim = config.n_heads, config.head_dim
    q = np.asarray(q, dtype=np.float64).reshape(n_heads, head_dim)
    k_self = np.asarray(k_self, dtype=np.float64).reshape(n_heads, head_dim)
    v_self = np.asarray(v_self, dtype=np.float64).reshape(n_heads, head_dim)
    _check_nan(q[None], k_self[None], v_self[None])
    params = config.mask_params

    entries = [
        e
        for e in cache.visible_entries(position)
        if e.position < params.n_global or e.position > position - params.n_local
    ]
    ks = [e.k.reshape(n_heads, head_dim) for e in entries] + [k_self]
    vs = [e.v.reshape(n_heads, head_dim) for e in entries] + [v_self]
    positions = np.array([e.position for e in entries] + [position])
    distances = np.array([e.effective_distance for e in entries] + [0])
    ks = np.stack(ks)  # (E, n_heads, head_dim)
    vs = np.stack(vs)
    scale = 1.0 / math.sqrt(head_dim)

    if config.is_rope:
        cos, sin = rope_cos_sin(distances, config.encoding)  # (E, head_dim//2)
        q_rot = apply_rotation_f64(
            np.broadcast_to(q, ks.shape), cos[:, None, :], sin[:, None, :]
        )
        logits = np.einsum("ehd,ehd->he", q_rot, ks) * scale
    else:
        slopes = np.asarray(config.encoding.slopes, dtype=np.float64)
        logits = np.einsum("hd,ehd->he", q, ks) * scale - slopes[:, None] * distances

    w = _softmax(logits)
    values = np.einsum("he,ehd->hd", w, vs).reshape(-1)
    return SingleStepOutput(values=values, weights=w, positions=positions, distances=distances)
