"""A small decoder-only transformer with manual backprop, at desk scale.

Architecture: token embedding -> n_layers x [pre-norm attention + pre-norm
GeLU MLP, residual] -> final layer norm -> untied LM head. Everything is
float64 numpy; gradients are hand-written and finite-difference checked.

The same weights serve both attention modes: training runs at
seq_len = train_len <= n_local, where the lambda mask degenerates to the
causal mask and every distance sits below the clamp, so the dense vanilla
path is used for throughput and the resulting model is mode-agnostic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import erf

from lm_infinite.attention import (
    AttentionConfig,
    CaptureSpec,
    attend,
    attend_backward,
    attend_single,
    attend_with_stash,
)
from lm_infinite.encoding import (
    AlibiParams,
    RopeParams,
    apply_rotation_f64,
    default_alibi_slopes,
    rope_cos_sin,
)
from lm_infinite.errors import (
    CacheStateError,
    NanDetectedError,
    TrainingDivergedError,
)
from lm_infinite.kv_cache import KvCache
from lm_infinite.masking import MaskParams
from lm_infinite.rng import SplitMix64, derive_stream

_LN_EPS = 1e-5
_INIT_STD = 0.02
_MAGIC = b"LMTM"
_VERSION = 1

ENCODINGS = ("rope", "alibi")


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    train_len: int = 128
    n_global: int = 16
    n_local: int = 128
    l_pretrain: int = 128
    encoding: str = "rope"
    rope_base: float = 10000.0
    mode: str = "lambda"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")
        if self.train_len < 8:
            raise ValueError("train_len must be >= 8")
        if self.encoding not in ENCODINGS:
            raise ValueError(f"encoding must be one of {ENCODINGS}")
        # Delegate mask validation early so bad configs fail at construction.
        self.mask_params  # noqa: B018

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mask_params(self) -> MaskParams:
        return MaskParams(
            n_global=self.n_global, n_local=self.n_local, l_pretrain=self.l_pretrain
        )

    @property
    def attention(self) -> AttentionConfig:
        return self.attention_for(self.mode)

    def attention_for(self, mode: str) -> AttentionConfig:
        if self.encoding == "rope":
            enc = RopeParams(head_dim=self.head_dim, base=self.rope_base)
        else:
            enc = AlibiParams(slopes=default_alibi_slopes(self.n_heads))
        return AttentionConfig(
            n_heads=self.n_heads,
            head_dim=self.head_dim,
            mask_params=self.mask_params,
            encoding=enc,
            mode=mode,
        )


def _param_shapes(config: ToyModelConfig) -> dict:
    d, hidden = config.d_model, 4 * config.d_model
    shapes = {"embedding": (config.vocab_size, d)}
    for i in range(config.n_layers):
        p = f"layer{i}"
        shapes[f"{p}/ln1/gamma"] = (d,)
        shapes[f"{p}/ln1/beta"] = (d,)
        shapes[f"{p}/attn/wq"] = (d, d)
        shapes[f"{p}/attn/wk"] = (d, d)
        shapes[f"{p}/attn/wv"] = (d, d)
        shapes[f"{p}/attn/wo"] = (d, d)
        shapes[f"{p}/ln2/gamma"] = (d,)
        shapes[f"{p}/ln2/beta"] = (d,)
        shapes[f"{p}/mlp/w1"] = (d, hidden)
        shapes[f"{p}/mlp/b1"] = (hidden,)
        shapes[f"{p}/mlp/w2"] = (hidden, d)
        shapes[f"{p}/mlp/b2"] = (d,)
    shapes["ln_f/gamma"] = (d,)
    shapes["ln_f/beta"] = (d,)
    shapes["head"] = (d, config.vocab_size)
    return shapes


class ToyModel:
    def __init__(self, config: ToyModelConfig, params: dict):
        self.config = config
        self.params = params

    def copy(self) -> "ToyModel":
        return ToyModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init(config: ToyModelConfig) -> ToyModel:
    """Deterministic init: each tensor gets its own named splitmix64 stream,
    so parameter values depend only on (seed, tensor name, shape)."""
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(("beta", "b1", "b2")):
            params[name] = np.zeros(shape)
        else:
            stream = SplitMix64(derive_stream(config.seed, f"init/{name}"))
            params[name] = stream.normal(shape, std=_INIT_STD)
    return ToyModel(config, params)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _layer_norm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layer_norm_backward(dy, stash):
    xhat, inv, gamma = stash
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def _check_ids(ids, vocab_size):
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.min() < 0 or ids.max() >= vocab_size:
        bad = ids.min() if ids.min() < 0 else ids.max()
        raise ValueError(f"token id {bad} outside vocabulary of size {vocab_size}")
    return ids


def _find_nan(x):
    rows = np.isnan(x).any(axis=-1)
    where = np.argwhere(rows)
    return where[0][-1] if len(where) else None


@dataclass
class ModelTrace:
    """Diagnostics retained from one forward pass."""

    hidden: list  # per layer: residual stream AFTER the block, (seq_len, d_model)
    attention: list  # per layer: AttentionOutput with requested captures
    embedded: np.ndarray | None = None


def _forward(model, ids, att_config, need_stash=False, capture=None, hidden=False):
    cfg = model.config
    p = model.params
    x = p["embedding"][ids]  # (..., seq_len, d_model)
    stash = {"ids": ids, "layers": []} if need_stash else None
    trace = ModelTrace(hidden=[], attention=[], embedded=x if hidden else None) if (
        capture is not None or hidden
    ) else None
    heads_shape = x.shape[:-1] + (cfg.n_heads, cfg.head_dim)

    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        h, ln1 = _layer_norm(x, p[f"{pre}/ln1/gamma"], p[f"{pre}/ln1/beta"])
        q = (h @ p[f"{pre}/attn/wq"]).reshape(heads_shape)
        k = (h @ p[f"{pre}/attn/wk"]).reshape(heads_shape)
        v = (h @ p[f"{pre}/attn/wv"]).reshape(heads_shape)
        try:
            if capture is not None:
                att_out = attend(q, k, v, att_config, capture)
                trace.attention.append(att_out)
                a_flat = att_out.values
                att_stash = None
            else:
                a, att_stash = attend_with_stash(q, k, v, att_config)
                a_flat = a.reshape(x.shape)
        except NanDetectedError as exc:
            raise NanDetectedError(f"layer {i}: {exc}") from None
        attn_proj = a_flat.reshape(x.shape) @ p[f"{pre}/attn/wo"]
        x_mid = x + attn_proj
        pos = _find_nan(x_mid)
        if pos is not None:
            raise NanDetectedError(f"NaN after attention in layer {i}, position {pos}")
        h2, ln2 = _layer_norm(x_mid, p[f"{pre}/ln2/gamma"], p[f"{pre}/ln2/beta"])
        u = h2 @ p[f"{pre}/mlp/w1"] + p[f"{pre}/mlp/b1"]
        g = _gelu(u)
        mlp_out = g @ p[f"{pre}/mlp/w2"] + p[f"{pre}/mlp/b2"]
        x_next = x_mid + mlp_out
        pos = _find_nan(x_next)
        if pos is not None:
            raise NanDetectedError(f"NaN after MLP in layer {i}, position {pos}")
        if need_stash:
            stash["layers"].append(
                {
                    "h": h,
                    "ln1": ln1,
                    "q": q,
                    "k": k,
                    "v": v,
                    "att": att_stash,
                    "a_flat": a_flat.reshape(x.shape),
                    "ln2": ln2,
                    "h2": h2,
                    "u": u,
                    "g": g,
                }
            )
        if trace is not None:
            trace.hidden.append(x_next if x_next.ndim == 2 else x_next[0])
        x = x_next

    hf, lnf = _layer_norm(x, p["ln_f/gamma"], p["ln_f/beta"])
    logits = hf @ p["head"]
    if need_stash:
        stash["lnf"] = lnf
        stash["hf"] = hf
    return logits, stash, trace


def forward(model: ToyModel, tokens, mode: str | None = None) -> np.ndarray:
    """Per-position logits over the vocabulary, shape (seq_len, vocab)."""
    ids = _check_ids(tokens, model.config.vocab_size)
    if ids.ndim != 1:
        raise ValueError(f"tokens must be one-dimensional, got shape {ids.shape}")
    att_config = model.config.attention_for(mode or model.config.mode)
    logits, _, _ = _forward(model, ids, att_config)
    return logits


def forward_traced(
    model: ToyModel,
    tokens,
    mode: str | None = None,
    capture: CaptureSpec | None = None,
    hidden: bool = False,
):
    """Forward plus a ModelTrace carrying per-layer attention captures and
    (optionally) residual-stream states; used by the diagnostics module."""
    ids = _check_ids(tokens, model.config.vocab_size)
    if ids.ndim != 1:
        raise ValueError(f"tracing expects a single sequence, got shape {ids.shape}")
    att_config = model.config.attention_for(mode or model.config.mode)
    logits, _, trace = _forward(
        model, ids, att_config, capture=capture or CaptureSpec(), hidden=hidden
    )
    return logits, trace


def _loss_and_grads(model, ids, att_config):
    """Mean next-token NLL over all positions, plus parameter gradients."""
    cfg = model.config
    p = model.params
    logits, stash, _ = _forward(model, ids, att_config, need_stash=True)
    targets = ids[..., 1:]
    pred = logits[..., :-1, :]
    zmax = pred.max(axis=-1, keepdims=True)
    z = pred - zmax
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - lse
    n_pred = targets.size
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)
    loss = -picked.sum() / n_pred

    # dNLL/dlogits = (softmax - onehot) / n_pred at predicting positions.
    grad_pred = np.exp(log_probs)
    flat = grad_pred.reshape(-1, cfg.vocab_size)
    flat[np.arange(flat.shape[0]), targets.reshape(-1)] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[..., :-1, :] = grad_pred / n_pred

    grads = {name: None for name in p}
    hf = stash["hf"]
    axes = tuple(range(hf.ndim - 1))
    grads["head"] = np.tensordot(hf, dlogits, axes=(axes, axes))
    dhf = dlogits @ p["head"].T
    dx, dg, db = _layer_norm_backward(dhf, stash["lnf"])
    grads["ln_f/gamma"], grads["ln_f/beta"] = dg, db

    demb = np.zeros_like(p["embedding"])
    for i in reversed(range(cfg.n_layers)):
        pre = f"layer{i}"
        st = stash["layers"][i]
        # MLP branch
        dmlp = dx
        grads[f"{pre}/mlp/b2"] = dmlp.sum(axis=axes)
        grads[f"{pre}/mlp/w2"] = np.tensordot(st["g"], dmlp, axes=(axes, axes))
        dgelu = dmlp @ p[f"{pre}/mlp/w2"].T
        du = dgelu * _gelu_grad(st["u"])
        grads[f"{pre}/mlp/b1"] = du.sum(axis=axes)
        grads[f"{pre}/mlp/w1"] = np.tensordot(st["h2"], du, axes=(axes, axes))
        dh2 = du @ p[f"{pre}/mlp/w1"].T
        dx_mid, dg2, db2 = _layer_norm_backward(dh2, st["ln2"])
        grads[f"{pre}/ln2/gamma"], grads[f"{pre}/ln2/beta"] = dg2, db2
        dx_mid = dx_mid + dx
        # Attention branch
        dattn_proj = dx_mid
        grads[f"{pre}/attn/wo"] = np.tensordot(
            st["a_flat"], dattn_proj, axes=(axes, axes)
        )
        da_flat = dattn_proj @ p[f"{pre}/attn/wo"].T
        da = da_flat.reshape(st["q"].shape)
        dq, dk, dv = attend_backward(st["att"], da)
        flat_shape = st["h"].shape
        dh = (
            dq.reshape(flat_shape) @ p[f"{pre}/attn/wq"].T
            + dk.reshape(flat_shape) @ p[f"{pre}/attn/wk"].T
            + dv.reshape(flat_shape) @ p[f"{pre}/attn/wv"].T
        )
        grads[f"{pre}/attn/wq"] = np.tensordot(
            st["h"], dq.reshape(flat_shape), axes=(axes, axes)
        )
        grads[f"{pre}/attn/wk"] = np.tensordot(
            st["h"], dk.reshape(flat_shape), axes=(axes, axes)
        )
        grads[f"{pre}/attn/wv"] = np.tensordot(
            st["h"], dv.reshape(flat_shape), axes=(axes, axes)
        )
        dx_in, dg1, db1 = _layer_norm_backward(dh, st["ln1"])
        grads[f"{pre}/ln1/gamma"], grads[f"{pre}/ln1/beta"] = dg1, db1
        dx = dx_mid + dx_in

    np.add.at(demb, stash["ids"].reshape(-1), dx.reshape(-1, cfg.d_model))
    grads["embedding"] = demb
    return float(loss), grads


def loss_and_grads(model: ToyModel, tokens, mode: str | None = None):
    """Public wrapper: mean next-token NLL and gradients for a batch
    (batch, seq_len) or single sequence (seq_len,)."""
    ids = _check_ids(tokens, model.config.vocab_size)
    if ids.ndim == 1 and ids.size < 2 or ids.ndim == 2 and ids.shape[1] < 2:
        raise ValueError("need at least 2 tokens to form a prediction target")
    att_config = model.config.attention_for(mode or model.config.mode)
    return _loss_and_grads(model, ids, att_config)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ToyModel
    loss_trace: list  # one float per step


def train(
    model: ToyModel,
    corpus,
    steps: int,
    lr: float = 1e-3,
    batch_shape: tuple = (16, None),
    mode: str | None = None,
    seed: int | None = None,
    beta1: float = 0.9,
    beta2: float = 0.95,
    adam_eps: float = 1e-8,
) -> TrainResult:
    """Adam on mean next-token NLL over windows sampled from the corpus.

    Windows are train_len+1 tokens (inputs plus shifted targets); sequences
    too short to provide one are ignored. Training defaults to the dense
    vanilla path — identical to lambda at train_len <= n_local — because
    the batched dense kernels are what numpy runs fast.

    The model is updated in place and also returned inside TrainResult.
    """
    cfg = model.config
    batch, seq_len = batch_shape
    if seq_len is None:
        seq_len = cfg.train_len
    seq_len = min(seq_len, cfg.train_len)  # truncation to the training limit
    if batch < 1 or seq_len < 2:
        raise ValueError(f"bad batch_shape {batch_shape}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    mode = mode or "vanilla_causal"
    att_config = cfg.attention_for(mode)
    eligible = [np.asarray(s) for s in corpus if len(s) >= seq_len + 1]
    if steps > 0 and not eligible:
        raise ValueError(
            f"corpus has no sequence of length >= {seq_len + 1} to train on"
        )
    stream = SplitMix64(derive_stream(cfg.seed if seed is None else seed, "data-order"))

    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    trace = []
    for step in range(steps):
        picks = stream.integers(0, len(eligible), batch)
        rows = []
        for s in picks:
            seq = eligible[int(s)]
            hi = len(seq) - (seq_len + 1)
            off = int(stream.integers(0, hi + 1, 1)[0])
            rows.append(seq[off : off + seq_len + 1])
        ids = np.stack(rows)
        try:
            loss, grads = _loss_and_grads(model, ids, att_config)
        except NanDetectedError as exc:
            raise TrainingDivergedError(f"diverged at step {step}: {exc}") from None
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"training loss became {loss} at step {step}")
        trace.append(loss)
        t = step + 1
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for name in sorted(model.params):
            g = grads[name]
            m_state[name] = beta1 * m_state[name] + (1.0 - beta1) * g
            v_state[name] = beta2 * v_state[name] + (1.0 - beta2) * (g * g)
            update = (m_state[name] / bc1) / (np.sqrt(v_state[name] / bc2) + adam_eps)
            model.params[name] -= lr * update
    return TrainResult(model=model, loss_trace=trace)


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------


class DecodeSession:
    """Streaming per-token decoding state for one sequence.

    In lambda mode each layer owns a bounded KvCache (push-after-attend, so
    the query never sees a stale copy of itself). In vanilla mode the
    per-layer keys/values simply grow without bound — the quadratic
    baseline. Either way step() advances one token and returns the logits
    for the next position.
    """

    def __init__(self, model: ToyModel, mode: str | None = None):
        self.model = model
        self.mode = mode or model.config.mode
        self.att_config = model.config.attention_for(self.mode)
        self.position = 0
        cfg = model.config
        if self.mode == "lambda":
            self.layer_caches = [
                KvCache(cfg.mask_params) for _ in range(cfg.n_layers)
            ]
        else:
            self._keys = [[] for _ in range(cfg.n_layers)]
            self._values = [[] for _ in range(cfg.n_layers)]
            if cfg.encoding != "rope":
                self._slopes = np.asarray(default_alibi_slopes(cfg.n_heads))

    def peak_cache_entries(self) -> int:
        if self.mode == "lambda":
            return max(len(c) for c in self.layer_caches)
        return max(len(k) for k in self._keys)

    def _vanilla_attend(self, layer, q, k, v):
        cfg = self.model.config
        pos = self.position
        scale = 1.0 / np.sqrt(cfg.head_dim)
        if cfg.encoding == "rope":
            enc = self.att_config.encoding
            cos, sin = rope_cos_sin(pos, enc)
            q = apply_rotation_f64(q, cos, sin)
            k = apply_rotation_f64(k, cos, sin)  # vanilla: keys keep absolute angles
        self._keys[layer].append(k)
        self._values[layer].append(v)
        ks = np.stack(self._keys[layer])  # (t+1, n_heads, head_dim)
        vs = np.stack(self._values[layer])
        logits = np.einsum("hd,jhd->hj", q, ks) * scale
        if cfg.encoding != "rope":
            dist = pos - np.arange(ks.shape[0])
            logits = logits - self._slopes[:, None] * dist
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        w = e / e.sum(axis=-1, keepdims=True)
        return np.einsum("hj,jhd->hd", w, vs).reshape(-1)

    def step(self, token: int) -> np.ndarray:
        """Consume one token, return next-position logits (vocab,)."""
        cfg = self.model.config
        p = self.model.params
        token = int(token)
        if not 0 <= token < cfg.vocab_size:
            raise ValueError(f"token id {token} outside vocabulary")
        x = p["embedding"][token]
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            h, _ = _layer_norm(x, p[f"{pre}/ln1/gamma"], p[f"{pre}/ln1/beta"])
            q = (h @ p[f"{pre}/attn/wq"]).reshape(cfg.n_heads, cfg.head_dim)
            k = (h @ p[f"{pre}/attn/wk"]).reshape(cfg.n_heads, cfg.head_dim)
            v = (h @ p[f"{pre}/attn/wv"]).reshape(cfg.n_heads, cfg.head_dim)
            if self.mode == "lambda":
                out = attend_single(
                    q, k, v, self.layer_caches[i], self.att_config,
                    position=self.position,
                )
                self.layer_caches[i].push(k, v)
                a = out.values
            else:
                a = self._vanilla_attend(i, q, k, v)
            x = x + a @ p[f"{pre}/attn/wo"]
            if np.isnan(x).any():
                raise NanDetectedError(
                    f"NaN after attention in layer {i}, position {self.position}"
                )
            h2, _ = _layer_norm(x, p[f"{pre}/ln2/gamma"], p[f"{pre}/ln2/beta"])
            x = x + _gelu(h2 @ p[f"{pre}/mlp/w1"] + p[f"{pre}/mlp/b1"]) @ p[
                f"{pre}/mlp/w2"
            ] + p[f"{pre}/mlp/b2"]
            if np.isnan(x).any():
                raise NanDetectedError(
                    f"NaN after MLP in layer {i}, position {self.position}"
                )
        self.position += 1
        hf, _ = _layer_norm(x, p["ln_f/gamma"], p["ln_f/beta"])
        return hf @ p["head"]


def generate(
    model: ToyModel,
    prompt,
    n_new: int,
    mode: str | None = None,
    cache: DecodeSession | None = None,
) -> np.ndarray:
    """Greedy continuation of ``prompt``; returns the n_new generated ids.

    Without a cache every step reruns the full forward pass — the slow,
    obviously-correct oracle. With a DecodeSession the same tokens come out
    of the incremental path (asserted by tests at exact token equality).
    The session must be fresh; it is prefilled with the prompt here. To
    continue from mid-stream state, drive the session's step() directly.
    """
    if n_new < 1:
        raise ValueError(f"n_new must be >= 1, got {n_new}")
    ids = _check_ids(prompt, model.config.vocab_size)
    mode = mode or model.config.mode
    out = []

    if cache is None:
        context = list(ids)
        for _ in range(n_new):
            logits = forward(model, np.asarray(context), mode=mode)
            nxt = int(np.argmax(logits[-1]))
            out.append(nxt)
            context.append(nxt)
        return np.asarray(out)

    if cache.mode != mode:
        raise CacheStateError(
            f"session mode {cache.mode!r} does not match requested {mode!r}"
        )
    if cache.position != 0:
        raise CacheStateError(
            f"generate() needs a fresh session, got one at position "
            f"{cache.position}; drive a mid-stream session with step() directly"
        )
    logits = None
    for t in ids:
        logits = cache.step(int(t))
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = cache.step(nxt)
    return np.asarray(out)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = (
    "vocab_size", "d_model", "n_layers", "n_heads", "train_len",
    "n_global", "n_local", "l_pretrain", "encoding", "rope_base", "mode", "seed",
)


def save_model(model: ToyModel, path) -> None:
    """Checkpoint: magic, u32 version, length-prefixed key=value config
    block, then named tensors (u32 name length, name, u32 ndim, u32 dims,
    little-endian f32 data), names sorted."""
    cfg = model.config
    lines = "".join(f"{f}={getattr(cfg, f)}\n" for f in _CONFIG_FIELDS)
    blob = lines.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(model.params):
            arr = model.params[name]
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> ToyModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    fields = {}
    for line in blob[off : off + cfg_len].decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key] = value
    off += cfg_len
    kwargs = {}
    for key, value in fields.items():
        if key in ("encoding", "mode"):
            kwargs[key] = value
        elif key == "rope_base":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    config = ToyModelConfig(**kwargs)
    params = {}
    expected = _param_shapes(config)
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        params[name] = arr.astype(np.float64).reshape(shape)
    missing = set(expected) - set(params)
    if missing:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)[:3]}...")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ValueError(
                f"{path}: tensor {name} has shape {params[name].shape}, "
                f"expected {shape}"
            )
    return ToyModel(config, params)
