"""Attention paths checked against a dense additive-mask oracle and finite
differences. The oracle composes the scalar logit ops with the dense mask,
so the O(n) range-based implementation is held against the formula itself."""

import numpy as np
import pytest

from lm_infinite.attention import (
    AttentionConfig,
    CaptureSpec,
    attend,
    attend_backward,
    attend_single,
    attend_with_stash,
)
from lm_infinite.encoding import AlibiParams, RopeParams, alibi_logit, rope_logit
from lm_infinite.errors import CacheStateError, NanDetectedError
from lm_infinite.kv_cache import KvCache
from lm_infinite.masking import MaskParams, build_mask, effective_distance

HEADS, HEAD_DIM = 2, 4


def make_config(mode, encoding_kind, n_global=2, n_local=5, l_pretrain=8):
    params = MaskParams(n_global=n_global, n_local=n_local, l_pretrain=l_pretrain)
    if encoding_kind == "rope":
        enc = RopeParams(head_dim=HEAD_DIM)
    else:
        enc = AlibiParams(slopes=(0.5, 0.125))
    return AttentionConfig(
        n_heads=HEADS, head_dim=HEAD_DIM, mask_params=params, encoding=enc, mode=mode
    )


def oracle_attend(q, k, v, config):
    """Dense additive masking: full logit matrix from the scalar ops, -1e30
    outside the allowed set, softmax over the whole row."""
    seq_len = q.shape[0]
    params = config.mask_params
    if config.mode == "lambda":
        allowed = build_mask(seq_len, params).dense()
    else:
        allowed = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    logits = np.full((HEADS, seq_len, seq_len), -1e30)
    for i in range(seq_len):
        for j in range(i + 1):
            if not allowed[i, j]:
                continue
            if config.mode == "lambda":
                d = effective_distance(i, j, params)
            else:
                d = i - j
            for h in range(HEADS):
                if config.is_rope:
                    logits[h, i, j] = rope_logit(q[i, h], k[j, h], d, config.encoding)
                else:
                    logits[h, i, j] = alibi_logit(
                        q[i, h], k[j, h], d, config.encoding.slopes[h]
                    )
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("hij,jhd->ihd", w, v)
    return out.reshape(seq_len, -1), w


def random_qkv(rng, seq_len):
    shape = (seq_len, HEADS, HEAD_DIM)
    return rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape)


@pytest.mark.parametrize("mode", ["lambda", "vanilla_causal"])
@pytest.mark.parametrize("kind", ["rope", "alibi"])
@pytest.mark.parametrize("seq_len", [1, 3, 16])
def test_matches_dense_oracle(mode, kind, seq_len):
    # seq_len=16 makes both mask branches and the distance clamp bind.
    rng = np.random.default_rng(hash((mode, kind, seq_len)) % 2**32)
    config = make_config(mode, kind)
    q, k, v = random_qkv(rng, seq_len)
    got = attend(q, k, v, config)
    want, _ = oracle_attend(q, k, v, config)
    assert np.allclose(got.values, want, atol=1e-5)


def test_singleton_sequence():
    config = make_config("lambda", "rope")
    rng = np.random.default_rng(1)
    q, k, v = random_qkv(rng, 1)
    out = attend(q, k, v, config, CaptureSpec(weights=True))
    assert np.allclose(out.values[0], v[0].reshape(-1), atol=1e-12)
    assert out.weights[0].shape == (HEADS, 1)
    assert np.allclose(out.weights[0], 1.0)


@pytest.mark.parametrize("kind", ["rope", "alibi"])
def test_short_sequence_lambda_equals_vanilla(kind):
    # seq_len <= min(n_local, l_pretrain): the mask is causal and every
    # distance is below the clamp, so the two modes must agree.
    rng = np.random.default_rng(2)
    for seq_len in (1, 3, 5):
        q, k, v = random_qkv(rng, seq_len)
        a = attend(q, k, v, make_config("lambda", kind))
        b = attend(q, k, v, make_config("vanilla_causal", kind))
        assert np.allclose(a.values, b.values, atol=1e-5)


def test_uniform_weights_on_worked_example():
    # Zero queries give all-equal logits under RoPE, so each row's weight
    # spreads uniformly over its allowed set: the 5-row mask example.
    config = make_config("lambda", "rope", n_global=1, n_local=2, l_pretrain=512)
    rng = np.random.default_rng(3)
    q = np.zeros((5, HEADS, HEAD_DIM))
    k = rng.normal(size=(5, HEADS, HEAD_DIM))
    v = rng.normal(size=(5, HEADS, HEAD_DIM))
    out = attend(q, k, v, config, CaptureSpec(weights=True))
    sizes = [1, 2, 3, 3, 3]
    for i, size in enumerate(sizes):
        assert out.weights[i].shape == (HEADS, size)
        assert np.allclose(out.weights[i], 1.0 / size, atol=1e-12)
    assert out.key_indices[3].tolist() == [0, 2, 3]


@pytest.mark.parametrize("mode", ["lambda", "vanilla_causal"])
def test_weights_row_stochastic_and_on_mask(mode):
    config = make_config(mode, "rope")
    rng = np.random.default_rng(4)
    q, k, v = random_qkv(rng, 14)
    out = attend(q, k, v, config, CaptureSpec(weights=True))
    mask = build_mask(14, config.mask_params)
    for i in range(14):
        assert np.allclose(out.weights[i].sum(axis=1), 1.0, atol=1e-5)
        assert np.all(out.weights[i] >= 0)
        if mode == "lambda":
            assert out.key_indices[i].tolist() == mask.row_indices(i).tolist()
        else:
            assert out.key_indices[i].tolist() == list(range(i + 1))


def test_head_permutation_equivariance():
    rng = np.random.default_rng(5)
    q, k, v = random_qkv(rng, 12)
    perm = [1, 0]
    # RoPE treats heads identically; Alibi needs its slopes permuted too.
    for kind in ("rope", "alibi"):
        config = make_config("lambda", kind)
        if kind == "alibi":
            permuted_enc = AlibiParams(
                slopes=tuple(config.encoding.slopes[p] for p in perm)
            )
            config2 = AttentionConfig(
                HEADS, HEAD_DIM, config.mask_params, permuted_enc, "lambda"
            )
        else:
            config2 = config
        base = attend(q, k, v, config).values.reshape(12, HEADS, HEAD_DIM)
        swapped = attend(q[:, perm], k[:, perm], v[:, perm], config2).values.reshape(
            12, HEADS, HEAD_DIM
        )
        assert np.allclose(swapped, base[:, perm], atol=1e-12)


@pytest.mark.parametrize("mode", ["lambda", "vanilla_causal"])
def test_stable_at_huge_logits(mode):
    # Logits up to ~1e4 must not overflow thanks to max subtraction.
    config = make_config(mode, "rope")
    rng = np.random.default_rng(6)
    q, k, v = random_qkv(rng, 10)
    q *= 100.0
    k *= 100.0
    with np.errstate(over="raise", invalid="raise"):
        out = attend(q, k, v, config, CaptureSpec(weights=True))
    assert np.all(np.isfinite(out.values))
    for w in out.weights:
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-5)


def test_nan_input_names_row():
    config = make_config("lambda", "rope")
    rng = np.random.default_rng(7)
    q, k, v = random_qkv(rng, 6)
    q[4, 1, 2] = np.nan
    with pytest.raises(NanDetectedError, match="row 4"):
        attend(q, k, v, config)


def test_shape_validation():
    config = make_config("lambda", "rope")
    rng = np.random.default_rng(8)
    q, k, v = random_qkv(rng, 6)
    with pytest.raises(ValueError):
        attend(q, k[:5], v, config)
    with pytest.raises(ValueError):
        attend(q[:, :, :3], k[:, :, :3], v[:, :, :3], config)
    with pytest.raises(ValueError):
        AttentionConfig(HEADS, HEAD_DIM, config.mask_params, config.encoding, "fast")
    with pytest.raises(ValueError):
        AttentionConfig(HEADS, 5, config.mask_params, config.encoding, "lambda")
    with pytest.raises(ValueError):
        AttentionConfig(3, HEAD_DIM, config.mask_params, AlibiParams((0.5, 0.25)), "lambda")


def fd_gradient(f, x, h=1e-5):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = f()
        flat[idx] = orig - h
        down = f()
        flat[idx] = orig
        grad.reshape(-1)[idx] = (up - down) / (2 * h)
    return grad


@pytest.mark.parametrize("mode", ["lambda", "vanilla_causal"])
@pytest.mark.parametrize("kind", ["rope", "alibi"])
def test_backward_matches_finite_differences(mode, kind):
    rng = np.random.default_rng(9)
    config = make_config(mode, kind, n_global=1, n_local=3, l_pretrain=4)
    seq_len = 7  # > n_local and > l_pretrain so every branch is exercised
    q, k, v = random_qkv(rng, seq_len)
    ct = rng.normal(size=(seq_len, HEADS, HEAD_DIM))

    out, stash = attend_with_stash(q, k, v, config)
    dq, dk, dv = attend_backward(stash, ct)

    def loss():
        vals, _ = attend_with_stash(q, k, v, config)
        return float(np.sum(vals * ct))

    for analytic, x in ((dq, q), (dk, k), (dv, v)):
        numeric = fd_gradient(loss, x)
        assert np.allclose(analytic, numeric, atol=1e-6, rtol=1e-5)


def test_batched_matches_per_sequence():
    rng = np.random.default_rng(10)
    batch = 3
    shape = (batch, 9, HEADS, HEAD_DIM)
    q, k, v = rng.normal(size=shape), rng.normal(size=shape), rng.normal(size=shape)
    d_out = rng.normal(size=shape)
    for mode in ("lambda", "vanilla_causal"):
        config = make_config(mode, "rope", n_global=1, n_local=4, l_pretrain=6)
        out, stash = attend_with_stash(q, k, v, config)
        dq, dk, dv = attend_backward(stash, d_out)
        for b in range(batch):
            ob, sb = attend_with_stash(q[b], k[b], v[b], config)
            assert np.allclose(out[b], ob, atol=1e-12)
            dqb, dkb, dvb = attend_backward(sb, d_out[b])
            assert np.allclose(dq[b], dqb, atol=1e-12)
            assert np.allclose(dk[b], dkb, atol=1e-12)
            assert np.allclose(dv[b], dvb, atol=1e-12)


@pytest.mark.parametrize("kind", ["rope", "alibi"])
def test_streaming_step_equals_full_row(kind):
    # push/attend_single over 4*n_local steps reproduces each attend() row,
    # including the first-eviction boundary at n_global + n_local.
    config = make_config("lambda", kind, n_global=2, n_local=5, l_pretrain=8)
    seq_len = 4 * config.mask_params.n_local
    rng = np.random.default_rng(11)
    q, k, v = random_qkv(rng, seq_len)
    full = attend(q, k, v, config, CaptureSpec(weights=True))

    cache = KvCache(config.mask_params)
    for i in range(seq_len):
        step = attend_single(q[i], k[i], v[i], cache, config, position=i)
        assert np.allclose(step.values, full.values[i], atol=1e-10), i
        assert step.positions.tolist() == full.key_indices[i].tolist()
        assert np.allclose(step.weights, full.weights[i], atol=1e-10)
        cache.push(k[i], v[i])


def test_attend_single_first_step_self_only():
    config = make_config("lambda", "rope")
    cache = KvCache(config.mask_params)
    rng = np.random.default_rng(12)
    q, k, v = (rng.normal(size=(HEADS, HEAD_DIM)) for _ in range(3))
    step = attend_single(q, k, v, cache, config, position=0)
    assert np.allclose(step.values, v.reshape(-1), atol=1e-12)
    assert step.positions.tolist() == [0]
    assert step.distances.tolist() == [0]


def test_attend_single_contract_errors():
    config = make_config("lambda", "rope")
    cache = KvCache(config.mask_params)
    rng = np.random.default_rng(13)
    q, k, v = (rng.normal(size=(HEADS, HEAD_DIM)) for _ in range(3))
    with pytest.raises(CacheStateError):
        attend_single(q, k, v, cache, config, position=3)
    vanilla = make_config("vanilla_causal", "rope")
    with pytest.raises(ValueError):
        attend_single(q, k, v, cache, vanilla, position=0)


def test_entropy_and_last_logit_capture():
    config = make_config("lambda", "rope", n_global=1, n_local=2, l_pretrain=4)
    rng = np.random.default_rng(14)
    seq_len = 9
    q, k, v = random_qkv(rng, seq_len)
    out = attend(
        np.zeros_like(q), k, v, config, CaptureSpec(entropy=True, last_row_logits=True)
    )
    # Zero queries: uniform rows, entropy = ln(row size); row 8 has 3 keys.
    assert out.row_entropy.shape == (HEADS, seq_len)
    assert np.allclose(out.row_entropy[:, 8], np.log(3.0), atol=1e-12)
    assert out.last_indices.tolist() == [0, 7, 8]
    assert out.last_distances.tolist() == [4, 1, 0]  # 8-0 clamps to l_pretrain=4
    assert out.last_logits.shape == (HEADS, 3)
    vanilla = attend(
        q, k, v, make_config("vanilla_causal", "rope"), CaptureSpec(last_row_logits=True)
    )
    assert vanilla.last_distances.tolist() == list(range(seq_len - 1, -1, -1))
