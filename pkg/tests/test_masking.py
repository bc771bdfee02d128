"""Mask construction checked against a brute-force set-formula oracle."""

import numpy as np
import pytest

from lm_infinite.masking import (
    LambdaMask,
    MaskParams,
    build_mask,
    effective_distance,
    mask_density,
)


def oracle_row(i, n_global, n_local):
    """Direct evaluation of the defining set formula, no range tricks."""
    allowed = set()
    for j in range(i + 1):
        if j < n_global:
            allowed.add(j)
        if i - n_local < j:
            allowed.add(j)
    return sorted(allowed)


def test_worked_example_rows():
    mask = build_mask(5, MaskParams(n_global=1, n_local=2, l_pretrain=512))
    expected = [[0], [0, 1], [0, 1, 2], [0, 2, 3], [0, 3, 4]]
    for i, want in enumerate(expected):
        assert mask.row_indices(i).tolist() == want


def test_worked_example_density():
    mask = build_mask(5, MaskParams(n_global=1, n_local=2, l_pretrain=512))
    assert mask_density(mask) == pytest.approx(12 / 15, abs=1e-12)


def test_no_global_branch_row():
    mask = build_mask(5, MaskParams(n_global=0, n_local=2, l_pretrain=512))
    assert mask.row_indices(4).tolist() == [3, 4]


def test_rows_match_oracle_exhaustive():
    for n_global in (0, 1, 2, 3, 7):
        for n_local in (1, 2, 3, 5, 11):
            mask = build_mask(13, MaskParams(n_global, n_local, 64))
            for i in range(13):
                assert (
                    mask.row_indices(i).tolist() == oracle_row(i, n_global, n_local)
                ), (n_global, n_local, i)


def test_ranges_are_disjoint_and_sorted():
    mask = build_mask(40, MaskParams(n_global=4, n_local=6, l_pretrain=128))
    for i in range(40):
        g_lo, g_hi, l_lo, l_hi = mask.row_ranges(i)
        assert g_lo <= g_hi <= l_lo < l_hi
        idx = mask.row_indices(i)
        assert np.all(np.diff(idx) > 0)
        assert mask.row_size(i) == idx.size


def test_short_sequence_equals_causal():
    # While seq_len <= n_local the window spans everything: pure causal mask.
    params = MaskParams(n_global=3, n_local=16, l_pretrain=32)
    mask = build_mask(16, params)
    dense = mask.dense()
    assert np.array_equal(dense, np.tril(np.ones((16, 16), dtype=bool)))


def test_row_size_bounded():
    params = MaskParams(n_global=4, n_local=8, l_pretrain=64)
    mask = build_mask(300, params)
    for i in range(300):
        assert mask.row_size(i) <= params.n_global + params.n_local
        assert mask.row_size(i) >= 1


def test_rows_monotone_then_stable():
    # Row sets grow during the causal phase and keep constant size after.
    params = MaskParams(n_global=2, n_local=5, l_pretrain=32)
    mask = build_mask(60, params)
    sizes = [mask.row_size(i) for i in range(60)]
    knee = params.n_global + params.n_local - 1
    assert sizes[: knee + 1] == list(range(1, knee + 2))
    assert all(s == knee + 1 for s in sizes[knee + 1 :])


def test_self_always_visible():
    mask = build_mask(100, MaskParams(n_global=1, n_local=3, l_pretrain=16))
    for i in range(100):
        assert i in mask.row_indices(i)


def test_dense_matches_rows_fuzz():
    rng = np.random.default_rng(20240817)
    for _ in range(25):
        n_global = int(rng.integers(0, 5))
        n_local = int(rng.integers(1, 9))
        seq_len = int(rng.integers(1, 50))
        mask = build_mask(seq_len, MaskParams(n_global, n_local, 64))
        dense = mask.dense()
        for i in range(seq_len):
            assert np.array_equal(np.flatnonzero(dense[i]), mask.row_indices(i))
        # Nothing above the diagonal, ever.
        assert not np.any(np.triu(dense, k=1))


def test_effective_distance_clamp():
    params = MaskParams(n_global=1, n_local=2, l_pretrain=512)
    # Frozen worked example: query 1000 against keys {0, 998, 999}.
    assert effective_distance(1000, 0, params) == 512
    assert effective_distance(1000, 998, params) == 2
    assert effective_distance(1000, 999, params) == 1
    assert effective_distance(5, 5, params) == 0
    assert effective_distance(511, 0, params) == 511
    assert effective_distance(512, 0, params) == 512
    assert effective_distance(513, 0, params) == 512


def test_effective_distance_never_exceeds_clamp_fuzz():
    params = MaskParams(n_global=2, n_local=64, l_pretrain=64)
    rng = np.random.default_rng(7)
    for _ in range(500):
        i = int(rng.integers(0, 5000))
        j = int(rng.integers(0, i + 1))
        d = effective_distance(i, j, params)
        assert 0 <= d <= params.l_pretrain
        if i - j <= params.l_pretrain:
            assert d == i - j


def test_effective_distance_anticausal_rejected():
    params = MaskParams(n_global=1, n_local=2, l_pretrain=8)
    with pytest.raises(ValueError):
        effective_distance(3, 4, params)


def test_param_validation():
    with pytest.raises(ValueError):
        MaskParams(n_global=-1, n_local=2, l_pretrain=8)
    with pytest.raises(ValueError):
        MaskParams(n_global=1, n_local=0, l_pretrain=8)
    with pytest.raises(ValueError):
        MaskParams(n_global=1, n_local=2, l_pretrain=0)
    with pytest.raises(ValueError):
        MaskParams(n_global=1, n_local=16, l_pretrain=8)
    with pytest.raises(ValueError):
        MaskParams(n_global=1.5, n_local=2, l_pretrain=8)
    with pytest.raises(ValueError):
        build_mask(0, MaskParams(1, 2, 8))


def test_row_index_out_of_range():
    mask = build_mask(5, MaskParams(1, 2, 8))
    with pytest.raises(ValueError):
        mask.row_ranges(5)
    with pytest.raises(ValueError):
        mask.row_ranges(-1)
