import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmd.mamse import DimBlock, DimStack, aggregate_embedding, select_speaker_features
from ssmd.numerics import NumericsError, Tensor, grad_check, ops


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def unit_rows(rng, k, d):
    M = rng.standard_normal((k, d))
    return M / np.linalg.norm(M, axis=1, keepdims=True)


# -- speaker feature selection ---------------------------------------------------


def test_all_ones_mask_constant_features():
    F = np.tile([1.5, -2.0, 0.25], (10, 1))
    FS, empty = select_speaker_features(T(F), np.ones((3, 10)))
    np.testing.assert_allclose(FS.data, np.tile(F[0], (3, 1)), atol=1e-15)
    assert not empty.any()


def test_single_active_frame_selected():
    F = np.random.default_rng(0).standard_normal((8, 4))
    S = np.zeros((2, 8))
    S[0, 5] = 1
    FS, empty = select_speaker_features(T(F), S)
    np.testing.assert_array_equal(FS.data[0], F[5])
    assert list(empty) == [False, True] and not FS.data[1].any()


def test_selection_matches_loop_oracle():
    rng = np.random.default_rng(1)
    F = rng.standard_normal((12, 5))
    S = (rng.random((3, 12)) > 0.4).astype(float)
    FS, _ = select_speaker_features(T(F), S)
    for n in range(3):
        rows = [F[t] for t in range(12) if S[n, t] == 1]
        np.testing.assert_allclose(FS.data[n], sum(rows) / len(rows), atol=1e-12, rtol=0)


def test_selection_width_mismatch():
    with pytest.raises(NumericsError):
        select_speaker_features(T(np.ones((5, 2))), np.ones((1, 4)))


# -- blocks ----------------------------------------------------------------------


def test_single_memory_row_returned():
    blk = DimBlock(6, 4, seed=1)
    M = unit_rows(np.random.default_rng(2), 1, 4)
    h2, _, tr = blk(T(np.random.default_rng(3).standard_normal((2, 6))), T(M))
    np.testing.assert_allclose(h2.data, np.tile(M[0], (2, 1)), atol=1e-15)
    np.testing.assert_array_equal(tr["a"], 1.0)


def test_saturated_query_retrieves_aligned_row():
    d = 5
    blk = DimBlock(d, d, seed=0)
    for lin in (blk.w_q1, blk.w_k1, blk.w_q2, blk.w_k2):
        lin.weight.data[...] = np.eye(d)
    M = np.eye(d)
    for j in range(d):
        h2, _, _ = blk(T(40.0 * M[j][None]), T(M))
        cos = h2.data[0] @ M[j] / np.linalg.norm(h2.data[0])
        assert cos > 0.99


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_attention_weights_are_distributions(n, k, seed):
    rng = np.random.default_rng(seed)
    stack = DimStack(6, 4, seed=seed % 7)
    out = stack(T(rng.standard_normal((n, 6)) * 2), T(unit_rows(rng, k, 4)))
    for tr in out.traces:
        for key in ("a", "b"):
            assert (tr[key] >= 0).all()
            np.testing.assert_allclose(tr[key].sum(axis=-1), 1.0, atol=1e-9)


# -- full retrieval --------------------------------------------------------------


def test_identical_queries_identical_rows():
    stack = DimStack(8, 6, seed=2)
    q = np.tile(np.random.default_rng(4).standard_normal(8), (3, 1))
    E = stack(T(q), T(unit_rows(np.random.default_rng(5), 7, 6))).E_M.data
    np.testing.assert_array_equal(E[0], E[1])
    np.testing.assert_array_equal(E[1], E[2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rows_inside_memory_bounds(seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((6, 5)) + rng.standard_normal(5)
    E = DimStack(7, 5, seed=seed % 5)(T(rng.standard_normal((4, 7)) * 3), T(M)).E_M.data
    assert (E >= M.min(axis=0) - 1e-12).all() and (E <= M.max(axis=0) + 1e-12).all()


def test_memory_row_permutation_invariance():
    rng = np.random.default_rng(6)
    stack = DimStack(8, 6, seed=3)
    q, M = rng.standard_normal((3, 8)), unit_rows(rng, 9, 6)
    a = stack(T(q), T(M)).E_M.data
    b = stack(T(q), T(M[rng.permutation(9)])).E_M.data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_speaker_rows_independent():
    rng = np.random.default_rng(7)
    stack = DimStack(8, 6, seed=4)
    F = T(rng.standard_normal((20, 8)))
    M = T(unit_rows(rng, 5, 6))
    S = (rng.random((3, 20)) > 0.5).astype(float)
    base = stack(*select_speaker_features(F, S)[:1], M).E_M.data
    S2 = S.copy()
    S2[1] = 1 - S2[1]
    moved = stack(*select_speaker_features(F, S2)[:1], M).E_M.data
    np.testing.assert_array_equal(base[[0, 2]], moved[[0, 2]])
    assert not np.array_equal(base[1], moved[1])


def test_empty_mask_gets_memory_mean():
    rng = np.random.default_rng(8)
    stack = DimStack(8, 6, seed=5)
    M = unit_rows(rng, 5, 6)
    S = np.zeros((2, 10))
    S[0, :4] = 1
    FS, empty = select_speaker_features(T(rng.standard_normal((10, 8))), S)
    E = stack(FS, T(M), empty).E_M.data
    np.testing.assert_allclose(E[1], M.mean(axis=0), atol=1e-15)


def test_gradient_through_three_blocks():
    rng = np.random.default_rng(9)
    stack = DimStack(6, 4, seed=6)
    q = T(rng.standard_normal((2, 6)), grad=True)
    M = T(unit_rows(rng, 5, 4))
    w = rng.standard_normal((2, 4))
    err = grad_check(lambda ps: ops.sum(ops.mul(stack(q, M).E_M, w)), stack.parameters() + [q])
    assert err < 1e-4


# -- aggregation -----------------------------------------------------------------


def test_zero_ivec_tail_zero_and_split_roundtrip():
    rng = np.random.default_rng(10)
    E, iv = rng.standard_normal((3, 5)), np.zeros((3, 2))
    A = aggregate_embedding(T(E), iv, d_model=7).data
    assert not A[:, 5:].any()
    iv = rng.standard_normal((3, 2))
    A = aggregate_embedding(T(E), iv).data
    np.testing.assert_array_equal(A[:, :5], E)
    np.testing.assert_array_equal(A[:, 5:], iv)


def test_paper_dims_give_512():
    A = aggregate_embedding(T(np.zeros((4, 384))), np.zeros((4, 128)), d_model=512)
    assert A.shape == (4, 512)


def test_aggregate_dim_mismatch():
    with pytest.raises(NumericsError):
        aggregate_embedding(T(np.zeros((4, 6))), np.zeros((4, 3)), d_model=8)
    with pytest.raises(NumericsError):
        aggregate_embedding(T(np.zeros((4, 6))), np.zeros((3, 2)))
