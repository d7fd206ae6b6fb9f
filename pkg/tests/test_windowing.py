import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_partition, token_coords
from tsvit.errors import DimensionError, ParameterError
from tsvit.windowing import (
    TokenMask,
    WindowGrid,
    gather_selected,
    rank_and_select_per_window,
    reverse_index,
    token_merge,
    window_partition,
    window_unpartition,
)


@st.composite
def grids(draw):
    return WindowGrid(
        d=draw(st.integers(1, 4)),
        H_tok=draw(st.integers(1, 9)),
        W_tok=draw(st.integers(1, 9)),
        f=draw(st.integers(1, 5)),
    )


def test_identity_reshape_when_one_window():
    g = WindowGrid(d=3, H_tok=2, W_tok=2, f=2)
    x = np.arange(12.0).reshape(3, 4)
    assert g.E == 1 and np.array_equal(window_partition(x, g)[:, 0, :], x)


def test_reference_geometry():
    g = WindowGrid.for_image(1024, 320, 800, 16, 16)
    assert (g.H_tok, g.W_tok, g.h_p, g.w_p, g.H_p, g.W_p, g.E, g.n_win) == (20, 50, 12, 14, 32, 64, 8, 256)
    assert g.E * g.n_win >= g.N == 1000


def test_partition_matches_coordinate_oracle():
    rng = np.random.default_rng(0)
    g = WindowGrid(d=3, H_tok=5, W_tok=7, f=3)
    x = rng.normal(size=(3, g.N))
    assert np.array_equal(window_partition(x, g), naive_partition(x, 5, 7, 3))


def test_padded_slots_are_zero():
    g = WindowGrid(d=2, H_tok=5, W_tok=7, f=3)
    w = window_partition(np.ones((2, g.N)), g)
    assert np.all(w[:, ~g.valid_mask()] == 0.0)
    assert g.valid_mask().sum() == g.N


def test_single_token_returns_to_its_position():
    g = WindowGrid(d=1, H_tok=6, W_tok=5, f=4)
    r, c = 4, 3
    x = np.zeros((1, g.N))
    x[0, r * 5 + c] = 1.0
    e, s = token_coords(6, 5, 4)[(r, c)]
    w = window_partition(x, g)
    assert w[0, e, s] == 1.0 and w.sum() == 1.0
    assert np.array_equal(window_unpartition(w, g), x)


def test_unpartition_of_zeros():
    g = WindowGrid(d=2, H_tok=3, W_tok=4, f=2)
    assert not window_unpartition(np.zeros((2, g.E, g.n_win)), g).any()


def test_partition_shape_errors():
    g = WindowGrid(d=2, H_tok=3, W_tok=4, f=2)
    with pytest.raises(DimensionError):
        window_partition(np.zeros((2, 11)), g)
    with pytest.raises(DimensionError):
        window_unpartition(np.zeros((2, g.E + 1, g.n_win)), g)


@settings(max_examples=1000, deadline=None)
@given(grids(), st.integers(0, 2**31 - 1))
def test_partition_roundtrip(g, seed):
    x = np.random.default_rng(seed).normal(size=(g.d, g.N))
    assert np.array_equal(window_unpartition(window_partition(x, g), g), x)
    assert g.H_p % g.f == 0 and g.W_p % g.f == 0 and 0 <= g.h_p < g.f and 0 <= g.w_p < g.f


def test_rank_select_hand_case():
    O = np.array([[[10.0, 11.0, 12.0, 13.0]]])
    A = np.array([[[0.1, 0.9, 0.5, 0.2]]])
    O_star, perm = rank_and_select_per_window(O, A, 2)
    # 1-based positions (2, 3) are 0-based (1, 2)
    assert list(perm[0, :2]) == [1, 2]
    assert list(O_star[0, 0]) == [11.0, 12.0]


def test_rank_select_full_keep_is_sorted_permutation():
    rng = np.random.default_rng(1)
    O, A = rng.normal(size=(2, 3, 5)), rng.random((1, 3, 5))
    O_star, perm = rank_and_select_per_window(O, A, 5)
    for e in range(3):
        assert sorted(perm[e]) == list(range(5))
        assert np.all(np.diff(A[0, e, perm[e]]) <= 0)


def test_rank_select_ties_prefer_lower_index():
    O = np.arange(4.0).reshape(1, 1, 4)
    _, perm = rank_and_select_per_window(O, np.full((1, 1, 4), 0.5), 2)
    assert list(perm[0]) == [0, 1, 2, 3]


def test_rank_select_vs_full_sort_oracle():
    rng = np.random.default_rng(2)
    O, A = rng.normal(size=(3, 4, 9)), rng.random((1, 4, 9))
    O_star, perm = rank_and_select_per_window(O, A, 3)
    for e in range(4):
        order = sorted(range(9), key=lambda i: (-A[0, e, i], i))[:3]
        assert set(perm[e, :3]) == set(order)
        assert np.array_equal(O_star[:, e, :], O[:, e, order])


def test_rank_select_bad_count():
    with pytest.raises(ParameterError):
        rank_and_select_per_window(np.zeros((1, 1, 4)), np.zeros((1, 1, 4)), 0)
    with pytest.raises(ParameterError):
        rank_and_select_per_window(np.zeros((1, 1, 4)), np.zeros((1, 1, 4)), 5)


def test_token_merge_degenerate_and_full():
    rng = np.random.default_rng(3)
    O, A = rng.normal(size=(2, 3, 4)), rng.random((1, 3, 4))
    _, perm = rank_and_select_per_window(O, A, 4)
    assert np.array_equal(token_merge(np.zeros((2, 3, 0)), O, perm), O)
    P = rng.normal(size=(2, 3, 4))
    out = token_merge(P, O, perm)
    assert not np.isin(out, O).any()


def test_token_merge_shape_error():
    with pytest.raises(DimensionError):
        token_merge(np.zeros((2, 3, 2)), np.zeros((2, 4, 4)), np.zeros((4, 4), dtype=int))


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_token_merge_vs_masked_overwrite(d, E, n, seed):
    rng = np.random.default_rng(seed)
    kk = int(rng.integers(1, n + 1))
    O, A = rng.normal(size=(d, E, n)), rng.random((1, E, n))
    O_star, perm = rank_and_select_per_window(O, A, kk)
    P = rng.normal(size=O_star.shape)
    expected = O.copy()
    for e in range(E):
        for c in range(kk):
            expected[:, e, perm[e, c]] = P[:, e, c]
    assert np.array_equal(token_merge(P, O, perm), expected)
    # exactly K' per window, and merging the unmodified selection is a no-op
    assert O_star.shape[2] == kk
    assert np.array_equal(token_merge(O_star, O, perm), O)


def test_token_mask_fields():
    m = TokenMask.from_scores(np.array([[0.2, 0.7, 0.9, 0.1]]), 0.5)
    assert list(m.J_star) == [1, 2] and m.K_bar == 2 and m.pi == {1: 0, 2: 1}
    assert not m.empty and TokenMask.from_scores(np.zeros(3), 0.5).empty


def test_gather_examples():
    rng = np.random.default_rng(4)
    M = rng.normal(size=(3, 5))
    assert np.array_equal(gather_selected(M, TokenMask.dense(np.ones(5))), M)
    only = TokenMask(B=np.eye(5)[2], Z=np.zeros(5))
    assert np.array_equal(gather_selected(M, only), M[:, [2]])
    empty = gather_selected(M, TokenMask(B=np.zeros(5), Z=np.zeros(5)))
    assert empty.shape == (3, 0)


def test_gather_vs_filter_oracle():
    rng = np.random.default_rng(5)
    M, B = rng.normal(size=(4, 10)), rng.random(10) > 0.4
    cols = [M[:, j] for j in range(10) if B[j]]
    assert np.array_equal(gather_selected(M, TokenMask(B=B, Z=B * 1.0)), np.stack(cols, axis=1))


def test_reverse_index_identity_and_errors():
    M = np.arange(6.0).reshape(2, 3)
    full = TokenMask.dense(np.ones(3))
    assert np.array_equal(reverse_index(M, full), M)
    with pytest.raises(DimensionError):
        reverse_index(np.zeros((2, 2)), full)
    with pytest.raises(DimensionError):
        gather_selected(np.zeros((2, 4)), full)


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 4), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_gather_reverse_reconstruction(d, N, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, N))
    B = rng.random(N) > rng.random()
    mask = TokenMask(B=B, Z=B * 1.0)
    R = reverse_index(gather_selected(M, mask), mask)
    assert np.array_equal(R[:, B], M[:, B]) and not R[:, ~B].any()
    assert np.array_equal(R + (~B) * M, M)
