import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_attention
from tsvit.errors import ConfigurationError, DimensionError
from tsvit.kernels import finite_diff_grad, relative_error, softmax_lastdim
from tsvit.wmhsa import WmhsaWeights, wmhsa, wmhsa_backward, wmhsa_forward, wmhsa_param_count


def weights(d, A, seed=0, scale=1.0):
    return WmhsaWeights.init(d, A, np.random.default_rng(seed), scale)


def test_param_counts():
    assert wmhsa_param_count(2) == 16
    assert wmhsa_param_count(1024) == 4_194_304
    assert abs(wmhsa_param_count(1024) / 4.2e6 - 1) < 0.01


def test_heads_must_divide_width():
    with pytest.raises(ConfigurationError):
        weights(6, 4)


def test_zero_weights_give_residual_only():
    d = 4
    w = WmhsaWeights(*(np.zeros((d, d)) for _ in range(4)), A=2)
    M = np.random.default_rng(1).normal(size=(d, 3, 5))
    assert np.array_equal(wmhsa(M, w), M)


def test_single_token_is_a_projection():
    w = weights(4, 2, seed=2)
    M = np.random.default_rng(3).normal(size=(4, 2, 1))
    for e in range(2):
        x = M[:, e, 0]
        expected = (x @ w.W_V) @ w.W_O + x
        assert np.allclose(wmhsa(M, w)[:, e, 0], expected, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("A", [1, 2])
def test_matches_naive_window_loop(A):
    w = weights(4, A, seed=4)
    M = np.random.default_rng(5).normal(size=(4, 2, 3))
    ref = naive_attention(M, w.W_Q, w.W_K, w.W_V, w.W_O, A)
    assert relative_error(wmhsa(M, w), ref) < 1e-12


def test_attention_rows_sum_to_one():
    w = weights(8, 2, seed=6, scale=3.0)
    M = np.random.default_rng(7).normal(size=(8, 3, 6))
    _, cache = wmhsa_forward(M, w)
    probs = cache[4]
    assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) < 1e-12


def test_shape_errors():
    w = weights(4, 2)
    with pytest.raises(DimensionError):
        wmhsa(np.zeros((3, 2, 2)), w)
    with pytest.raises(DimensionError):
        wmhsa(np.zeros((4, 2, 0)), w)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_window_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    w = weights(4, 2, seed=seed % 97)
    M = rng.normal(size=(4, 5, 3))
    perm = rng.permutation(5)
    assert np.allclose(wmhsa(M[:, perm], w), wmhsa(M, w)[:, perm], rtol=0, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_token_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    w = weights(4, 2, seed=seed % 89)
    M = rng.normal(size=(4, 2, 6))
    perm = rng.permutation(6)
    assert np.allclose(wmhsa(M[:, :, perm], w), wmhsa(M, w)[:, :, perm], rtol=0, atol=1e-12)


def test_windows_are_independent():
    rng = np.random.default_rng(8)
    w = weights(4, 1, seed=8)
    M = rng.normal(size=(4, 3, 4))
    M2 = M.copy()
    M2[:, 1] += 5.0
    a, b = wmhsa(M, w), wmhsa(M2, w)
    assert np.array_equal(a[:, [0, 2]], b[:, [0, 2]])


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    w = weights(4, 2, seed=9)
    M, R = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2, 3))
    _, cache = wmhsa_forward(M, w)
    dM, grads = wmhsa_backward(R, cache)
    assert relative_error(dM, finite_diff_grad(lambda v: (wmhsa(v, w) * R).sum(), M)) < 1e-6
    for name in ("W_Q", "W_K", "W_V", "W_O"):
        original = getattr(w, name)

        def loss(v, name=name):
            parts = {n: getattr(w, n) for n in ("W_Q", "W_K", "W_V", "W_O")}
            parts[name] = v
            return (wmhsa(M, WmhsaWeights(**parts, A=w.A)) * R).sum()

        assert relative_error(getattr(grads, name), finite_diff_grad(loss, original)) < 1e-6, name


def test_softmax_of_scaled_scores_matches_manual():
    w = weights(2, 1, seed=10)
    M = np.random.default_rng(11).normal(size=(2, 1, 3))
    X = M[:, 0, :].T
    probs = softmax_lastdim((X @ w.W_Q) @ (X @ w.W_K).T / np.sqrt(2))
    assert np.allclose(wmhsa_forward(M, w)[1][4][0, 0], probs, atol=1e-14)
