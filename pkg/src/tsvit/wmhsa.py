"""Window-based multi-head self attention over ``d x E x I`` tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .kernels import matmul, softmax_backward, softmax_lastdim


@dataclass
class WmhsaWeights:
    """Query/key/value/output matrices, each ``d x d``.

    Column block ``a*d_a:(a+1)*d_a`` of ``W_Q``/``W_K``/``W_V`` is the
    per-head ``d x d_a`` projection of head ``a``. Tokens are row vectors
    on the right-multiplied side: ``q = x @ W_Q``.
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    A: int

    def __post_init__(self):
        d = self.W_Q.shape[0]
        if d % self.A:
            raise ConfigurationError(f"d={d} not divisible by A={self.A} heads")
        for name in ("W_Q", "W_K", "W_V", "W_O"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}")

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_a(self) -> int:
        return self.d // self.A

    def head(self, a: int):
        sl = slice(a * self.d_a, (a + 1) * self.d_a)
        return self.W_Q[:, sl], self.W_K[:, sl], self.W_V[:, sl]

    @classmethod
    def init(cls, d: int, A: int, rng: np.random.Generator, scale: float = 1.0):
        std = scale / np.sqrt(d)
        mats = [rng.normal(0.0, std, (d, d)) for _ in range(4)]
        return cls(*mats, A=A)


def wmhsa_param_count(d: int) -> int:
    return 4 * d * d


def _split_heads(t, A):
    E, I, d = t.shape
    return t.reshape(E, I, A, d // A).transpose(0, 2, 1, 3)


def _merge_heads(t):
    E, A, I, da = t.shape
    return t.transpose(0, 2, 1, 3).reshape(E, I, A * da)


def wmhsa_forward(M: np.ndarray, w: WmhsaWeights):
    """Attention inside each window, plus the residual ``H = G' + M``.

    Returns ``(H, cache)``.
    """
    if M.ndim != 3 or M.shape[0] != w.d:
        raise DimensionError(f"expected {w.d} x E x I input, got {M.shape}")
    if M.shape[2] < 1:
        raise DimensionError("windows must hold at least one token")
    E, I = M.shape[1:]
    X = np.ascontiguousarray(M.transpose(1, 2, 0))  # E x I x d
    q = _split_heads(matmul(X, w.W_Q), w.A)
    k = _split_heads(matmul(X, w.W_K), w.A)
    v = _split_heads(matmul(X, w.W_V), w.A)
    scale = 1.0 / np.sqrt(w.d_a)
    probs = softmax_lastdim(matmul(q, k.transpose(0, 1, 3, 2)) * scale)
    ctx = _merge_heads(matmul(probs, v))
    out = matmul(ctx, w.W_O)  # E x I x d
    H = out.transpose(2, 0, 1) + M
    return np.ascontiguousarray(H), (X, q, k, v, probs, ctx, scale, w)


def wmhsa(M: np.ndarray, w: WmhsaWeights) -> np.ndarray:
    return wmhsa_forward(M, w)[0]


def wmhsa_backward(dH: np.ndarray, cache):
    """Returns ``(dM, grads)`` where ``grads`` is a ``WmhsaWeights``."""
    X, q, k, v, probs, ctx, scale, w = cache
    E, I, d = X.shape
    dout = np.ascontiguousarray(dH.transpose(1, 2, 0))
    flat = lambda t: t.reshape(E * I, -1)
    dW_O = matmul(flat(ctx).T, flat(dout))
    dctx = _split_heads(matmul(dout, w.W_O.T), w.A)
    dprobs = matmul(dctx, v.transpose(0, 1, 3, 2))
    dv = matmul(probs.transpose(0, 1, 3, 2), dctx)
    dscores = softmax_backward(dprobs, probs) * scale
    dq = matmul(dscores, k)
    dk = matmul(dscores.transpose(0, 1, 3, 2), q)
    dq, dk, dv = (_merge_heads(t) for t in (dq, dk, dv))
    Xf = flat(X).T
    grads = WmhsaWeights(
        W_Q=matmul(Xf, flat(dq)),
        W_K=matmul(Xf, flat(dk)),
        W_V=matmul(Xf, flat(dv)),
        W_O=dW_O,
        A=w.A,
    )
    dX = matmul(dq, w.W_Q.T) + matmul(dk, w.W_K.T) + matmul(dv, w.W_V.T)
    dM = dH + dX.transpose(2, 0, 1)
    return np.ascontiguousarray(dM), grads
