"""Dense float64 primitives with explicit backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Token tensors
use a channel-first layout: axis 0 is the feature dimension ``d`` and the
remaining axes index tokens (``d x N`` or ``d x E x N'``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy.special import erf

from .errors import DimensionError, ParameterError

LN_EPS = 1e-6

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class GradPair:
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )


@dataclass
class NormWeights:
    gamma: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "NormWeights":
        return cls(gamma=np.ones(d), beta=np.zeros(d))


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@numba.njit(cache=True)
def _matmul_batched(a, b):
    # i-p-j loop: each output element accumulates over p in increasing order
    nb, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((nb, m, n))
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[t, i, p]
                for j in range(n):
                    out[t, i, j] += aip * b[t, p, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation over the inner axis.

    Leading (batch) axes broadcast like ``numpy.matmul``. Every entry equals
    the naive loop ``s = 0; s += a[i, p] * b[p, j]`` bit for bit, which BLAS
    does not guarantee.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k2 != k:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"batch axes do not broadcast: {a.shape} @ {b.shape}") from None
    nb = int(np.prod(batch, dtype=np.int64))
    a3 = np.ascontiguousarray(np.broadcast_to(a, batch + (m, k))).reshape(nb, m, k)
    b3 = np.ascontiguousarray(np.broadcast_to(b, batch + (k, n))).reshape(nb, k, n)
    return _matmul_batched(a3, b3).reshape(batch + (m, n))


def _channel_shape(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def layer_norm_forward(x, gamma, beta, eps: float = LN_EPS):
    """Normalise every token (column) over the channel axis 0."""
    if eps <= 0:
        raise ParameterError("eps must be positive")
    x = as_tensor(x)
    if gamma.shape != (x.shape[0],) or beta.shape != (x.shape[0],):
        raise DimensionError(
            f"norm affine shape {gamma.shape}/{beta.shape} does not match d={x.shape[0]}"
        )
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = _channel_shape(gamma, x.ndim) * xhat + _channel_shape(beta, x.ndim)
    return out, (xhat, rstd, gamma)


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(x, gamma, beta, eps)[0]


def layer_norm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, rstd, gamma = cache
    red = tuple(range(1, dout.ndim))
    dgamma = (dout * xhat).sum(axis=red)
    dbeta = dout.sum(axis=red)
    dxhat = dout * _channel_shape(gamma, dout.ndim)
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=0, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x):
    """Exact (erf) GeLU."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_grad(x):
    return (as_tensor(x) > 0).astype(np.float64)


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def softmax_lastdim(x):
    x = as_tensor(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_backward(dout, probs):
    """Backward of softmax over the last axis given the forward output."""
    return probs * (dout - (dout * probs).sum(axis=-1, keepdims=True))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, element by element."""
    if not 1e-6 <= h <= 1e-4:
        raise ParameterError(f"step h={h} outside [1e-6, 1e-4]")
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_entries(f, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices, perturbing ``x`` in place.

    ``x`` is restored before returning. Used where a full sweep over every
    element of a large weight is too slow.
    """
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def relative_error(analytic, numeric) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)
