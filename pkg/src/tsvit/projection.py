"""Gated two-branch output projection: ``P = W3 . LN(GeLU(W1 h) * (W2 h))``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .kernels import gelu, gelu_grad, layer_norm_backward, layer_norm_forward, matmul

HIDDEN_RATIO = 2.66


def hidden_dim(d: int) -> int:
    # float product: floor(2.66 * 1024) = 2723
    return math.floor(HIDDEN_RATIO * d)


@dataclass
class ProjectionWeights:
    W1: np.ndarray  # d_o x d
    W2: np.ndarray  # d_o x d
    W3: np.ndarray  # d x d_o
    gamma: np.ndarray  # d_o
    beta: np.ndarray  # d_o

    def __post_init__(self):
        d_o, d = self.W1.shape
        if self.W2.shape != (d_o, d) or self.W3.shape != (d, d_o):
            raise DimensionError("inconsistent projection weight shapes")
        if self.gamma.shape != (d_o,) or self.beta.shape != (d_o,):
            raise DimensionError("inner norm affine must have length d_o")

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def d_o(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, scale: float = 1.0):
        d_o = hidden_dim(d)
        return cls(
            W1=rng.normal(0.0, scale / np.sqrt(d), (d_o, d)),
            W2=rng.normal(0.0, scale / np.sqrt(d), (d_o, d)),
            W3=rng.normal(0.0, scale / np.sqrt(d_o), (d, d_o)),
            gamma=np.ones(d_o),
            beta=np.zeros(d_o),
        )


def projection_param_count(d: int) -> int:
    """Matrix parameters ``3 d d_o``; the ``2 d_o`` norm affine is counted separately."""
    return 3 * d * hidden_dim(d)


def projection_norm_param_count(d: int) -> int:
    return 2 * hidden_dim(d)


def output_projection_forward(h: np.ndarray, w: ProjectionWeights):
    if h.ndim != 2 or h.shape[0] != w.d:
        raise DimensionError(f"expected {w.d} x G input, got {h.shape}")
    a1 = matmul(w.W1, h)
    a2 = matmul(w.W2, h)
    g = gelu(a1)
    D = g * a2
    Dn, ln_cache = layer_norm_forward(D, w.gamma, w.beta)
    P = matmul(w.W3, Dn)
    return P, (h, a1, a2, g, Dn, ln_cache, w)


def output_projection(h: np.ndarray, w: ProjectionWeights) -> np.ndarray:
    return output_projection_forward(h, w)[0]


def output_projection_backward(dP: np.ndarray, cache):
    """Returns ``(dh, grads)``; ``grads`` mirrors ``ProjectionWeights``."""
    h, a1, a2, g, Dn, ln_cache, w = cache
    dW3 = matmul(dP, Dn.T)
    dD, dgamma, dbeta = layer_norm_backward(matmul(w.W3.T, dP), ln_cache)
    da1 = dD * a2 * gelu_grad(a1)
    da2 = dD * g
    grads = ProjectionWeights(
        W1=matmul(da1, h.T), W2=matmul(da2, h.T), W3=dW3, gamma=dgamma, beta=dbeta
    )
    dh = matmul(w.W1.T, da1) + matmul(w.W2.T, da2)
    return dh, grads
