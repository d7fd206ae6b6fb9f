"""Dynamic token-selection layer: saliency gate, token router, token compensator.

Fine-tuning runs every token through the output projection and scales the
projected tokens by soft Gumbel-sigmoid gates. Inference thresholds the
noise-free gates and projects only the selected tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .block import (
    CompensatorWeights,
    LayerWeights,
    SelectorWeights,
    norm_projection_backward,
    norm_projection_forward,
    transformer_module_backward,
    transformer_module_forward,
)
from .errors import DimensionError, ModeError, ParameterError
from .kernels import NormWeights, layer_norm_backward, layer_norm_forward, matmul, relu, sigmoid
from .projection import ProjectionWeights
from .windowing import TokenMask, WindowGrid, gather_selected, reverse_index

Mode = Literal["finetune", "inference"]


@dataclass(frozen=True)
class RouterConfig:
    theta: float = 0.5
    gumbel_temperature: float = 1.0
    mode: Mode = "finetune"
    # P' + C with two copies of M_hat instead of one shared residual
    double_residual: bool = False

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ParameterError(f"theta={self.theta} outside (0, 1)")
        if self.gumbel_temperature <= 0:
            raise ParameterError("gumbel temperature must be positive")
        if self.mode not in ("finetune", "inference"):
            raise ParameterError(f"unknown router mode {self.mode!r}")


def saliency_scores(M_hat: np.ndarray, w: SelectorWeights) -> np.ndarray:
    """Raw pre-sigmoid scores ``S = w_sel . M_hat + b_sel`` (``1 x N``)."""
    if M_hat.shape[0] != w.w_sel.shape[1]:
        raise DimensionError(f"selector expects d={w.w_sel.shape[1]}, got {M_hat.shape}")
    return matmul(w.w_sel, M_hat) + w.b_sel[0]


def logistic_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """``g1 - g2`` for two independent standard Gumbel draws."""
    u1 = rng.random(shape)
    u2 = rng.random(shape)
    # rng.random is in [0, 1); keep log arguments strictly positive
    tiny = np.finfo(np.float64).tiny
    g1 = -np.log(-np.log(np.maximum(u1, tiny)))
    g2 = -np.log(-np.log(np.maximum(u2, tiny)))
    return g1 - g2


def gumbel_sigmoid(S, cfg: RouterConfig, rng=None, noise=None) -> np.ndarray:
    """Soft gates ``Z = sigmoid((S + g1 - g2) / temperature)``.

    Pass either ``rng`` (a ``numpy.random.Generator`` or an integer seed)
    or a precomputed ``noise`` array of the same shape as ``S``.
    """
    if cfg.mode != "finetune":
        raise ModeError("Gumbel noise is only used on the fine-tuning path")
    S = np.asarray(S, dtype=np.float64)
    if noise is None:
        noise = logistic_noise(S.shape, np.random.default_rng(rng))
    return sigmoid((S + noise) / cfg.gumbel_temperature)


def router_finetune(M_hat: np.ndarray, gates: np.ndarray, norm: NormWeights, proj: ProjectionWeights):
    """Dense router path ``P' = Z' * P + M_hat``; ``gates`` is ``1 x N``."""
    P, _ = norm_projection_forward(M_hat, norm, proj)
    return gates * P + M_hat


def router_infer(M_hat: np.ndarray, S: np.ndarray, norm: NormWeights, proj: ProjectionWeights, cfg: RouterConfig):
    """Sparse router path: project only tokens with ``sigmoid(S) > theta``.

    Returns ``(R + M_hat, mask)``. With no token selected the projection is
    skipped and the output is ``M_hat``.
    """
    if cfg.mode != "inference":
        raise ModeError("router_infer requires inference mode")
    mask = TokenMask.from_scores(sigmoid(S), cfg.theta)
    if mask.empty:
        return M_hat.copy(), mask
    P, _ = norm_projection_forward(gather_selected(M_hat, mask), norm, proj)
    return reverse_index(P, mask) + M_hat, mask


def token_compensator_forward(M_hat: np.ndarray, w: CompensatorWeights):
    F, ln_cache = layer_norm_forward(M_hat, w.norm.gamma, w.norm.beta)
    a = matmul(w.W_down, F) + w.b_down[:, None]
    r = relu(a)
    F_prime = matmul(w.W_up, r)
    return F_prime, (F, a, r, ln_cache, w)


def token_compensator(M_hat: np.ndarray, w: CompensatorWeights) -> np.ndarray:
    """``C = W_up . ReLU(W_down . LN(M_hat) + b_down) + M_hat``."""
    return token_compensator_forward(M_hat, w)[0] + M_hat


def token_compensator_backward(dF_prime: np.ndarray, cache):
    """Backward of the ``F'`` branch only; returns ``(dM_hat, grads)``."""
    F, a, r, ln_cache, w = cache
    dW_up = matmul(dF_prime, r.T)
    da = matmul(w.W_up.T, dF_prime) * (a > 0)
    dW_down = matmul(da, F.T)
    db_down = da.sum(axis=1)
    dM, dgamma, dbeta = layer_norm_backward(matmul(w.W_down.T, da), ln_cache)
    return dM, CompensatorWeights(dW_down, db_down, dW_up, NormWeights(dgamma, dbeta))


@dataclass
class DynamicCache:
    module: tuple
    M_hat: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    P: np.ndarray
    proj: tuple
    comp: tuple
    cfg: RouterConfig
    lw: LayerWeights


def _residual_count(cfg: RouterConfig) -> float:
    return 2.0 if cfg.double_residual else 1.0


def dynamic_layer_train_forward(f, lw: LayerWeights, grid: WindowGrid, cfg: RouterConfig, rng=None, noise=None):
    """Fine-tuning forward; returns ``(f_next, Z, cache)`` for backpropagation."""
    if cfg.mode != "finetune":
        raise ModeError("training forward requires fine-tuning mode")
    M_hat, module_cache = transformer_module_forward(f, lw, grid)
    S = saliency_scores(M_hat, lw.selector)
    Z = gumbel_sigmoid(S, cfg, rng=rng, noise=noise)
    P, proj_cache = norm_projection_forward(M_hat, lw.norm2, lw.proj)
    F_prime, comp_cache = token_compensator_forward(M_hat, lw.compensator)
    out = Z * P + F_prime + M_hat
    if cfg.double_residual:
        out = out + M_hat
    cache = DynamicCache(module_cache, M_hat, S, Z, P, proj_cache, comp_cache, cfg, lw)
    return out, Z, cache


def dynamic_layer_backward(dout: np.ndarray, cache: DynamicCache, dZ_extra: Optional[np.ndarray] = None):
    """Gradients of the fine-tuning forward.

    ``dZ_extra`` is an additional loss gradient on the gates (e.g. from the
    activation-rate penalty). Returns ``(df, grads)`` with ``grads`` a
    ``LayerWeights`` holding gradients of every part.
    """
    c = cache
    dM_hat = dout * _residual_count(c.cfg)
    dZ = (dout * c.P).sum(axis=0, keepdims=True)
    if dZ_extra is not None:
        dZ = dZ + dZ_extra
    dx, dnorm2, dproj = norm_projection_backward(dout * c.Z, c.proj)
    dM_hat = dM_hat + dx
    dx, dcomp = token_compensator_backward(dout, c.comp)
    dM_hat = dM_hat + dx
    dS = dZ * c.Z * (1.0 - c.Z) / c.cfg.gumbel_temperature
    dsel = SelectorWeights(w_sel=matmul(dS, c.M_hat.T), b_sel=np.array([dS.sum()]))
    dM_hat = dM_hat + matmul(c.lw.selector.w_sel.T, dS)
    df, dnorm1, dattn = transformer_module_backward(dM_hat, c.module)
    grads = LayerWeights(dnorm1, dattn, dnorm2, dproj, selector=dsel, compensator=dcomp)
    return df, grads


def dynamic_layer_forward(f, lw: LayerWeights, grid: WindowGrid, cfg: RouterConfig, rng=None, noise=None):
    """Proposed layer output and its token mask.

    Fine-tuning mode returns an all-selected mask carrying the soft gates;
    inference mode returns the thresholded mask actually used.
    """
    if cfg.mode == "finetune":
        out, Z, _ = dynamic_layer_train_forward(f, lw, grid, cfg, rng=rng, noise=noise)
        return out, TokenMask.dense(Z)
    M_hat, _ = transformer_module_forward(f, lw, grid)
    S = saliency_scores(M_hat, lw.selector)
    routed, mask = router_infer(M_hat, S, lw.norm2, lw.proj, cfg)
    F_prime, _ = token_compensator_forward(M_hat, lw.compensator)
    # routed already carries one M_hat
    out = routed + F_prime
    if cfg.double_residual:
        out = out + M_hat
    return out, mask
