"""Per-layer weight container and the transformer module shared by all layer kinds."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import numpy as np

from .kernels import NormWeights, layer_norm_backward, layer_norm_forward
from .projection import ProjectionWeights, output_projection_backward, output_projection_forward
from .windowing import WindowGrid, window_partition, window_unpartition
from .wmhsa import WmhsaWeights, wmhsa_backward, wmhsa_forward


@dataclass
class SelectorWeights:
    w_sel: np.ndarray  # 1 x d
    b_sel: np.ndarray  # shape (1,)

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, bias: float = 2.0, scale: float = 0.1):
        return cls(w_sel=rng.normal(0.0, scale / np.sqrt(d), (1, d)), b_sel=np.array([bias]))


@dataclass
class CompensatorWeights:
    W_down: np.ndarray  # d_h x d
    b_down: np.ndarray  # d_h
    W_up: np.ndarray  # d x d_h
    norm: NormWeights

    @property
    def d_h(self) -> int:
        return self.W_down.shape[0]

    @classmethod
    def init(cls, d: int, d_h: int, rng: np.random.Generator):
        # W_up = 0 makes the compensator an identity map at the start of fine-tuning
        return cls(
            W_down=rng.normal(0.0, 1.0 / np.sqrt(d), (d_h, d)),
            b_down=np.zeros(d_h),
            W_up=np.zeros((d, d_h)),
            norm=NormWeights.identity(d),
        )


@dataclass
class MotionQueries:
    Q_mot: np.ndarray  # 64 x 256
    W_s: np.ndarray  # 256 x d, token -> query space

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, n_queries: int = 64, dim: int = 256):
        return cls(
            Q_mot=rng.normal(0.0, 1.0, (n_queries, dim)),
            W_s=rng.normal(0.0, 1.0 / np.sqrt(d), (dim, d)),
        )


@dataclass
class LayerWeights:
    """Frozen backbone of one encoder layer plus optional token-selection parts."""

    norm1: NormWeights
    attn: WmhsaWeights
    norm2: NormWeights
    proj: ProjectionWeights
    selector: Optional[SelectorWeights] = None
    compensator: Optional[CompensatorWeights] = None
    scorer: Optional[MotionQueries] = None

    @property
    def d(self) -> int:
        return self.attn.d

    @classmethod
    def init_backbone(cls, d: int, A: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(
            norm1=NormWeights.identity(d),
            attn=WmhsaWeights.init(d, A, rng, scale),
            norm2=NormWeights.identity(d),
            proj=ProjectionWeights.init(d, rng, scale),
        )

    def backbone(self) -> "LayerWeights":
        return LayerWeights(self.norm1, self.attn, self.norm2, self.proj)


def named_arrays(obj: Any, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(dotted_name, array)`` for every array reachable from ``obj``.

    Walks dataclasses and lists; ``None`` parts and integer fields are skipped.
    Yielded arrays are the stored objects, not copies.
    """
    if obj is None:
        return
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_arrays(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj):
        for fld in dataclasses.fields(obj):
            name = f"{prefix}.{fld.name}" if prefix else fld.name
            yield from named_arrays(getattr(obj, fld.name), name)


def transformer_module_forward(f: np.ndarray, lw: LayerWeights, grid: WindowGrid):
    """``M_hat = f + unpartition(WMHSA(partition(LN(f))))``."""
    x0, ln_cache = layer_norm_forward(f, lw.norm1.gamma, lw.norm1.beta)
    H, attn_cache = wmhsa_forward(window_partition(x0, grid), lw.attn)
    M_hat = f + window_unpartition(H, grid)
    return M_hat, (ln_cache, attn_cache, grid)


def transformer_module_backward(dM_hat: np.ndarray, cache):
    ln_cache, attn_cache, grid = cache
    dM, attn_grads = wmhsa_backward(window_partition(dM_hat, grid), attn_cache)
    dx0, dgamma, dbeta = layer_norm_backward(window_unpartition(dM, grid), ln_cache)
    return dM_hat + dx0, NormWeights(dgamma, dbeta), attn_grads


def norm_projection_forward(x: np.ndarray, norm: NormWeights, proj: ProjectionWeights):
    L, ln_cache = layer_norm_forward(x, norm.gamma, norm.beta)
    P, proj_cache = output_projection_forward(L, proj)
    return P, (ln_cache, proj_cache)


def norm_projection_backward(dP: np.ndarray, cache):
    ln_cache, proj_cache = cache
    dL, proj_grads = output_projection_backward(dP, proj_cache)
    dx, dgamma, dbeta = layer_norm_backward(dL, ln_cache)
    return dx, NormWeights(dgamma, dbeta), proj_grads


def dense_layer_forward(f: np.ndarray, lw: LayerWeights, grid: WindowGrid) -> np.ndarray:
    """The unmodified layer: every token goes through the output projection."""
    M_hat, _ = transformer_module_forward(f, lw, grid)
    P, _ = norm_projection_forward(M_hat, lw.norm2, lw.proj)
    return P + M_hat
