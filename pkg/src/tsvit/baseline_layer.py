"""Fixed-ratio baseline layer: query-based scorer and per-window top-K' selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from .block import LayerWeights, MotionQueries
from .errors import ParameterError
from .kernels import layer_norm, matmul, sigmoid
from .projection import output_projection
from .windowing import (
    WindowGrid,
    rank_and_select_per_window,
    token_merge,
    window_partition,
    window_unpartition,
)
from .wmhsa import wmhsa

# ratios like 0.3 * 10 land a hair above the integer in binary
_CEIL_SLACK = 1e-9

# dense first quarter, then 0.7, then 0.5 over the second half
DEFAULT_RATIOS = (1.0, 0.7, 0.5, 0.5)


def keep_count(ratio: float, n_win: int, convention: str = "ceil") -> int:
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"selection ratio {ratio} outside (0, 1]")
    x = ratio * n_win
    if convention == "ceil":
        k = math.ceil(x - _CEIL_SLACK)
    elif convention == "floor":
        k = math.floor(x + _CEIL_SLACK)
    elif convention == "floor_plus_one":
        k = math.floor(x + _CEIL_SLACK) + 1
    else:
        raise ParameterError(f"unknown rounding convention {convention!r}")
    return min(max(k, 1), n_win)


@dataclass(frozen=True)
class SelectionRatioSchedule:
    """Keep ratios per layer group; groups split the layers evenly, in order."""

    ratios: tuple

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.ratios:
            raise ParameterError("schedule needs at least one ratio")
        for r in self.ratios:
            keep_count(r, 1)

    def ratio_for_layer(self, layer: int, n_layers: int) -> float:
        group = layer * len(self.ratios) // n_layers
        return self.ratios[group]

    def per_layer(self, n_layers: int) -> list[float]:
        return [self.ratio_for_layer(i, n_layers) for i in range(n_layers)]


def token_scorer(f: np.ndarray, q: MotionQueries) -> np.ndarray:
    """Saliency in [0, 1]: sigmoid of the best scaled query/token dot product."""
    dim = q.Q_mot.shape[1]
    logits = matmul(q.Q_mot, matmul(q.W_s, f)) / np.sqrt(dim)
    return sigmoid(logits.max(axis=0, keepdims=True))


def windowed_scores(scores: np.ndarray, grid: WindowGrid) -> np.ndarray:
    A = window_partition(scores, grid)
    A[0][~grid.valid_mask()] = -np.inf
    return A


def baseline_layer_forward(f: np.ndarray, lw: LayerWeights, grid: WindowGrid, ratio: float) -> np.ndarray:
    k_keep = keep_count(ratio, grid.n_win)
    A = windowed_scores(token_scorer(f, lw.scorer), grid)
    O = window_partition(f, grid)
    O_star, perm = rank_and_select_per_window(O, A, k_keep)
    M = layer_norm(O_star, lw.norm1.gamma, lw.norm1.beta)
    H_res = O_star + wmhsa(M, lw.attn)
    d, E, _ = H_res.shape
    # projection sees all K = E * K' selected tokens at once
    flat = H_res.reshape(d, E * k_keep)
    P = output_projection(layer_norm(flat, lw.norm2.gamma, lw.norm2.beta), lw.proj)
    P_res = (P + flat).reshape(d, E, k_keep)
    return window_unpartition(token_merge(P_res, O, perm), grid)


@dataclass(frozen=True)
class SelectedCount:
    K: int
    K_prime: int
    E: int
    N: int
    ratio: float
    by_convention: dict

    @property
    def K_over_N(self) -> float:
        return self.K / self.N


def baseline_selected_count(grid: WindowGrid, ratio: float) -> SelectedCount:
    """Tokens fed to the output projection, ``K = E * K'`` (padding included)."""
    conventions = {
        c: grid.E * keep_count(ratio, grid.n_win, c) for c in ("floor", "ceil", "floor_plus_one")
    }
    k_keep = keep_count(ratio, grid.n_win)
    return SelectedCount(
        K=grid.E * k_keep, K_prime=k_keep, E=grid.E, N=grid.N, ratio=ratio, by_convention=conventions
    )


def baseline_profile(grid: WindowGrid, schedule: SelectionRatioSchedule, n_layers: int) -> list[int]:
    return [baseline_selected_count(grid, r).K for r in schedule.per_layer(n_layers)]
