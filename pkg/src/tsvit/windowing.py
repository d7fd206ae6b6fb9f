"""Window partitioning, per-window ranking, and sparse gather/scatter.

Tokens of one view are stored as ``d x N`` with ``N = H_tok * W_tok`` in
row-major spatial order. A windowed tensor is ``d x E x N'``: windows in
row-major order over the padded grid, tokens row-major inside a window.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class WindowGrid:
    d: int
    H_tok: int
    W_tok: int
    f: int
    h_p: int = field(init=False)
    w_p: int = field(init=False)

    def __post_init__(self):
        if min(self.d, self.H_tok, self.W_tok, self.f) < 1:
            raise ParameterError("grid extents must be positive")
        # trailing zero-padding up to the next multiple of f
        object.__setattr__(self, "h_p", -self.H_tok % self.f)
        object.__setattr__(self, "w_p", -self.W_tok % self.f)

    @classmethod
    def for_image(cls, d: int, H: int, W: int, k: int, f: int) -> "WindowGrid":
        if H % k or W % k:
            raise ParameterError(f"image {H}x{W} not divisible by patch size {k}")
        return cls(d=d, H_tok=H // k, W_tok=W // k, f=f)

    @property
    def H_p(self) -> int:
        return self.H_tok + self.h_p

    @property
    def W_p(self) -> int:
        return self.W_tok + self.w_p

    @property
    def N(self) -> int:
        return self.H_tok * self.W_tok

    @property
    def n_win(self) -> int:
        """Tokens per window, N' = f^2."""
        return self.f * self.f

    @property
    def E(self) -> int:
        return (self.H_p // self.f) * (self.W_p // self.f)

    def valid_mask(self) -> np.ndarray:
        """Boolean ``E x N'`` array, False at padded slots."""
        return window_partition(np.ones((1, self.N)), self)[0] > 0


def _check_tokens(x: np.ndarray, grid: WindowGrid):
    if x.ndim != 2 or x.shape[1] != grid.N:
        raise DimensionError(f"expected d x {grid.N} tokens, got {x.shape}")


def window_partition(x: np.ndarray, grid: WindowGrid) -> np.ndarray:
    _check_tokens(x, grid)
    c = x.shape[0]
    f = grid.f
    img = np.zeros((c, grid.H_p, grid.W_p))
    img[:, : grid.H_tok, : grid.W_tok] = x.reshape(c, grid.H_tok, grid.W_tok)
    img = img.reshape(c, grid.H_p // f, f, grid.W_p // f, f)
    return img.transpose(0, 1, 3, 2, 4).reshape(c, grid.E, grid.n_win)


def window_unpartition(w: np.ndarray, grid: WindowGrid) -> np.ndarray:
    if w.ndim != 3 or w.shape[1:] != (grid.E, grid.n_win):
        raise DimensionError(f"expected c x {grid.E} x {grid.n_win}, got {w.shape}")
    c = w.shape[0]
    f = grid.f
    img = w.reshape(c, grid.H_p // f, grid.W_p // f, f, f).transpose(0, 1, 3, 2, 4)
    img = img.reshape(c, grid.H_p, grid.W_p)
    return np.ascontiguousarray(img[:, : grid.H_tok, : grid.W_tok]).reshape(c, grid.N)


def rank_and_select_per_window(O: np.ndarray, A: np.ndarray, k_keep: int):
    """Keep the ``k_keep`` highest-scoring tokens of every window.

    Returns ``(O_star, perm)``: ``O_star`` is ``d x E x k_keep`` in rank
    order and ``perm[e, c]`` is the original in-window index of the token
    ranked ``c`` (full ranking, ``E x N'``). Ties go to the lower index.
    """
    if O.ndim != 3 or A.shape != (1,) + O.shape[1:]:
        raise DimensionError(f"scores {A.shape} do not match tokens {O.shape}")
    n_win = O.shape[2]
    if not 1 <= k_keep <= n_win:
        raise ParameterError(f"K'={k_keep} outside [1, {n_win}]")
    perm = np.argsort(-A[0], axis=1, kind="stable")
    O_star = np.take_along_axis(O, perm[None, :, :k_keep], axis=2)
    return O_star, perm


def token_merge(P: np.ndarray, O: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Scatter per-window selections ``P`` (``d x E x K'``) back into ``O``."""
    k_keep = P.shape[2]
    if P.shape[:2] != O.shape[:2] or perm.shape != O.shape[1:] or k_keep > O.shape[2]:
        raise DimensionError(f"cannot merge {P.shape} into {O.shape} with perm {perm.shape}")
    out = O.copy()
    if k_keep:
        np.put_along_axis(out, perm[None, :, :k_keep], P, axis=2)
    return out


@dataclass
class TokenMask:
    """Hard selection over the ``N`` tokens of one view.

    ``pi`` maps an original token index in ``J_star`` to its column in the
    compacted ``d x K_bar`` tensor. Indices are 0-based.
    """

    B: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=bool).reshape(-1)
        self.Z = np.asarray(self.Z, dtype=np.float64).reshape(-1)
        if self.B.shape != self.Z.shape:
            raise DimensionError("B and Z lengths differ")
        self.J_star = np.flatnonzero(self.B)
        self.pi = {int(j): c for c, j in enumerate(self.J_star)}

    @classmethod
    def from_scores(cls, Z, theta: float) -> "TokenMask":
        Z = np.asarray(Z, dtype=np.float64).reshape(-1)
        return cls(B=Z > theta, Z=Z)

    @classmethod
    def dense(cls, Z) -> "TokenMask":
        Z = np.asarray(Z, dtype=np.float64).reshape(-1)
        return cls(B=np.ones(Z.shape, dtype=bool), Z=Z)

    @property
    def N(self) -> int:
        return self.B.size

    @property
    def K_bar(self) -> int:
        return int(self.J_star.size)

    @property
    def empty(self) -> bool:
        return self.K_bar == 0


def gather_selected(M_hat: np.ndarray, mask: TokenMask) -> np.ndarray:
    if M_hat.ndim != 2 or M_hat.shape[1] != mask.N:
        raise DimensionError(f"mask over {mask.N} tokens applied to {M_hat.shape}")
    return M_hat[:, mask.J_star]


def reverse_index(P: np.ndarray, mask: TokenMask) -> np.ndarray:
    if P.ndim != 2 or P.shape[1] != mask.K_bar:
        raise DimensionError(f"expected d x {mask.K_bar}, got {P.shape}")
    R = np.zeros((P.shape[0], mask.N))
    R[:, mask.J_star] = P
    return R
