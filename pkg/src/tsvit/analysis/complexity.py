"""Symbolic parameter and FLOP counts, computed from shapes alone.

Convention: a matmul costs 2 FLOPs per multiply-accumulate, softmax 5 per
element, a layer norm 8 per element, and any other elementwise op (GeLU,
ReLU, gating product, residual add) 1 per element.

Window attention can be counted two ways. ``"valid"`` charges the Q/K/V/O
projections and the queries only for the ``N`` real tokens, with every query
attending over a full ``N'``-token window. ``"padded"`` charges every one of the
``E * N'`` window slots, padding included.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

from ..baseline_layer import baseline_selected_count
from ..encoder import EncoderConfig
from ..errors import ConfigurationError

MATMUL = 2
SOFTMAX = 5
NORM = 8
ELEMENTWISE = 1

CONVENTION = "matmul=2*MAC;softmax=5/elem;norm=8/elem;elementwise=1/elem"


@dataclass(frozen=True)
class BlockCount:
    block: str
    params: int
    flops: float
    tokens: int


@dataclass
class ComplexityReport:
    blocks: list = field(default_factory=list)
    attention: str = "valid"
    N: int = 0
    E: int = 0
    N_prime: int = 0

    @property
    def convention(self) -> str:
        return f"{CONVENTION};attention={self.attention}"

    @property
    def total_params(self) -> int:
        return sum(b.params for b in self.blocks)

    @property
    def total_flops(self) -> int:
        return sum(b.flops for b in self.blocks)

    def flops_of(self, suffix: str) -> int:
        return sum(b.flops for b in self.blocks if b.block.endswith(suffix))

    def params_of(self, suffix: str) -> int:
        return sum(b.params for b in self.blocks if b.block.endswith(suffix))

    def projection_share(self) -> float:
        """Projection FLOPs over WMHSA + projection FLOPs."""
        p = self.flops_of("projection")
        return p / (p + self.flops_of("wmhsa"))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "params", "flops", "tokens", "convention"])
            for b in self.blocks:
                w.writerow([b.block, b.params, b.flops, b.tokens, self.convention])
            w.writerow(["total", self.total_params, self.total_flops, "", self.convention])


def wmhsa_params(d: int) -> int:
    return 4 * d * d


def wmhsa_flops(d: int, A: int, queries: int, windows_keys: int, proj_tokens: int) -> int:
    """``queries`` each attend over ``windows_keys`` keys; ``proj_tokens`` pass Q/K/V/O."""
    proj = MATMUL * 4 * d * d * proj_tokens
    scores = MATMUL * d * queries * windows_keys
    mix = MATMUL * d * queries * windows_keys
    soft = SOFTMAX * A * queries * windows_keys
    return proj + scores + mix + soft


def projection_params(d: int, d_o: int) -> int:
    return 3 * d * d_o


def projection_flops(d: int, d_o: int, G: int) -> int:
    """Three matmuls, GeLU, gating product, and the inner norm over ``G`` tokens."""
    return MATMUL * 3 * d * d_o * G + 2 * ELEMENTWISE * d_o * G + NORM * d_o * G


def count_layer(
    cfg: EncoderConfig,
    mode: Optional[str] = None,
    tokens: Optional[float] = None,
    attention: str = "valid",
    ratio: float = 1.0,
) -> ComplexityReport:
    """Per-block counts for one layer and one view.

    ``tokens`` is the number ``G`` of tokens reaching the output projection
    (mean ``K_bar`` for dynamic mode). It defaults to ``N`` for dense and
    dynamic, and to ``E * K'`` at ``ratio`` for the baseline.
    """
    if attention not in ("valid", "padded"):
        raise ConfigurationError(f"unknown attention counting {attention!r}")
    mode = cfg.mode if mode is None else mode
    grid = cfg.grid
    d, A, d_o, d_h = cfg.d, cfg.A, cfg.d_o, cfg.d_h
    N, E, Np = grid.N, grid.E, grid.n_win
    slots = E * Np
    rep = ComplexityReport(attention=attention, N=N, E=E, N_prime=Np)
    add = rep.blocks.append

    if mode == "baseline":
        sel = baseline_selected_count(grid, ratio)
        G = sel.K if tokens is None else int(round(tokens))
        add(BlockCount("scorer", 64 * 256 + 256 * d,
                       MATMUL * 256 * d * N + MATMUL * 64 * 256 * N + 2 * 64 * N, N))
        # selected tokens attend only among themselves, K' per window
        add(BlockCount("norm1", 2 * d, NORM * d * sel.K, sel.K))
        add(BlockCount("wmhsa", wmhsa_params(d), wmhsa_flops(d, A, sel.K, sel.K_prime, sel.K), sel.K))
    else:
        if mode not in ("dense", "dynamic"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        G = N if tokens is None else tokens
        q = N if attention == "valid" else slots
        add(BlockCount("norm1", 2 * d, NORM * d * q, q))
        add(BlockCount("wmhsa", wmhsa_params(d), wmhsa_flops(d, A, q, Np, q), q))
    G_int = int(round(G))
    add(BlockCount("residual", 0, ELEMENTWISE * d * (N + G), N))
    if mode == "dynamic":
        add(BlockCount("selector", d + 1, MATMUL * d * N + 5 * N, N))
        add(BlockCount("compensator", 2 * d * d_h + d_h + 2 * d,
                       NORM * d * N + MATMUL * 2 * d * d_h * N + ELEMENTWISE * (d_h + d) * N, N))
    # fractional G (a mean K_bar) keeps the count linear in G
    add(BlockCount("norm2", 2 * d, NORM * d * G, G_int))
    add(BlockCount("projection", projection_params(d, d_o), projection_flops(d, d_o, G), G_int))
    # inner-norm affine, listed apart so the projection row holds matrix weights only
    add(BlockCount("projection_norm", 2 * d_o, 0, G_int))
    return rep


def count_encoder(
    cfg: EncoderConfig,
    tokens_per_layer: Optional[Sequence[float]] = None,
    attention: str = "valid",
    views: int = 1,
) -> ComplexityReport:
    """Whole encoder for ``views`` views: patch embedding plus every layer."""
    grid = cfg.grid
    fan_in = cfg.C * cfg.k * cfg.k
    rep = ComplexityReport(attention=attention, N=grid.N, E=grid.E, N_prime=grid.n_win)
    rep.blocks.append(BlockCount("patch_embed", cfg.d * fan_in + cfg.d, views * MATMUL * cfg.d * fan_in * grid.N, grid.N))
    ratios = cfg.schedule.per_layer(cfg.L) if cfg.L else []
    for i in range(cfg.L):
        toks = None if tokens_per_layer is None else tokens_per_layer[i]
        layer = count_layer(cfg, tokens=toks, attention=attention, ratio=ratios[i])
        for b in layer.blocks:
            rep.blocks.append(BlockCount(f"layer{i}.{b.block}", b.params, views * b.flops, b.tokens))
    return rep
