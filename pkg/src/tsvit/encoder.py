"""Encoder assembly, presets, and the frozen/trainable parameter boundary."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .baseline_layer import DEFAULT_RATIOS, SelectionRatioSchedule, baseline_layer_forward
from .block import (
    CompensatorWeights,
    LayerWeights,
    MotionQueries,
    SelectorWeights,
    dense_layer_forward,
    named_arrays,
)
from .dynamic_layer import (
    RouterConfig,
    dynamic_layer_backward,
    dynamic_layer_forward,
    dynamic_layer_train_forward,
)
from .errors import ConfigurationError, DimensionError, PartitionError
from .kernels import matmul
from .projection import hidden_dim
from .windowing import TokenMask, WindowGrid

EncoderMode = Literal["dense", "baseline", "dynamic"]


@dataclass(frozen=True)
class EncoderConfig:
    L: int
    d: int
    A: int
    f: int
    k: int
    H: int
    W: int
    V: int = 1
    d_h: int = 32
    C: int = 3
    mode: EncoderMode = "dense"
    ratios: tuple = DEFAULT_RATIOS
    rate: float = 0.5
    theta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.H % self.k or self.W % self.k:
            raise ConfigurationError(f"image {self.H}x{self.W} not divisible by k={self.k}")
        if self.d % self.A:
            raise ConfigurationError(f"d={self.d} not divisible by A={self.A}")
        if self.mode not in ("dense", "baseline", "dynamic"):
            raise ConfigurationError(f"unknown encoder mode {self.mode!r}")
        if self.L < 0 or min(self.d, self.f, self.k, self.V, self.d_h, self.C) < 1:
            raise ConfigurationError("encoder sizes must be positive")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigurationError(f"activation rate {self.rate} outside [0, 1]")
        SelectionRatioSchedule(self.ratios)

    @property
    def d_o(self) -> int:
        return hidden_dim(self.d)

    @property
    def grid(self) -> WindowGrid:
        return WindowGrid.for_image(self.d, self.H, self.W, self.k, self.f)

    @property
    def N(self) -> int:
        return (self.H // self.k) * (self.W // self.k)

    @property
    def schedule(self) -> SelectionRatioSchedule:
        return SelectionRatioSchedule(self.ratios)

    def replace(self, **changes) -> "EncoderConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ratios"] = list(self.ratios)
        return out

    def digest(self) -> str:
        """SHA-256 of the canonical JSON encoding of the architecture fields."""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


PRESETS = {
    "eva02l": EncoderConfig(L=24, d=1024, A=16, f=16, k=16, H=320, W=800, V=6, d_h=32),
    "samb": EncoderConfig(L=12, d=768, A=12, f=14, k=16, H=320, W=800, V=6, d_h=32),
    # 7 x 11 token grid so the 4 x 4 windows need padding
    "desk": EncoderConfig(L=4, d=64, A=4, f=4, k=8, H=56, W=88, V=2, d_h=8),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


@dataclass
class EncoderWeights:
    patch_W: np.ndarray  # d x (C k k)
    patch_b: np.ndarray  # d
    layers: list = field(default_factory=list)

    def named(self) -> dict:
        return dict(named_arrays(self))


def parameter_shapes(cfg: EncoderConfig) -> dict:
    """Name -> shape for every weight, without allocating anything."""
    d, d_o, d_h = cfg.d, cfg.d_o, cfg.d_h
    shapes = {"patch_W": (d, cfg.C * cfg.k * cfg.k), "patch_b": (d,)}
    for i in range(cfg.L):
        p = f"layers.{i}"
        shapes.update({
            f"{p}.norm1.gamma": (d,), f"{p}.norm1.beta": (d,),
            f"{p}.attn.W_Q": (d, d), f"{p}.attn.W_K": (d, d),
            f"{p}.attn.W_V": (d, d), f"{p}.attn.W_O": (d, d),
            f"{p}.norm2.gamma": (d,), f"{p}.norm2.beta": (d,),
            f"{p}.proj.W1": (d_o, d), f"{p}.proj.W2": (d_o, d), f"{p}.proj.W3": (d, d_o),
            f"{p}.proj.gamma": (d_o,), f"{p}.proj.beta": (d_o,),
        })
        if cfg.mode == "dynamic":
            shapes.update({
                f"{p}.selector.w_sel": (1, d), f"{p}.selector.b_sel": (1,),
                f"{p}.compensator.W_down": (d_h, d), f"{p}.compensator.b_down": (d_h,),
                f"{p}.compensator.W_up": (d, d_h),
                f"{p}.compensator.norm.gamma": (d,), f"{p}.compensator.norm.beta": (d,),
            })
        elif cfg.mode == "baseline":
            shapes.update({f"{p}.scorer.Q_mot": (64, 256), f"{p}.scorer.W_s": (256, d)})
    return shapes


def count_parameters(cfg: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())


def init_weights(cfg: EncoderConfig, seed: Optional[int] = None) -> EncoderWeights:
    """Random stand-in for pretrained weights.

    Backbone weights come from their own generator stream, so the frozen part
    is identical for every mode at a given seed.
    """
    seed = cfg.seed if seed is None else seed
    backbone_ss, extra_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(backbone_ss)
    extra = np.random.default_rng(extra_ss)
    fan_in = cfg.C * cfg.k * cfg.k
    w = EncoderWeights(
        patch_W=rng.normal(0.0, 1.0 / np.sqrt(fan_in), (cfg.d, fan_in)),
        patch_b=np.zeros(cfg.d),
    )
    for _ in range(cfg.L):
        w.layers.append(LayerWeights.init_backbone(cfg.d, cfg.A, rng))
    for lw in w.layers:
        if cfg.mode == "dynamic":
            lw.selector = SelectorWeights.init(cfg.d, extra)
            lw.compensator = CompensatorWeights.init(cfg.d, cfg.d_h, extra)
        elif cfg.mode == "baseline":
            lw.scorer = MotionQueries.init(cfg.d, extra)
    return w


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    C, H, W = x.shape
    p = x.reshape(C, H // k, k, W // k, k).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(p.reshape((H // k) * (W // k), C * k * k))


def patch_embed(x: np.ndarray, patch_W: np.ndarray, patch_b: np.ndarray, k: int) -> np.ndarray:
    """Non-overlapping ``k x k`` patches projected to ``d x N`` tokens."""
    if x.ndim != 3:
        raise DimensionError(f"expected C x H x W image, got {x.shape}")
    C, H, W = x.shape
    if H % k or W % k:
        raise ConfigurationError(f"image {H}x{W} not divisible by patch size {k}")
    if patch_W.shape[1] != C * k * k:
        raise DimensionError("patch weights do not match channels * k * k")
    return matmul(patch_W, _patches(x, k).T) + patch_b[:, None]


def encoder_forward(
    x: np.ndarray,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    phase: str = "inference",
    rng=None,
):
    """Bottleneck features ``z`` (``d x N``) of one view plus per-layer masks."""
    grid = cfg.grid
    f = patch_embed(x, weights.patch_W, weights.patch_b, cfg.k)
    masks = []
    ratios = cfg.schedule.per_layer(cfg.L) if cfg.L else []
    router = RouterConfig(theta=cfg.theta, mode=phase) if cfg.mode == "dynamic" else None
    gen = np.random.default_rng(rng) if phase == "finetune" else None
    for i, lw in enumerate(weights.layers):
        if cfg.mode == "dense":
            f = dense_layer_forward(f, lw, grid)
            masks.append(TokenMask.dense(np.ones(grid.N)))
        elif cfg.mode == "baseline":
            f = baseline_layer_forward(f, lw, grid, ratios[i])
            masks.append(TokenMask.dense(np.ones(grid.N)))
        else:
            f, mask = dynamic_layer_forward(f, lw, grid, router, rng=gen)
            masks.append(mask)
    return f, masks


def encode_views(views: np.ndarray, cfg: EncoderConfig, weights: EncoderWeights, **kw):
    """Run ``encoder_forward`` over a ``V x C x H x W`` stack; weights are shared."""
    return [encoder_forward(v, cfg, weights, **kw) for v in views]


def encoder_train_forward(x, cfg: EncoderConfig, weights: EncoderWeights, rng, noise=None):
    """Fine-tuning forward of a dynamic encoder, keeping caches for backward."""
    if cfg.mode != "dynamic":
        raise ConfigurationError("training forward needs a dynamic-mode encoder")
    grid = cfg.grid
    router = RouterConfig(theta=cfg.theta, mode="finetune")
    patches = _patches(x, cfg.k)
    f = matmul(weights.patch_W, patches.T) + weights.patch_b[:, None]
    gates, caches = [], []
    for i, lw in enumerate(weights.layers):
        layer_noise = None if noise is None else noise[i]
        f, Z, cache = dynamic_layer_train_forward(f, lw, grid, router, rng=rng, noise=layer_noise)
        gates.append(Z)
        caches.append(cache)
    return f, gates, (patches, caches)


def encoder_backward(dz: np.ndarray, cache, dgates=None) -> EncoderWeights:
    patches, caches = cache
    layers = []
    dx = dz
    for i in reversed(range(len(caches))):
        extra = None if dgates is None else dgates[i]
        dx, g = dynamic_layer_backward(dx, caches[i], extra)
        layers.append(g)
    layers.reverse()
    return EncoderWeights(patch_W=matmul(dx, patches), patch_b=dx.sum(axis=1), layers=layers)


@dataclass(frozen=True)
class ParamPartition:
    trainable: frozenset
    frozen: frozenset
    shapes: dict

    def _count(self, names) -> int:
        return sum(int(np.prod(self.shapes[n])) for n in names)

    @property
    def trainable_count(self) -> int:
        return self._count(self.trainable)

    @property
    def frozen_count(self) -> int:
        return self._count(self.frozen)

    @property
    def total_count(self) -> int:
        return self._count(self.shapes)


TRAINABLE_PARTS = ("selector", "compensator")


def is_trainable(name: str) -> bool:
    parts = name.split(".")
    return len(parts) > 2 and parts[0] == "layers" and parts[2] in TRAINABLE_PARTS


def peft_partition(cfg: EncoderConfig) -> ParamPartition:
    """Selector and compensator weights train; everything else stays frozen."""
    if cfg.mode != "dynamic":
        raise PartitionError(f"no PEFT partition for {cfg.mode!r} mode")
    shapes = parameter_shapes(cfg)
    trainable = frozenset(n for n in shapes if is_trainable(n))
    return ParamPartition(trainable, frozenset(shapes) - trainable, shapes)


def plug_and_play_restore(weights: EncoderWeights) -> EncoderWeights:
    """Drop selectors and compensators, leaving the original dense encoder."""
    return EncoderWeights(
        patch_W=weights.patch_W.copy(),
        patch_b=weights.patch_b.copy(),
        layers=[copy.deepcopy(lw.backbone()) for lw in weights.layers],
    )


def frozen_digest(weights: EncoderWeights) -> str:
    """SHA-256 over the frozen arrays in sorted-name order."""
    h = hashlib.sha256()
    for name, arr in sorted(weights.named().items()):
        if not is_trainable(name):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
