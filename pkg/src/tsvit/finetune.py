"""Parameter-efficient fine-tuning of the selectors and compensators by self-distillation."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    EncoderConfig,
    EncoderWeights,
    encoder_backward,
    encoder_forward,
    encoder_train_forward,
    is_trainable,
    peft_partition,
    plug_and_play_restore,
)
from .errors import ConfigurationError, TrainingError
from .kernels import sigmoid
from .windowing import TokenMask

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 500
    lr: float = 3e-4
    momentum: float = 0.9
    rate_weight: float = 2.0  # lambda
    warmup_frac: float = 0.1
    batch_size: int = 2
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError("need lr > 0 and momentum in [0, 1)")
        if self.rate_weight < 0 or not 0 <= self.warmup_frac <= 1:
            raise ConfigurationError("need rate_weight >= 0 and warmup_frac in [0, 1]")

    def lambda_at(self, step: int) -> float:
        warm = self.warmup_frac * self.steps
        if warm <= 0:
            return self.rate_weight
        return self.rate_weight * min(1.0, (step + 1) / warm)


@dataclass
class FinetuneResult:
    weights: EncoderWeights
    log: list = field(default_factory=list)

    def final_rates(self, window: int = 50) -> list:
        """Per-layer soft activation rate averaged over the last ``window`` steps."""
        tail = self.log[-window:]
        if not tail:
            return []
        return list(np.mean([row["rates"] for row in tail], axis=0))

    def final_hard_rates(self, window: int = 50) -> list:
        tail = self.log[-window:]
        if not tail:
            return []
        return list(np.mean([row["hard_rates"] for row in tail], axis=0))


def teacher_outputs(images: np.ndarray, cfg: EncoderConfig, weights: EncoderWeights) -> np.ndarray:
    """Dense-encoder features for each image, computed once."""
    dense = cfg.replace(mode="dense")
    frozen = plug_and_play_restore(weights)
    return np.stack([encoder_forward(x, dense, frozen)[0] for x in images])


def _trainable(weights: EncoderWeights) -> dict:
    return {n: a for n, a in weights.named().items() if is_trainable(n)}


def peft_finetune(
    images: np.ndarray,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    ft: FinetuneConfig = FinetuneConfig(),
    target_rate=None,
) -> FinetuneResult:
    """Momentum-SGD on the trainable parts only; the backbone never changes.

    The loss is the mean squared feature gap to the dense teacher plus
    ``lambda * sum_l (mean Z_l - r)^2``, with lambda ramped up linearly over
    the first ``warmup_frac`` of the steps.
    """
    peft_partition(cfg)  # raises for non-dynamic configs
    r = cfg.rate if target_rate is None else float(target_rate)
    weights = copy.deepcopy(weights)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ConfigurationError(f"expected n x C x H x W images, got {images.shape}")
    teacher = teacher_outputs(images, cfg, weights)
    params = _trainable(weights)
    velocity = {n: np.zeros_like(a) for n, a in params.items()}
    rng = np.random.default_rng(ft.seed)
    n_img = len(images)
    d, N = cfg.d, cfg.N
    history = []
    for step in range(ft.steps):
        idx = rng.choice(n_img, size=min(ft.batch_size, n_img), replace=False)
        B = len(idx)
        lam = ft.lambda_at(step)
        fwd = [encoder_train_forward(images[i], cfg, weights, rng) for i in idx]
        rates = np.array([np.mean([out[1][l] for out in fwd]) for l in range(cfg.L)])
        distill = sum(np.sum((out[0] - teacher[i]) ** 2) for out, i in zip(fwd, idx)) / (B * d * N)
        rate_loss = lam * float(np.sum((rates - r) ** 2))
        loss = distill + rate_loss
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        grads = {n: np.zeros_like(a) for n, a in params.items()}
        for (z, Z, cache), i in zip(fwd, idx):
            dz = 2.0 * (z - teacher[i]) / (B * d * N)
            dZ = [np.full_like(Z[l], 2.0 * lam * (rates[l] - r) / (B * N)) for l in range(cfg.L)]
            g = encoder_backward(dz, cache, dZ).named()
            for n in grads:
                grads[n] += g[n]
        for n, a in params.items():
            if not np.all(np.isfinite(grads[n])):
                raise TrainingError(f"non-finite gradient for {n} at step {step}")
            velocity[n] = ft.momentum * velocity[n] - ft.lr * grads[n]
            a += velocity[n]
        hard = _hard_rates(weights, cfg, [fwd_cache[2] for fwd_cache in fwd])
        if step % ft.log_every == 0 or step == ft.steps - 1:
            row = {
                "step": step, "loss": float(loss), "distill": float(distill),
                "rate_loss": rate_loss, "lambda": lam,
                "rates": [float(v) for v in rates], "hard_rates": hard,
            }
            history.append(row)
            log.debug("step %d loss %.6g rates %s", step, loss, row["rates"])
    return FinetuneResult(weights=weights, log=history)


def _hard_rates(weights, cfg, caches) -> list:
    """Fraction of tokens the thresholded, noise-free gate would select."""
    out = []
    for l, lw in enumerate(weights.layers):
        picked = 0.0
        for _, layer_caches in caches:
            S = layer_caches[l].S
            picked += TokenMask.from_scores(sigmoid(S), cfg.theta).K_bar
        out.append(picked / (len(caches) * cfg.N))
    return out
