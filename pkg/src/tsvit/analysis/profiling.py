"""Per-layer count of tokens reaching the output projection."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..baseline_layer import baseline_selected_count
from ..encoder import EncoderConfig, EncoderWeights, encoder_forward
from ..errors import ParameterError


@dataclass(frozen=True)
class LayerActivation:
    layer: int
    mean: float
    min: int
    max: int


@dataclass
class ActivationProfile:
    mode: str
    N: int
    rows: list

    @property
    def means(self) -> list:
        return [r.mean for r in self.rows]

    def non_increasing(self) -> bool:
        m = self.means
        return all(b <= a for a, b in zip(m, m[1:]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "mean", "min", "max"])
            for r in self.rows:
                w.writerow([r.layer, repr(float(r.mean)), r.min, r.max])


def profile_activations(samples, cfg: EncoderConfig, weights: EncoderWeights) -> ActivationProfile:
    """Run the encoder in inference on each ``C x H x W`` sample and tabulate counts.

    Dense mode counts ``N`` per layer, the baseline its fixed ``K = E * K'``,
    and dynamic mode the realized ``K_bar`` of each sample.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 4 or len(samples) == 0:
        raise ParameterError("need at least one C x H x W sample")
    per_layer = [[] for _ in range(cfg.L)]
    if cfg.mode == "baseline":
        ratios = cfg.schedule.per_layer(cfg.L)
        for i, r in enumerate(ratios):
            per_layer[i] = [baseline_selected_count(cfg.grid, r).K] * len(samples)
    else:
        for x in samples:
            _, masks = encoder_forward(x, cfg, weights, phase="inference")
            for i, m in enumerate(masks):
                per_layer[i].append(m.K_bar)
    rows = [
        LayerActivation(i, float(np.mean(c)), int(min(c)), int(max(c)))
        for i, c in enumerate(per_layer)
    ]
    return ActivationProfile(cfg.mode, cfg.N, rows)
