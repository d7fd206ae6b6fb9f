"""Wall-clock harness for the encoder share of detection latency.

Only the encoder time is measurable here; the feature-pyramid and decoder
terms have no counterpart and are reported as ``None``.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..encoder import EncoderConfig, EncoderWeights, encoder_forward
from ..errors import ParameterError


@dataclass
class LatencyStats:
    millis: list
    tau_FPN: Optional[float] = None
    tau_D: Optional[float] = None

    @property
    def median(self) -> float:
        return float(np.median(self.millis))

    @property
    def iqr(self) -> float:
        q1, q3 = np.percentile(self.millis, [25, 75])
        return float(q3 - q1)

    @property
    def fps(self) -> float:
        return 1000.0 / self.median

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "millis"])
            for i, ms in enumerate(self.millis):
                w.writerow([i, repr(float(ms))])
            w.writerow(["median", repr(self.median)])
            w.writerow(["iqr", repr(self.iqr)])


def latency_bench(
    views,
    cfg: EncoderConfig,
    weights: EncoderWeights,
    trials: int = 5,
    warmup: int = 2,
    clock=time.perf_counter,
) -> LatencyStats:
    """Time ``encoder_forward`` over all ``V`` views, once per trial."""
    if trials < 5 or warmup < 2:
        raise ParameterError("need trials >= 5 and warmup >= 2")
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 4:
        raise ParameterError("views must be V x C x H x W")

    def run():
        for v in views:
            encoder_forward(v, cfg, weights, phase="inference")

    for _ in range(warmup):
        run()
    out = []
    for _ in range(trials):
        t0 = clock()
        run()
        dt = clock() - t0
        if not np.isfinite(dt) or dt < 0:
            raise RuntimeError("clock returned an invalid interval")
        out.append(dt * 1000.0)
    return LatencyStats(millis=out)
