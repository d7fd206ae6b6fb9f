"""Complexity counting, activation profiling, latency measurement, detection metrics."""

from .complexity import ComplexityReport, count_encoder, count_layer
from .latency import LatencyStats, latency_bench
from .metrics import DetectionRow, average_rank, compute_map, compute_mtp, compute_nds
from .profiling import ActivationProfile, profile_activations

__all__ = [
    "ActivationProfile",
    "ComplexityReport",
    "DetectionRow",
    "LatencyStats",
    "average_rank",
    "compute_map",
    "compute_mtp",
    "compute_nds",
    "count_encoder",
    "count_layer",
    "latency_bench",
    "profile_activations",
]
