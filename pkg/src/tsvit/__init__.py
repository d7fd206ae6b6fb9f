"""Token-selective vision transformer encoder in plain numpy."""

from .encoder import (
    PRESETS,
    EncoderConfig,
    EncoderWeights,
    encoder_forward,
    init_weights,
    peft_partition,
    plug_and_play_restore,
    preset,
)

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "EncoderConfig",
    "EncoderWeights",
    "encoder_forward",
    "init_weights",
    "peft_partition",
    "plug_and_play_restore",
    "preset",
]
