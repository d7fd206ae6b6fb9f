"""Flat binary weight container.

Layout (all integers little-endian)::

    b"TSVIT1"                      magic
    32 bytes                       sha256 of the config (EncoderConfig.digest)
    u32 + bytes                    config as canonical JSON
    u32                            number of arrays
    per array, in sorted name order:
        u16 + bytes                name (utf-8)
        u8                         ndim
        u64 * ndim                 shape
        f64 * prod(shape)          data, C order
    32 bytes                       sha256 of everything above

The same weights always serialize to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .block import named_arrays
from .encoder import EncoderConfig, EncoderWeights, init_weights

MAGIC = b"TSVIT1"


class CheckpointError(ValueError):
    """Malformed or corrupted checkpoint; ``invariant`` names the failed check."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


def dumps(cfg: EncoderConfig, weights: EncoderWeights) -> bytes:
    cfg_json = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    arrays = sorted(weights.named().items())
    parts = [MAGIC, bytes.fromhex(cfg.digest()), struct.pack("<I", len(cfg_json)), cfg_json]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint_truncated", f"need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> tuple[EncoderConfig, dict]:
    """Parse and validate; returns the config and a name -> array dict."""
    if len(buf) < len(MAGIC) + 64 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("checkpoint_magic", "not a TSVIT1 checkpoint")
    body, tail = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != tail:
        raise CheckpointError("checkpoint_integrity", "payload hash mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    digest = r.take(32).hex()
    (n_cfg,) = r.unpack("<I")
    try:
        cfg_dict = json.loads(r.take(n_cfg))
        cfg = EncoderConfig(**{**cfg_dict, "ratios": tuple(cfg_dict["ratios"])})
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError("checkpoint_config", str(exc)) from None
    if cfg.digest() != digest:
        raise CheckpointError("checkpoint_config_digest", "config does not match its digest")
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("checkpoint_trailing_bytes", "unread bytes after last array")
    return cfg, arrays


def _fill(cfg: EncoderConfig, arrays: dict) -> EncoderWeights:
    weights = init_weights(cfg)
    expected = dict(named_arrays(weights))
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError("checkpoint_names", f"missing {missing[:3]}, unexpected {extra[:3]}")
    for name, dst in expected.items():
        if dst.shape != arrays[name].shape:
            raise CheckpointError("checkpoint_shapes", f"{name}: {arrays[name].shape} != {dst.shape}")
        dst[...] = arrays[name]
    return weights


def save(path, cfg: EncoderConfig, weights: EncoderWeights) -> None:
    Path(path).write_bytes(dumps(cfg, weights))


def load(path, cfg: EncoderConfig | None = None) -> tuple[EncoderConfig, EncoderWeights]:
    stored, arrays = loads(Path(path).read_bytes())
    if cfg is not None and cfg.digest() != stored.digest():
        raise CheckpointError("checkpoint_config", "checkpoint was written for a different config")
    return stored, _fill(stored, arrays)
