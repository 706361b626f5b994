"""Discrete time slots and sinusoidal relative time embeddings."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeCodec:
    """Maps raw timestamps to slots and slots to bounded sinusoid vectors.

    `origin` must come from the training split only, so held-out timestamps
    cannot leak calibration information.  `granularity` is seconds per slot
    (default one day).  `dim` is the embedding width and must be even.

    By default the cosine at element 2i+1 runs at its own index-specific
    frequency (exponent (2i+1)/dim).  Set `shared_pair_frequency` to reuse
    the sine frequency for its cosine partner, the common positional-encoding
    convention.
    """

    origin: int
    granularity: int = 86_400
    dim: int = 16
    shared_pair_frequency: bool = False

    def __post_init__(self):
        if self.granularity <= 0:
            raise ConfigError(f"granularity must be positive, got {self.granularity}")
        if self.dim <= 0 or self.dim % 2 != 0:
            raise ConfigError(f"embedding dim must be positive and even, got {self.dim}")


def slot_of(codec: TimeCodec, timestamp: int) -> int:
    """Slot index of a timestamp; pre-origin events clamp to slot 0."""
    if timestamp < codec.origin:
        log.warning(
            "timestamp %d precedes origin %d; clamping to slot 0", timestamp, codec.origin
        )
        return 0
    return int((timestamp - codec.origin) // codec.granularity)


def time_embedding(codec: TimeCodec, slot: int) -> np.ndarray:
    """Length-`dim` sinusoid vector for one slot; every element in [-1, 1]."""
    if slot < 0:
        raise ConfigError(f"slot must be >= 0, got {slot}")
    return time_table(codec, slot + 1)[slot]


def time_table(codec: TimeCodec, num_slots: int) -> np.ndarray:
    """Rows 0..num_slots-1 of the slot embedding, shape (num_slots, dim)."""
    d = codec.dim
    idx = np.arange(d, dtype=np.float64)
    if codec.shared_pair_frequency:
        exponent = (idx - (idx % 2)) / d  # both halves of a pair share 2i/d
    else:
        exponent = idx / d  # element 2i uses 2i/d, element 2i+1 uses (2i+1)/d
    freq = 1.0 / np.power(10_000.0, exponent)
    slots = np.arange(num_slots, dtype=np.float64)[:, None]
    angles = slots * freq[None, :]
    table = np.empty((num_slots, d))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table
