"""Multi-hot ordinal encoding and decoding of traveled distance.

A length-K binary vector encodes K+1 ordered classes: class 0 is all
zeros, class K all ones, and class c has ones in the first c positions.
The decoded class is the count of leading ones before the first zero, so
digits after the first zero never matter. Class c maps to the distance
c * d_step with d_step = d_max / K.

The default configuration (K=155, d_max=15.5 m, so decimeter steps) keeps
the nominal 15 m working range; the extra half meter comes from pinning
the step to exactly 0.1 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError


def round_half_away(x: float) -> int:
    """Round to nearest integer with ties away from zero (never banker's)."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class DistanceCodec:
    """Ordinal code configuration: K digits covering [0, d_max] meters."""

    K: int = 155
    d_max: float = 15.5
    threshold: float = 0.5

    def __post_init__(self):
        if self.K < 1:
            raise DomainError(f"codec: K must be positive, got {self.K}")
        if self.d_max <= 0:
            raise DomainError(f"codec: d_max must be positive, got {self.d_max}")
        if not 0.0 < self.threshold < 1.0:
            raise DomainError(f"codec: threshold must lie in (0, 1), got {self.threshold}")

    @property
    def d_step(self) -> float:
        return self.d_max / self.K

    @property
    def n_classes(self) -> int:
        return self.K + 1


def encode(distance: float, codec: DistanceCodec) -> np.ndarray:
    """Distance in meters -> binary digit vector of length K.

    The class is distance/d_step rounded to nearest (ties away from zero)
    and clamped to [0, K]; clamping absorbs windows slightly past d_max.
    """
    if distance < 0:
        raise DomainError(f"encode: distance must be non-negative, got {distance}")
    c = min(round_half_away(distance / codec.d_step), codec.K)
    digits = np.zeros(codec.K, dtype=np.float64)
    digits[:c] = 1.0
    return digits


def binarize(v: np.ndarray, threshold: float) -> np.ndarray:
    """Raw digits in [0,1] -> binary digits: 1 where digit >= threshold."""
    v = np.asarray(v, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise DomainError("binarize: digits must lie in [0, 1]")
    return (v >= threshold).astype(np.float64)


def decode_class(v_bin: np.ndarray) -> int:
    """Count of leading ones before the first zero; later digits ignored."""
    v_bin = np.asarray(v_bin)
    if not np.all((v_bin == 0) | (v_bin == 1)):
        raise ContractError("decode_class: digits must be binary 0/1")
    zeros = np.flatnonzero(v_bin == 0)
    return int(zeros[0]) if zeros.size else int(v_bin.size)


def class_to_distance(c: int, codec: DistanceCodec) -> float:
    if not 0 <= c <= codec.K:
        raise DomainError(f"class {c} out of range [0, {codec.K}]")
    return c * codec.d_step


def decode_distance(v_raw: np.ndarray, codec: DistanceCodec) -> float:
    """Raw network digits -> meters (binarize, count leading ones, scale)."""
    return class_to_distance(decode_class(binarize(v_raw, codec.threshold)), codec)
