"""Per-digit losses (BCE, focal), class-balancing weights, and the batch
aggregation used for training.

Scalar reference versions (plain floats) sit next to the tensor-graph
versions so tests can pit the graph against a brute-force double loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

DEFAULT_EPSILON = 1e-7
DEFAULT_WEIGHT_RANGE = (0.25, 0.75)


def _check_target(t: float) -> None:
    if t not in (0, 1, 0.0, 1.0):
        raise DomainError(f"binary target must be 0 or 1, got {t}")


def bce(p: float, t: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """-t*log(p) - (1-t)*log(1-p), with p clamped to [eps, 1-eps]."""
    _check_target(t)
    p = min(max(p, epsilon), 1.0 - epsilon)
    return -t * math.log(p) - (1.0 - t) * math.log(1.0 - p)


def focal(p: float, t: float, gamma: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """BCE with each branch down-weighted by how confident it already is."""
    _check_target(t)
    if gamma < 0:
        raise DomainError(f"focal: gamma must be >= 0, got {gamma}")
    p = min(max(p, epsilon), 1.0 - epsilon)
    return -t * (1.0 - p) ** gamma * math.log(p) - (1.0 - t) * p**gamma * math.log(1.0 - p)


@dataclass(frozen=True)
class ClassWeights:
    """Inverse-frequency weights per whole-meter class, mapped to a range.

    Observed classes get 1/count min-max mapped linearly onto [low, high]
    (rarer class -> larger weight); a degenerate all-equal histogram maps
    to the midpoint; unobserved classes look up as ``high``.
    """

    weights: dict[int, float]
    counts: dict[int, int]
    low: float
    high: float

    def alpha(self, c: int) -> float:
        return self.weights.get(int(c), self.high)

    def to_text(self) -> str:
        lines = ["# class count weight"]
        for c in sorted(self.weights):
            lines.append(f"{c} {self.counts[c]} {self.weights[c]!r}")
        lines.append(f"# range {self.low!r} {self.high!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassWeights":
        weights: dict[int, float] = {}
        counts: dict[int, int] = {}
        low, high = DEFAULT_WEIGHT_RANGE
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["range"]:
                    low, high = float(parts[1]), float(parts[2])
                continue
            c, n, w = line.split()
            weights[int(c)] = float(w)
            counts[int(c)] = int(n)
        return cls(weights=weights, counts=counts, low=low, high=high)


def class_weights(
    meter_histogram: dict[int, int],
    weight_range: tuple[float, float] = DEFAULT_WEIGHT_RANGE,
) -> ClassWeights:
    low, high = weight_range
    if not (0 < low <= high):
        raise DomainError(f"class_weights: need 0 < low <= high, got {weight_range}")
    counts = {int(c): int(n) for c, n in meter_histogram.items() if n > 0}
    if not counts:
        raise DomainError("class_weights: histogram has no observed classes")
    raw = {c: 1.0 / n for c, n in counts.items()}
    rmin, rmax = min(raw.values()), max(raw.values())
    if rmax == rmin:
        mapped = {c: (low + high) / 2.0 for c in raw}
    else:
        scale = (high - low) / (rmax - rmin)
        mapped = {c: low + (r - rmin) * scale for c, r in raw.items()}
    return ClassWeights(weights=mapped, counts=counts, low=low, high=high)


@dataclass
class LossConfig:
    kind: str = "focal"  # bce | focal | mse_regression
    gamma: float = 2.0
    weight_range: tuple[float, float] = DEFAULT_WEIGHT_RANGE
    class_weights: ClassWeights | None = None
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in ("bce", "focal", "mse_regression"):
            raise DomainError(f"loss kind {self.kind!r} unknown")
        if self.gamma < 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        low, high = self.weight_range
        if not (0 < low <= high):
            raise DomainError(f"weight_range must satisfy 0 < low <= high, got {self.weight_range}")


def _digit_loss(p: Tensor, targets: Tensor, cfg: LossConfig) -> Tensor:
    """Per-element loss map on clamped probabilities, shape-preserving."""
    p = T.clip(p, cfg.epsilon, 1.0 - cfg.epsilon)
    log_p = T.log(p)
    one_minus = T.sub(1.0, p)
    log_q = T.log(one_minus)
    t_pos = targets
    t_neg = T.sub(1.0, targets)
    if cfg.kind == "bce":
        pos = T.mul(t_pos, log_p)
        negt = T.mul(t_neg, log_q)
    elif cfg.kind == "focal":
        pos = T.mul(t_pos, T.mul(T.pow_scalar(one_minus, cfg.gamma), log_p))
        negt = T.mul(t_neg, T.mul(T.pow_scalar(p, cfg.gamma), log_q))
    else:
        raise DomainError(f"per-digit loss undefined for kind {cfg.kind!r}")
    return T.neg(T.add(pos, negt))


def batch_loss(
    preds: Tensor,
    targets: Tensor,
    sample_classes: list[int],
    cfg: LossConfig,
) -> Tensor:
    """(1/(N*K)) * sum_n sum_k alpha_c(n) * L(preds[n,k], targets[n,k]).

    alpha is looked up from each sample's whole-meter ground-truth class
    and applied uniformly to that sample's K digit losses.
    """
    if preds.ndim != 2 or preds.shape != targets.shape:
        raise DimensionError(
            f"batch_loss: preds {preds.shape} and targets {targets.shape} must be equal rank-2 shapes"
        )
    n = preds.shape[0]
    if len(sample_classes) != n:
        raise DimensionError(
            f"batch_loss: {len(sample_classes)} sample classes for batch axis of extent {n}"
        )
    per_digit = _digit_loss(preds, targets, cfg)
    if cfg.class_weights is not None:
        alpha = np.array(
            [cfg.class_weights.alpha(c) for c in sample_classes], dtype=preds.dtype
        ).reshape(n, 1)
        per_digit = T.mul(per_digit, Tensor(alpha))
    return T.reduce_mean(per_digit, axes=(0, 1))


def mse_regression_loss(pred_distance: Tensor, gt_distance: Tensor) -> Tensor:
    """Mean squared error for the single-scalar regression head."""
    if pred_distance.shape != gt_distance.shape or pred_distance.ndim != 1:
        raise DimensionError(
            f"mse_regression_loss: expected equal rank-1 shapes, got "
            f"{pred_distance.shape} and {gt_distance.shape}"
        )
    diff = T.sub(pred_distance, gt_distance)
    return T.reduce_mean(T.mul(diff, diff), axes=(0,))
