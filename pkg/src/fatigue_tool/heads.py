"""Prediction heads and losses.

Two heads share the backbone:

- continuous: one logit per clip, sigmoid, mean squared error against the
  continuous label in [0, 1].
- categorical: k logits, softmax, and the combined loss
  alpha * cross_entropy + mse(expectation(q), y), where the expectation takes
  the probability-weighted mean of the bin midpoints (2i + 1) / (2k).
"""

from __future__ import annotations

import math
import sys
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fatigue_tool.exceptions import ContractViolationError
from fatigue_tool.tensor import (
    Tensor,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
)

HeadKind = Literal["continuous", "categorical"]
LOG_FLOOR = 1e-12
DISTRIBUTION_TOLERANCE = 1e-5


class LossConfig(BaseModel):
    """Head selection and loss weighting."""

    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1.0, ge=0.0, description="Weight of the cross-entropy term")
    k: int = Field(default=2, ge=1, description="Number of ordered fatigue classes")
    head: HeadKind = Field(default="categorical")

    @model_validator(mode="after")
    def _check_classes(self) -> Self:
        if self.head == "categorical" and self.k < 2:
            raise ValueError("categorical head needs k >= 2")
        return self

    @property
    def width(self) -> int:
        """Number of logits the head emits."""
        return self.k if self.head == "categorical" else 1


@dataclass(frozen=True)
class LabelPair:
    continuous: float
    categorical: int


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cross_entropy: float
    mse: float


def normalize_labels(mean_rating: float, k: int) -> LabelPair:
    """Map a mean 1..5 rating to (continuous in [0, 1], equal-width bin index)."""
    if not 1.0 <= mean_rating <= 5.0:
        raise ContractViolationError(f"rating {mean_rating} outside [1, 5]")
    if k < 1:
        raise ContractViolationError(f"k must be positive, got {k}")
    continuous = (mean_rating - 1.0) / 4.0
    return LabelPair(continuous, min(math.floor(continuous * k), k - 1))


def bin_midpoints(k: int) -> npt.NDArray[np.float64]:
    return (2.0 * np.arange(k) + 1.0) / (2.0 * k)


def expectation_transform(q: npt.ArrayLike) -> float:
    """Probability-weighted mean of bin midpoints for one distribution over k bins."""
    probs = np.asarray(q, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise ContractViolationError(f"expected a probability vector, got shape {probs.shape}")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > DISTRIBUTION_TOLERANCE:
        raise ContractViolationError("q is not a probability distribution")
    return float(probs @ bin_midpoints(probs.size))


def expectation_tensor(q: Tensor) -> Tensor:
    """Differentiable expectation for a batch: N x k probabilities -> N."""
    n, k = q.shape
    midpoints = Tensor(bin_midpoints(k).reshape(k, 1))
    return reshape(matmul(q, midpoints), (n,))


def _mse(pred: Tensor, targets: Tensor) -> Tensor:
    diff = sub(pred, targets)
    return mean(mul(diff, diff))


def loss_continuous(pred_logit: Tensor, targets: npt.ArrayLike) -> Tensor:
    """Mean of (sigmoid(logit) - target)^2 over the batch."""
    y = np.asarray(targets, dtype=np.float32).reshape(-1)
    if np.any(y < 0) or np.any(y > 1):
        raise ContractViolationError("continuous targets must lie in [0, 1]")
    logits = reshape(pred_logit, (pred_logit.size,))
    if logits.shape != y.shape:
        raise ContractViolationError(f"{logits.shape[0]} predictions for {y.size} targets")
    return _mse(sigmoid(logits), Tensor(y))


def loss_combined(
    logits: Tensor,
    labels: Sequence[LabelPair],
    cfg: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """alpha * cross_entropy(q, one_hot) + mse(expectation(q), y).

    With alpha = 0 the cross-entropy term is logged but kept out of the graph.
    """
    if cfg.head != "categorical":
        raise ContractViolationError("loss_combined needs the categorical head")
    n, k = logits.shape
    if k != cfg.k or len(labels) != n:
        raise ContractViolationError(f"logits {logits.shape} vs k={cfg.k}, {len(labels)} labels")
    classes = np.array([label.categorical for label in labels])
    if np.any(classes < 0) or np.any(classes >= k):
        raise ContractViolationError("categorical label out of range")
    one_hot = np.zeros((n, k), dtype=np.float32)
    one_hot[np.arange(n), classes] = 1.0
    y = Tensor(np.array([label.continuous for label in labels], dtype=np.float32))

    q = softmax(logits, axis=1)
    cross_entropy = scale(mul(Tensor(one_hot), log(q, floor=LOG_FLOOR)).sum(), -1.0 / n)
    mse = _mse(expectation_tensor(q), y)
    total = mse if cfg.alpha == 0 else scale(cross_entropy, cfg.alpha) + mse
    breakdown = LossBreakdown(
        total=total.item(), cross_entropy=cross_entropy.item(), mse=mse.item()
    )
    return total, breakdown


def head_loss(
    logits: Tensor,
    labels: Sequence[LabelPair],
    cfg: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Loss for whichever head ``cfg`` selects."""
    if cfg.head == "categorical":
        return loss_combined(logits, labels, cfg)
    loss = loss_continuous(logits, [label.continuous for label in labels])
    value = loss.item()
    return loss, LossBreakdown(total=value, cross_entropy=0.0, mse=value)


@dataclass(frozen=True)
class Prediction:
    continuous: npt.NDArray[np.float64]
    classes: npt.NDArray[np.int64]
    scores: npt.NDArray[np.float64]


def predict(logits: npt.ArrayLike, cfg: LossConfig) -> Prediction:
    """Continuous prediction and class per row; argmax ties go to the lower class.

    ``scores`` holds the per-class score used for ROC analysis: softmax
    probabilities for the categorical head, the sigmoid output (as the
    probability of the upper half) for the continuous head.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if cfg.head == "categorical":
        shifted = np.exp(z - z.max(axis=1, keepdims=True))
        q = shifted / shifted.sum(axis=1, keepdims=True)
        return Prediction(
            continuous=q @ bin_midpoints(cfg.k),
            classes=q.argmax(axis=1).astype(np.int64),
            scores=q,
        )
    p = 1.0 / (1.0 + np.exp(-z[:, 0]))
    return Prediction(
        continuous=p,
        classes=np.minimum(np.floor(p * cfg.k), cfg.k - 1).astype(np.int64),
        scores=np.stack([1.0 - p, p], axis=1),
    )
