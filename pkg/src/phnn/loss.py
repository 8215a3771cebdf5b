"""Class-balanced cross-entropy for deeply supervised side outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DataError, DimensionError, ModeError
from .tensor import Tensor, make_op

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    beta: float
    include_fused: bool = False

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def estimate_beta(labels: Iterable) -> float:
    """Mean over label slices of the negative-pixel fraction.

    This is a mean of per-slice ratios, not the pooled ratio over all pixels.
    """
    fractions = []
    for lab in labels:
        lab = np.asarray(lab)
        if lab.size == 0:
            continue
        fractions.append(np.count_nonzero(lab == 0) / lab.size)
    if not fractions:
        raise DataError("estimate_beta: no non-empty labels supplied")
    return float(np.mean(fractions))


def _check_binary(label: np.ndarray) -> None:
    if not np.all((label == 0) | (label == 1)):
        raise DataError("balanced_bce: label must contain only 0 and 1")


def balanced_bce(prob: Tensor, label, beta: float) -> Tensor:
    label = np.asarray(label.data if isinstance(label, Tensor) else label, dtype=np.float64)
    if label.shape != prob.shape:
        raise DimensionError(f"balanced_bce: prob {prob.shape} vs label {label.shape}")
    _check_binary(label)
    p = prob.data
    batch = p.shape[0] if p.ndim == 4 else 1
    pos = np.maximum(p, LOG_FLOOR)
    neg = np.maximum(1.0 - p, LOG_FLOOR)
    total = -(beta * np.sum(label * np.log(pos)) + (1.0 - beta) * np.sum((1.0 - label) * np.log(neg)))

    def backward(g):
        d = -(beta * label / pos - (1.0 - beta) * (1.0 - label) / neg) / batch
        return (g.item() * d,)

    return make_op(np.array(total / batch), (prob,), backward)


def side_losses(result, label, spec: LossSpec) -> list:
    terms = [balanced_bce(s.probability, label, spec.beta) for s in result.side_outputs]
    if spec.include_fused:
        if result.fused is None:
            raise ModeError("total_loss: fused loss requested but the model produced no fused output")
        terms.append(balanced_bce(result.fused.probability, label, spec.beta))
    return terms


def sum_losses(terms) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def total_loss(result, label, spec: LossSpec) -> Tensor:
    return sum_losses(side_losses(result, label, spec))
