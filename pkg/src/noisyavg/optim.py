"""Mini-batch SGD with the summed-gradient convention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import ShapeError


@dataclass(frozen=True)
class SgdConfig:
    eta: float
    batch_size: int

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def msgd_step(params: np.ndarray, grad_sum: np.ndarray, eta: float) -> np.ndarray:
    """params - eta * grad_sum, where grad_sum is the batch-summed gradient."""
    if params.shape != grad_sum.shape:
        raise ShapeError(f"shapes disagree: {params.shape} vs {grad_sum.shape}")
    if eta <= 0:
        raise ValueError("eta must be positive")
    return params - eta * grad_sum


def train_on_batch(spec: nn.NetworkSpec, params: np.ndarray, batch: nn.Batch,
                   sgd: SgdConfig, rng: np.random.Generator | None = None):
    """One update on a batch; returns (new params, pre-update batch loss).

    A final partial batch (fewer rows than sgd.batch_size) is processed with
    the sum convention unchanged.
    """
    record = nn.forward(spec, params, batch.x, mode="train", rng=rng)
    batch_loss = nn.loss(spec, record.output, batch.y)
    grad = nn.backward(spec, params, batch, record)
    return msgd_step(params, grad, sgd.eta), batch_loss
