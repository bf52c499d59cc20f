"""Zero-mean weight-noise distributions, level schedules, and injection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

DISTRIBUTIONS = ("uniform_pm_half", "gaussian_trunc", "gaussian")
SCHEDULES = (
    "init_only",           # level at round 1 only
    "every_sync_decay",    # level/k at sync rounds, 0 otherwise
    "every_sync_constant",  # level at sync rounds, 0 otherwise
    "every_round_decay",   # level/k every round, k = current sync-period index
    "every_round_constant",  # level every round, no decay
    "none",
)


@dataclass(frozen=True)
class NoiseSpec:
    distribution: str = "uniform_pm_half"
    base_level: float = 0.0
    schedule: str = "none"
    bias: float = 0.0  # test hook: shifts every draw, breaking the zero-mean property

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.base_level < 0:
            raise ValueError("base_level must be non-negative")


def sample(spec: NoiseSpec, dim: int, rng: np.random.Generator,
           antithetic: bool = False) -> np.ndarray:
    """Draw a noise vector.

    uniform_pm_half: iid Uniform(-0.5, 0.5).  gaussian_trunc: iid
    Normal(0, 0.25) rejection-truncated to [-0.5, 0.5].  gaussian: plain
    Normal(0, 0.25).  With antithetic=True the result is the exact negation
    of what the same stream state would have produced without the flag.
    """
    if dim < 1:
        raise ValueError("dim must be at least 1")
    if spec.distribution == "uniform_pm_half":
        psi = rng.uniform(-0.5, 0.5, dim)
    elif spec.distribution == "gaussian":
        psi = rng.normal(0.0, 0.25, dim)
    else:
        psi = rng.normal(0.0, 0.25, dim)
        bad = np.abs(psi) > 0.5
        while bad.any():
            psi[bad] = rng.normal(0.0, 0.25, int(bad.sum()))
            bad = np.abs(psi) > 0.5
    if antithetic:
        psi = -psi
    if spec.bias != 0.0:
        psi = psi + spec.bias
    return psi


def level(spec: NoiseSpec, round_index: int, sync_index: int,
          sync_period: int) -> float:
    """Effective noise level for a round.

    round_index t counts from 1; sync_index k is the index of the sync
    period containing t (k = floor((t-1)/sync_period) + 1, so at sync rounds
    k = t/sync_period); sync_period decides which rounds are sync rounds.
    """
    if round_index < 1 or sync_index < 1 or sync_period < 1:
        raise ValueError("round_index, sync_index and sync_period count from 1")
    sched = spec.schedule
    if sched == "none" or spec.base_level == 0.0:
        return 0.0
    if sched == "init_only":
        return spec.base_level if round_index == 1 else 0.0
    is_sync_round = round_index % sync_period == 0
    if sched == "every_sync_decay":
        return spec.base_level / sync_index if is_sync_round else 0.0
    if sched == "every_sync_constant":
        return spec.base_level if is_sync_round else 0.0
    if sched == "every_round_decay":
        return spec.base_level / sync_index
    return spec.base_level  # every_round_constant


def inject(params: np.ndarray, psi: np.ndarray, eps: float) -> np.ndarray:
    """params + eps * psi (all trainable parameters, biases included)."""
    if params.shape != psi.shape:
        raise ShapeError(f"shapes disagree: {params.shape} vs {psi.shape}")
    return params + eps * psi
