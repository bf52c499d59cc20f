"""Periodic-averaging training protocol with weight-noise injection.

Simulates m learners sharing one random initialization.  Each round every
learner observes its next batch, optionally receives scaled zero-mean noise
on its parameters, and takes one mini-batch SGD step; every sync_period
rounds all learners are replaced by their parameter average.  Serial and
no-sync baselines reuse the same machinery.

All randomness comes from streams keyed by (master_seed, purpose, learner,
round), so results do not depend on execution order.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn, noise as noise_mod, optim, rng as rng_mod
from .data import Dataset, shuffle
from .noise import NoiseSpec
from .optim import SgdConfig

DEFAULT_MAGNITUDE_BOUND = 1e12


class TrainingDiverged(RuntimeError):
    """Parameters exceeded the magnitude bound or became non-finite."""

    def __init__(self, round_index: int, magnitude: float):
        super().__init__(
            f"training diverged at round {round_index} (max |param| = {magnitude:.3e})"
        )
        self.round_index = round_index
        self.magnitude = magnitude


@dataclass(frozen=True)
class ProtocolConfig:
    learners: int                  # number of simulated learners
    sync_period: int               # rounds between averaging steps
    rounds: int                    # total rounds per learner
    sgd_local: SgdConfig           # step size/batch for the synchronizing learners
    sgd_serial: SgdConfig          # step size/batch for serial and no-sync baselines
    noise: NoiseSpec = NoiseSpec()
    master_seed: int = 0
    antithetic_pairs: bool = False  # test hook: learner 2j+1 negates learner 2j's draw

    def __post_init__(self):
        if self.learners < 1 or self.sync_period < 1 or self.rounds < 1:
            raise ValueError("learners, sync_period and rounds must be at least 1")
        if self.antithetic_pairs and self.learners % 2 != 0:
            raise ValueError("antithetic pairing needs an even learner count")


@dataclass
class RunResult:
    setup: str = ""
    repetition: int = 0
    test_accuracy: float = math.nan
    cumulative_training_loss: float = math.nan
    seconds: float = 0.0
    failed: bool = False


@dataclass
class RoundRecord:
    round_index: int
    learner_params: list            # state after the round (post-sync on sync rounds)
    averaged: np.ndarray | None     # average written at a sync round, else None
    losses: list                    # per-learner pre-update batch loss


@dataclass
class Trajectory:
    initial: np.ndarray
    records: list = field(default_factory=list)
    sync_rounds: list = field(default_factory=list)


def average(models) -> np.ndarray:
    """Elementwise arithmetic mean, in fixed learner-index order."""
    models = list(models)
    if not models:
        raise ValueError("cannot average an empty model list")
    shape = models[0].shape
    if any(m.shape != shape for m in models):
        raise ValueError("model shapes disagree")
    return np.mean(np.stack(models), axis=0)


def partition(dataset: Dataset, m: int, rng: np.random.Generator):
    """Uniform random permutation, then m contiguous equal shards.

    The remainder after equal splitting is dropped.
    """
    if len(dataset) < m:
        raise ValueError(f"dataset of {len(dataset)} rows cannot feed {m} shards")
    permuted = shuffle(dataset, rng)
    size = len(dataset) // m
    return [permuted.take(slice(i * size, (i + 1) * size)) for i in range(m)]


def _batch_at(shard: Dataset, round_index: int, batch_size: int) -> nn.Batch:
    lo = (round_index - 1) * batch_size
    hi = lo + batch_size
    if hi > len(shard):
        raise ValueError(
            f"shard exhausted at round {round_index}: needs {hi} rows, has {len(shard)}"
        )
    return nn.Batch(shard.features[lo:hi], shard.targets[lo:hi])


def _guard(params: np.ndarray, round_index: int, bound: float):
    magnitude = float(np.max(np.abs(params)))
    if not math.isfinite(magnitude) or magnitude > bound:
        raise TrainingDiverged(round_index, magnitude)


def _finish(network, params, testset, cumulative_loss, started) -> RunResult:
    result = RunResult(
        cumulative_training_loss=cumulative_loss,
        seconds=time.perf_counter() - started,
    )
    if testset is not None:
        result.test_accuracy = nn.accuracy(network, params, testset)
    return result


def run_decentralized(network: nn.NetworkSpec, config: ProtocolConfig, shards,
                      testset: Dataset | None = None, record_trajectory: bool = False,
                      init_params: np.ndarray | None = None,
                      magnitude_bound: float = DEFAULT_MAGNITUDE_BOUND):
    """Run the full protocol; returns (final model, RunResult[, Trajectory]).

    All learners start from one shared random model.  The returned model is
    the last average written by a synchronization; local updates after the
    last sync are not evaluated (the trajectory still records them).  If no
    sync ever happens (sync_period > rounds) the final learner average is
    returned as a documented fallback.
    """
    shards = list(shards)
    if len(shards) != config.learners:
        raise ValueError(f"expected {config.learners} shards, got {len(shards)}")
    batch_size = config.sgd_local.batch_size
    for shard in shards:
        if len(shard) < config.rounds * batch_size:
            raise ValueError(
                f"shard with {len(shard)} rows cannot cover "
                f"{config.rounds} rounds of {batch_size}"
            )

    started = time.perf_counter()
    if init_params is None:
        init_params = nn.init_params(network, rng_mod.derive(config.master_seed, "init"))
    models = [init_params] * config.learners
    n_params = init_params.size
    trajectory = Trajectory(initial=init_params) if record_trajectory else None
    cumulative_loss = 0.0
    last_average = None

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, config.rounds + 1):
            sync_index = (t - 1) // config.sync_period + 1
            eps = noise_mod.level(config.noise, t, sync_index, config.sync_period)
            losses = []
            for i in range(config.learners):
                params = models[i]
                if eps != 0.0:
                    if config.antithetic_pairs:
                        stream_id, negate = i - (i % 2), bool(i % 2)
                    else:
                        stream_id, negate = i, False
                    psi = noise_mod.sample(
                        config.noise, n_params,
                        rng_mod.derive(config.master_seed, "noise", stream_id, t),
                        antithetic=negate,
                    )
                    params = noise_mod.inject(params, psi, eps)
                dropout_rng = (
                    rng_mod.derive(config.master_seed, "dropout", i, t)
                    if network.has_dropout else None
                )
                params, batch_loss = optim.train_on_batch(
                    network, params, _batch_at(shards[i], t, batch_size),
                    config.sgd_local, dropout_rng,
                )
                _guard(params, t, magnitude_bound)
                if not math.isfinite(batch_loss):
                    raise TrainingDiverged(t, batch_loss)
                models[i] = params
                losses.append(batch_loss)
                cumulative_loss += batch_loss
            averaged = None
            if t % config.sync_period == 0:
                averaged = average(models)
                models = [averaged] * config.learners
                last_average = averaged
                if trajectory is not None:
                    trajectory.sync_rounds.append(t)
            if trajectory is not None:
                trajectory.records.append(
                    RoundRecord(t, list(models), averaged, losses)
                )

    final = last_average if last_average is not None else average(models)
    result = _finish(network, final, testset, cumulative_loss, started)
    if record_trajectory:
        return final, result, trajectory
    return final, result


def run_serial(network: nn.NetworkSpec, config: ProtocolConfig, stream: Dataset,
               testset: Dataset | None = None, rounds: int | None = None,
               record_trajectory: bool = False,
               magnitude_bound: float = DEFAULT_MAGNITUDE_BOUND):
    """Single learner on the centralized stream (learners * rounds rounds).

    Uses sgd_serial and the same noise-injection hooks, with the sync-period
    clock driving the schedule even though no averaging happens.
    """
    if rounds is None:
        rounds = config.learners * config.rounds
    batch_size = config.sgd_serial.batch_size
    if len(stream) < rounds * batch_size:
        raise ValueError(
            f"stream with {len(stream)} rows cannot cover {rounds} rounds of {batch_size}"
        )

    started = time.perf_counter()
    params = nn.init_params(network, rng_mod.derive(config.master_seed, "init"))
    n_params = params.size
    trajectory = Trajectory(initial=params) if record_trajectory else None
    cumulative_loss = 0.0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, rounds + 1):
            sync_index = (t - 1) // config.sync_period + 1
            eps = noise_mod.level(config.noise, t, sync_index, config.sync_period)
            if eps != 0.0:
                psi = noise_mod.sample(
                    config.noise, n_params,
                    rng_mod.derive(config.master_seed, "noise", "serial", t),
                )
                params = noise_mod.inject(params, psi, eps)
            dropout_rng = (
                rng_mod.derive(config.master_seed, "dropout", "serial", t)
                if network.has_dropout else None
            )
            params, batch_loss = optim.train_on_batch(
                network, params, _batch_at(stream, t, batch_size),
                config.sgd_serial, dropout_rng,
            )
            _guard(params, t, magnitude_bound)
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(t, batch_loss)
            cumulative_loss += batch_loss
            if trajectory is not None:
                trajectory.records.append(RoundRecord(t, [params], None, [batch_loss]))

    result = _finish(network, params, testset, cumulative_loss, started)
    if record_trajectory:
        return params, result, trajectory
    return params, result


def nosync_selection(master_seed: int, learners: int) -> int:
    """Index of the learner a no-sync run evaluates (uniform, seeded)."""
    return int(rng_mod.derive(master_seed, "nosync_select").integers(learners))


def run_nosync(network: nn.NetworkSpec, config: ProtocolConfig, shards,
               testset: Dataset | None = None, record_trajectory: bool = False,
               magnitude_bound: float = DEFAULT_MAGNITUDE_BOUND):
    """m independent learners, no averaging; evaluates one picked at random.

    Baseline learners use sgd_serial (they are tuned like the serial model)
    and receive noise only if the config's schedule injects any.
    """
    shards = list(shards)
    if len(shards) != config.learners:
        raise ValueError(f"expected {config.learners} shards, got {len(shards)}")
    batch_size = config.sgd_serial.batch_size
    for shard in shards:
        if len(shard) < config.rounds * batch_size:
            raise ValueError(
                f"shard with {len(shard)} rows cannot cover "
                f"{config.rounds} rounds of {batch_size}"
            )

    started = time.perf_counter()
    init = nn.init_params(network, rng_mod.derive(config.master_seed, "init"))
    models = [init] * config.learners
    n_params = init.size
    trajectory = Trajectory(initial=init) if record_trajectory else None
    cumulative_loss = 0.0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(1, config.rounds + 1):
            sync_index = (t - 1) // config.sync_period + 1
            eps = noise_mod.level(config.noise, t, sync_index, config.sync_period)
            losses = []
            for i in range(config.learners):
                params = models[i]
                if eps != 0.0:
                    psi = noise_mod.sample(
                        config.noise, n_params,
                        rng_mod.derive(config.master_seed, "noise", i, t),
                    )
                    params = noise_mod.inject(params, psi, eps)
                dropout_rng = (
                    rng_mod.derive(config.master_seed, "dropout", i, t)
                    if network.has_dropout else None
                )
                params, batch_loss = optim.train_on_batch(
                    network, params, _batch_at(shards[i], t, batch_size),
                    config.sgd_serial, dropout_rng,
                )
                _guard(params, t, magnitude_bound)
                if not math.isfinite(batch_loss):
                    raise TrainingDiverged(t, batch_loss)
                models[i] = params
                losses.append(batch_loss)
                cumulative_loss += batch_loss
            if trajectory is not None:
                trajectory.records.append(RoundRecord(t, list(models), None, losses))

    selected = models[nosync_selection(config.master_seed, config.learners)]
    result = _finish(network, selected, testset, cumulative_loss, started)
    if record_trajectory:
        return selected, result, trajectory
    return selected, result
