"""Decentralized training simulator with periodic averaging and weight noise."""

from .data import Dataset, load_csv, load_mnist_idx, normalize, synth_blobs, synth_linear
from .experiment import (
    BoxStats, DataConfig, ExperimentConfig, box_stats, config_from_dict,
    config_to_dict, paper_presets, run_suite,
)
from .nn import Batch, LayerSpec, NetworkSpec, accuracy, dense, init_params
from .noise import NoiseSpec, inject, level, sample
from .optim import SgdConfig, msgd_step, train_on_batch
from .protocol import (
    ProtocolConfig, RunResult, Trajectory, TrainingDiverged, average,
    partition, run_decentralized, run_nosync, run_serial,
)
from .verify import (
    OracleReport, antithetic_lemma_check, expectation_convergence_check,
    gradient_check, median_invariance_check,
)

__version__ = "0.1.0"

__all__ = [
    "Batch", "BoxStats", "DataConfig", "Dataset", "ExperimentConfig",
    "LayerSpec", "NetworkSpec", "NoiseSpec", "OracleReport", "ProtocolConfig",
    "RunResult", "SgdConfig", "Trajectory", "TrainingDiverged", "accuracy",
    "antithetic_lemma_check", "average", "box_stats", "config_from_dict",
    "config_to_dict", "dense", "expectation_convergence_check",
    "gradient_check", "init_params", "inject", "level", "load_csv",
    "load_mnist_idx", "median_invariance_check", "msgd_step", "normalize",
    "paper_presets", "partition", "run_decentralized", "run_nosync",
    "run_serial", "run_suite", "sample", "synth_blobs", "synth_linear",
    "train_on_batch",
]
