"""Multi-repetition experiment harness: setups, box statistics, presets.

A suite crosses the noise grid with the decentralized protocol plus serial
and no-sync baselines, repeats every setup with repetition-derived seeds,
and aggregates per-setup box statistics.  Repetition seeds are keyed by the
repetition index only, so every setup within a repetition shares the same
initialization, data order, and underlying noise draws (common random
numbers); setups differ purely by how the noise is scaled and applied.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace, field

import numpy as np

from . import data as data_mod, rng as rng_mod
from .nn import NetworkSpec, LayerSpec, accuracy, dense
from .noise import NoiseSpec
from .optim import SgdConfig
from .protocol import (
    ProtocolConfig, TrainingDiverged, run_decentralized, run_nosync, run_serial,
)

DEFAULT_MASTER_SEED = 1729
DEFAULT_MAGNITUDE_BOUND = 1e12

METRICS = ("test_accuracy", "cumulative_training_loss")
CSV_HEADER = "setup,repetition,distribution,noise_level,schedule,metric,value,failed"


class ConfigError(ValueError):
    """Invalid experiment configuration (bad field or unknown key)."""


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    kind: str                      # synth_linear | synth_logistic | synth_blobs | csv | mnist_idx
    examples_per_learner: int
    test_size: int
    dim: int = 18                  # synthetic feature count
    classes: int = 10              # synth_blobs class count
    label_noise_rate: float = 0.0  # synth_linear label flip probability
    sharpness: float = 2.0         # synth_logistic boundary sharpness
    one_hot: bool = False          # synth_linear: re-encode +/-1 as 2-class one-hot
    seed: int = 7                  # task/pool seed, fixed across repetitions
    path: str = ""                 # csv file
    label_column: int = 0
    label_mode: str = "pm_one"
    skip_header: bool = False
    normalize: bool | None = None  # default: True for csv, False otherwise
    images: str = ""               # mnist_idx files
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if self.kind not in ("synth_linear", "synth_logistic", "synth_blobs",
                             "csv", "mnist_idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.examples_per_learner < 1 or self.test_size < 1:
            raise ConfigError("examples_per_learner and test_size must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    network: NetworkSpec
    protocol: ProtocolConfig
    data: DataConfig
    noise_grid: tuple[NoiseSpec, ...]
    repetitions: int = 10
    metrics: tuple[str, ...] = METRICS
    include_serial: bool = True
    include_nosync: bool = True
    magnitude_bound: float = DEFAULT_MAGNITUDE_BOUND

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        for metric in self.metrics:
            if metric not in METRICS:
                raise ConfigError(f"unknown metric {metric!r}")
        if self.protocol.sgd_local.batch_size != self.protocol.sgd_serial.batch_size:
            raise ConfigError("local and serial batch sizes must agree")
        batch = self.protocol.sgd_local.batch_size
        if self.data.examples_per_learner % batch != 0:
            raise ConfigError("examples_per_learner must be a multiple of the batch size")
        if self.protocol.rounds * batch != self.data.examples_per_learner:
            raise ConfigError("protocol rounds must equal examples_per_learner / batch size")
        if not self.noise_grid:
            raise ConfigError("noise_grid must not be empty")


def build_protocol(learners: int, sync_period: int, sgd_local: SgdConfig,
                   sgd_serial: SgdConfig, examples_per_learner: int,
                   master_seed: int = DEFAULT_MASTER_SEED) -> ProtocolConfig:
    """ProtocolConfig with rounds derived from examples_per_learner."""
    if examples_per_learner % sgd_local.batch_size != 0:
        raise ConfigError("examples_per_learner must be a multiple of the batch size")
    return ProtocolConfig(
        learners=learners,
        sync_period=sync_period,
        rounds=examples_per_learner // sgd_local.batch_size,
        sgd_local=sgd_local,
        sgd_serial=sgd_serial,
        master_seed=master_seed,
    )


# --- box statistics -----------------------------------------------------------

@dataclass(frozen=True)
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def _quantile(sorted_values, q: float) -> float:
    # Linear interpolation on the inclusive positions 0..n-1.
    pos = (len(sorted_values) - 1) * q
    low = math.floor(pos)
    high = math.ceil(pos)
    if low == high:
        return sorted_values[low]
    return sorted_values[low] + (sorted_values[high] - sorted_values[low]) * (pos - low)


def box_stats(values) -> BoxStats:
    """Quartiles (linear/inclusive interpolation) and Tukey 1.5*IQR whiskers.

    Whiskers sit on the most extreme data points within 1.5*IQR of the
    quartiles; points beyond them are outliers.
    """
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("box_stats needs at least one value")
    q1 = _quantile(xs, 0.25)
    median = _quantile(xs, 0.5)
    q3 = _quantile(xs, 0.75)
    fence_low = q1 - 1.5 * (q3 - q1)
    fence_high = q3 + 1.5 * (q3 - q1)
    inside = [x for x in xs if fence_low <= x <= fence_high]
    whisker_low = inside[0]
    whisker_high = inside[-1]
    outliers = tuple(x for x in xs if x < whisker_low or x > whisker_high)
    return BoxStats(q1, median, q3, whisker_low, whisker_high, outliers)


# --- data preparation -----------------------------------------------------------

_POOL_CACHE: dict = {}


def _build_pool(cfg: DataConfig, learners: int):
    """(training pool of learners*examples_per_learner rows, test set).

    Pool contents are fixed by cfg.seed; repetitions only reorder them.
    """
    key = (cfg, learners)
    if key in _POOL_CACHE:
        return _POOL_CACHE[key]
    need = learners * cfg.examples_per_learner

    if cfg.kind in ("synth_linear", "synth_logistic"):
        stream = rng_mod.derive(cfg.seed, "synth")
        weights = stream.normal(0.0, 1.0, cfg.dim)
        weights /= np.linalg.norm(weights)
        if cfg.kind == "synth_linear":
            ds = data_mod.synth_linear(need + cfg.test_size, cfg.dim, weights,
                                       cfg.label_noise_rate, stream)
        else:
            ds = data_mod.synth_logistic(need + cfg.test_size, cfg.dim, weights,
                                         cfg.sharpness, stream)
        if cfg.one_hot:
            ds = data_mod.to_one_hot(ds)
        pool, test = ds.take(slice(0, need)), ds.take(slice(need, None))
    elif cfg.kind == "synth_blobs":
        stream = rng_mod.derive(cfg.seed, "synth")
        ds = data_mod.synth_blobs(need + cfg.test_size, cfg.dim, cfg.classes, stream)
        pool, test = ds.take(slice(0, need)), ds.take(slice(need, None))
    elif cfg.kind == "csv":
        ds = data_mod.load_csv(cfg.path, cfg.label_column, cfg.label_mode,
                               cfg.skip_header)
        if len(ds) < need + cfg.test_size:
            raise ConfigError(
                f"{cfg.path}: {len(ds)} rows < {need} train + {cfg.test_size} test"
            )
        permuted = data_mod.shuffle(ds, rng_mod.derive(cfg.seed, "split"))
        test = permuted.take(slice(0, cfg.test_size))
        pool = permuted.take(slice(cfg.test_size, cfg.test_size + need))
        if cfg.normalize is not False:
            pool, stats = data_mod.normalize(pool)
            test, _ = data_mod.normalize(test, stats)
    else:  # mnist_idx
        train = data_mod.load_mnist_idx(cfg.images, cfg.labels)
        test = data_mod.load_mnist_idx(cfg.test_images, cfg.test_labels)
        if len(train) < need:
            raise ConfigError(f"{cfg.images}: {len(train)} rows < {need} needed")
        pool = data_mod.shuffle(train, rng_mod.derive(cfg.seed, "split")).take(
            slice(0, need))
        test = test.take(slice(0, min(cfg.test_size, len(test))))
        if cfg.normalize is True:
            pool, stats = data_mod.normalize(pool)
            test, _ = data_mod.normalize(test, stats)

    _POOL_CACHE[key] = (pool, test)
    return pool, test


# --- suite execution ------------------------------------------------------------

@dataclass(frozen=True)
class SetupSpec:
    setup_id: str
    mode: str  # sync | serial | nosync
    noise: NoiseSpec


def enumerate_setups(config: ExperimentConfig):
    setups = [
        SetupSpec(f"sync+{ns.distribution}+eps{ns.base_level!r}+{ns.schedule}",
                  "sync", ns)
        for ns in config.noise_grid
    ]
    if config.include_serial:
        setups += [
            SetupSpec(f"serial+{ns.distribution}+eps{ns.base_level!r}+{ns.schedule}",
                      "serial", ns)
            for ns in config.noise_grid
        ]
    if config.include_nosync:
        base = NoiseSpec()
        setups.append(
            SetupSpec(f"nosync+{base.distribution}+eps{base.base_level!r}+{base.schedule}",
                      "nosync", base)
        )
    return setups


def run_one(config: ExperimentConfig, setup: SetupSpec, rep: int) -> dict:
    """Execute a single (setup, repetition) job; never raises on divergence."""
    pool, test = _build_pool(config.data, config.protocol.learners)
    rep_seed = rng_mod.derive_seed(config.protocol.master_seed, "rep", rep)
    ordered = data_mod.shuffle(pool, rng_mod.derive(rep_seed, "order"))
    size = config.data.examples_per_learner
    shards = [ordered.take(slice(i * size, (i + 1) * size))
              for i in range(config.protocol.learners)]
    proto = replace(config.protocol, noise=setup.noise, master_seed=rep_seed)

    row = {
        "setup": setup.setup_id,
        "repetition": rep,
        "distribution": setup.noise.distribution,
        "noise_level": setup.noise.base_level,
        "schedule": setup.noise.schedule,
        "test_accuracy": math.nan,
        "cumulative_training_loss": math.nan,
        "seconds": 0.0,
        "failed": False,
    }
    try:
        if setup.mode == "sync":
            _, result = run_decentralized(config.network, proto, shards, test,
                                          magnitude_bound=config.magnitude_bound)
        elif setup.mode == "serial":
            _, result = run_serial(config.network, proto, ordered, test,
                                   magnitude_bound=config.magnitude_bound)
        else:
            _, result = run_nosync(config.network, proto, shards, test,
                                   magnitude_bound=config.magnitude_bound)
    except TrainingDiverged:
        row["failed"] = True
        return row
    row["test_accuracy"] = result.test_accuracy
    row["cumulative_training_loss"] = result.cumulative_training_loss
    row["seconds"] = result.seconds
    return row


def _run_indexed(args):
    config, setup_index, rep = args
    setup = enumerate_setups(config)[setup_index]
    return (setup_index, rep), run_one(config, setup, rep)


@dataclass
class SuiteResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)  # ordered by (setup, repetition)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            for metric in self.config.metrics:
                value = row[metric]
                lines.append(",".join([
                    row["setup"],
                    str(row["repetition"]),
                    row["distribution"],
                    repr(float(row["noise_level"])),
                    row["schedule"],
                    metric,
                    repr(float(value)),
                    "1" if row["failed"] else "0",
                ]))
        return "\n".join(lines) + "\n"

    def stats(self) -> dict:
        return aggregate_stats(self.rows, self.config.metrics)


def aggregate_stats(rows, metrics=METRICS) -> dict:
    """Per-setup BoxStats over non-failed repetitions, plus failure counts."""
    out: dict = {}
    for row in rows:
        entry = out.setdefault(row["setup"], {
            "distribution": row["distribution"],
            "noise_level": row["noise_level"],
            "schedule": row["schedule"],
            "repetitions": 0,
            "failed": 0,
            "metrics": {},
        })
        entry["repetitions"] += 1
        if row["failed"]:
            entry["failed"] += 1
    for setup, entry in out.items():
        good = [r for r in rows if r["setup"] == setup and not r["failed"]]
        for metric in metrics:
            values = [r[metric] for r in good]
            if values:
                stats = box_stats(values)
                entry["metrics"][metric] = {
                    "q1": stats.q1,
                    "median": stats.median,
                    "q3": stats.q3,
                    "whisker_low": stats.whisker_low,
                    "whisker_high": stats.whisker_high,
                    "outliers": list(stats.outliers),
                    "n": len(values),
                }
            else:
                entry["metrics"][metric] = {"n": 0}
    return out


def run_suite(config: ExperimentConfig, jobs: int = 1) -> SuiteResult:
    """Run every (setup x repetition) job; output order is fixed by index.

    Failed runs (divergence past the magnitude bound) are flagged and kept
    in the rows; the suite always completes the remaining jobs.
    """
    setups = enumerate_setups(config)
    tasks = [(config, si, rep)
             for si in range(len(setups))
             for rep in range(config.repetitions)]
    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, row in pool.map(_run_indexed, tasks):
                results[key] = row
    else:
        for task in tasks:
            key, row = _run_indexed(task)
            results[key] = row
    rows = [results[(si, rep)]
            for si in range(len(setups))
            for rep in range(config.repetitions)]
    return SuiteResult(config=config, rows=rows)


# --- presets --------------------------------------------------------------------

def paper_presets() -> dict:
    """The three reference experiment configurations.

    susy_linear: 3-layer identity network (32/64/1 units) on a binary task
    with +/-1 targets and squared loss, B=10, serial eta 1e-5 and local eta
    2.5e-5, 10 learners, 20000 examples per learner, uniform noise decayed
    by the sync-period index.  susy_nonlinear: same widths with sigmoid
    activations and a 2-unit softmax head, eta 0.1/0.25, 1000 examples per
    learner (a 20-learner variant is a config override away).  mnist: dense
    512/512 ReLU layers with dropout 0.5 after each and a 10-class softmax
    head, eta 0.1/0.25, 500 examples per learner, evaluated on 10000 held
    out examples.

    Synthetic stand-in data is configured by default so the presets run
    self-contained; point the data section at the real CSV/IDX files for
    full-scale runs.
    """
    b10 = 10
    presets = {}

    levels = (0.0, 1.0, 2.0)
    presets["susy_linear"] = ExperimentConfig(
        name="susy_linear",
        network=dense([18, 32, 64, 1], ["identity", "identity", "identity"],
                      loss="squared"),
        protocol=build_protocol(
            learners=10, sync_period=10,
            sgd_local=SgdConfig(2.5e-5, b10), sgd_serial=SgdConfig(1e-5, b10),
            examples_per_learner=20000,
        ),
        data=DataConfig(kind="synth_logistic", examples_per_learner=20000,
                        test_size=20000, dim=18, sharpness=2.0),
        noise_grid=tuple(
            NoiseSpec("uniform_pm_half", lvl, "every_sync_decay") for lvl in levels
        ),
    )

    nonlinear_grid = tuple(
        NoiseSpec(dist, lvl, "every_sync_decay")
        for dist in ("uniform_pm_half", "gaussian_trunc")
        for lvl in (0.0, 0.1, 0.25, 0.5, 1.0, 2.0)
    ) + tuple(
        NoiseSpec(dist, lvl, "init_only")
        for dist in ("uniform_pm_half", "gaussian_trunc")
        for lvl in (2.0, 5.0)
    )
    presets["susy_nonlinear"] = ExperimentConfig(
        name="susy_nonlinear",
        network=dense([18, 32, 64, 2], ["sigmoid", "sigmoid", "softmax"],
                      loss="cross_entropy"),
        protocol=build_protocol(
            learners=10, sync_period=10,
            sgd_local=SgdConfig(0.25, b10), sgd_serial=SgdConfig(0.1, b10),
            examples_per_learner=1000,
        ),
        data=DataConfig(kind="synth_logistic", examples_per_learner=1000,
                        test_size=20000, dim=18, sharpness=2.0, one_hot=True),
        noise_grid=nonlinear_grid,
    )

    presets["mnist"] = ExperimentConfig(
        name="mnist",
        network=dense([784, 512, 512, 10], ["relu", "relu", "softmax"],
                      loss="cross_entropy", dropout=[0.5, 0.5, 0.0]),
        protocol=build_protocol(
            learners=10, sync_period=10,
            sgd_local=SgdConfig(0.25, b10), sgd_serial=SgdConfig(0.1, b10),
            examples_per_learner=500,
        ),
        data=DataConfig(kind="synth_blobs", examples_per_learner=500,
                        test_size=10000, dim=784, classes=10),
        noise_grid=tuple(
            NoiseSpec(dist, lvl, "every_sync_decay")
            for dist in ("uniform_pm_half", "gaussian_trunc")
            for lvl in (0.0, 0.1, 0.25, 1.0)
        ),
    )
    return presets


# --- JSON config round-trip -------------------------------------------------------

_MISSING = object()


def _take(mapping: dict, key: str, path: str, default=_MISSING):
    if key in mapping:
        return mapping.pop(key)
    if default is _MISSING:
        raise ConfigError(f"missing required field {path}.{key}")
    return default


def _reject_unknown(mapping: dict, path: str):
    if mapping:
        raise ConfigError(f"unknown field(s) at {path}: {', '.join(sorted(mapping))}")


def _sgd_from_dict(d, path) -> SgdConfig:
    d = dict(d)
    sgd = SgdConfig(eta=float(_take(d, "eta", path)),
                    batch_size=int(_take(d, "batch_size", path)))
    _reject_unknown(d, path)
    return sgd


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Parse a config mapping, rejecting unknown keys at every level."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    d = dict(raw)
    name = str(_take(d, "name", "$"))

    net_d = dict(_take(d, "network", "$"))
    layers = []
    for i, layer_d in enumerate(list(_take(net_d, "layers", "$.network"))):
        layer_d = dict(layer_d)
        path = f"$.network.layers[{i}]"
        layers.append(LayerSpec(
            input_size=int(_take(layer_d, "input_size", path)),
            output_size=int(_take(layer_d, "output_size", path)),
            activation=str(_take(layer_d, "activation", path, "identity")),
            dropout_after=float(_take(layer_d, "dropout_after", path, 0.0)),
        ))
        _reject_unknown(layer_d, path)
    try:
        network = NetworkSpec(tuple(layers),
                              str(_take(net_d, "loss", "$.network", "squared")))
    except ValueError as exc:
        raise ConfigError(f"$.network: {exc}") from exc
    _reject_unknown(net_d, "$.network")

    proto_d = dict(_take(d, "protocol", "$"))
    sgd_local = _sgd_from_dict(_take(proto_d, "sgd_local", "$.protocol"),
                               "$.protocol.sgd_local")
    sgd_serial = _sgd_from_dict(_take(proto_d, "sgd_serial", "$.protocol"),
                                "$.protocol.sgd_serial")
    learners = int(_take(proto_d, "learners", "$.protocol"))
    sync_period = int(_take(proto_d, "sync_period", "$.protocol"))
    master_seed = int(_take(proto_d, "master_seed", "$.protocol", DEFAULT_MASTER_SEED))
    _reject_unknown(proto_d, "$.protocol")

    data_d = dict(_take(d, "data", "$"))
    data_kwargs = {}
    for fname in ("kind", "path", "label_mode", "images", "labels",
                  "test_images", "test_labels"):
        if fname in data_d:
            data_kwargs[fname] = str(data_d.pop(fname))
    for fname in ("examples_per_learner", "test_size", "dim", "classes",
                  "seed", "label_column"):
        if fname in data_d:
            data_kwargs[fname] = int(data_d.pop(fname))
    for fname in ("label_noise_rate", "sharpness"):
        if fname in data_d:
            data_kwargs[fname] = float(data_d.pop(fname))
    for fname in ("one_hot", "skip_header", "normalize"):
        if fname in data_d:
            data_kwargs[fname] = data_d.pop(fname)
    _reject_unknown(data_d, "$.data")
    if "kind" not in data_kwargs:
        raise ConfigError("missing required field $.data.kind")
    if "examples_per_learner" not in data_kwargs or "test_size" not in data_kwargs:
        raise ConfigError("$.data needs examples_per_learner and test_size")
    try:
        data_cfg = DataConfig(**data_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"$.data: {exc}") from exc

    grid = []
    for i, noise_d in enumerate(list(_take(d, "noise_grid", "$"))):
        noise_d = dict(noise_d)
        path = f"$.noise_grid[{i}]"
        try:
            grid.append(NoiseSpec(
                distribution=str(_take(noise_d, "distribution", path, "uniform_pm_half")),
                base_level=float(_take(noise_d, "base_level", path)),
                schedule=str(_take(noise_d, "schedule", path)),
            ))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _reject_unknown(noise_d, path)

    repetitions = int(_take(d, "repetitions", "$", 10))
    metrics = tuple(_take(d, "metrics", "$", list(METRICS)))
    include_serial = bool(_take(d, "include_serial", "$", True))
    include_nosync = bool(_take(d, "include_nosync", "$", True))
    magnitude_bound = float(_take(d, "magnitude_bound", "$", DEFAULT_MAGNITUDE_BOUND))
    _reject_unknown(d, "$")

    try:
        protocol = build_protocol(learners, sync_period, sgd_local, sgd_serial,
                                  data_cfg.examples_per_learner, master_seed)
        return ExperimentConfig(
            name=name, network=network, protocol=protocol, data=data_cfg,
            noise_grid=tuple(grid), repetitions=repetitions, metrics=metrics,
            include_serial=include_serial, include_nosync=include_nosync,
            magnitude_bound=magnitude_bound,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    """Inverse of config_from_dict (rounds stay derived, not serialized)."""
    return {
        "name": config.name,
        "network": {
            "layers": [
                {
                    "input_size": l.input_size,
                    "output_size": l.output_size,
                    "activation": l.activation,
                    "dropout_after": l.dropout_after,
                }
                for l in config.network.layers
            ],
            "loss": config.network.loss,
        },
        "protocol": {
            "learners": config.protocol.learners,
            "sync_period": config.protocol.sync_period,
            "sgd_local": {"eta": config.protocol.sgd_local.eta,
                          "batch_size": config.protocol.sgd_local.batch_size},
            "sgd_serial": {"eta": config.protocol.sgd_serial.eta,
                           "batch_size": config.protocol.sgd_serial.batch_size},
            "master_seed": config.protocol.master_seed,
        },
        "data": {
            key: value for key, value in (
                ("kind", config.data.kind),
                ("examples_per_learner", config.data.examples_per_learner),
                ("test_size", config.data.test_size),
                ("dim", config.data.dim),
                ("classes", config.data.classes),
                ("label_noise_rate", config.data.label_noise_rate),
                ("sharpness", config.data.sharpness),
                ("one_hot", config.data.one_hot),
                ("seed", config.data.seed),
                ("path", config.data.path),
                ("label_column", config.data.label_column),
                ("label_mode", config.data.label_mode),
                ("skip_header", config.data.skip_header),
                ("normalize", config.data.normalize),
                ("images", config.data.images),
                ("labels", config.data.labels),
                ("test_images", config.data.test_images),
                ("test_labels", config.data.test_labels),
            )
        },
        "noise_grid": [
            {"distribution": ns.distribution, "base_level": ns.base_level,
             "schedule": ns.schedule}
            for ns in config.noise_grid
        ],
        "repetitions": config.repetitions,
        "metrics": list(config.metrics),
        "include_serial": config.include_serial,
        "include_nosync": config.include_nosync,
        "magnitude_bound": config.magnitude_bound,
    }
