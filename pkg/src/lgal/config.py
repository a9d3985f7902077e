"""Run configuration: per-experiment defaults plus key=value overrides.

One flat namespace covers training, model architecture, dataset scale,
the geometry solver, and the active-learning loops. A config file is
plain text, one `key = value` per line, '#' for comments. Unknown keys
are rejected by name so a typo cannot silently fall back to a default.

The experiment defaults encode the published hyperparameters for each
setup (learning rate, batch size, importance samples, architecture);
dataset sizes and loop budgets are desk-scale choices and are the knobs
most worth overriding.
"""

from dataclasses import dataclass, fields

from .errors import InvalidArgumentError, ParseError
from .geometry import GeodesicConfig
from .training import TrainConfig

EXPERIMENTS = ("toy", "pendulum", "trajectories")
STRATEGIES = ("mf", "max-entropy", "random", "all")


@dataclass
class RunConfig:
    # what to run
    experiment: str
    strategy: str = "all"
    seed: int = 0
    out_dir: str = "runs"
    # training; toy epochs are high because its training set is small
    # (the pool experiment starts from 300 rows, two batches per epoch)
    learning_rate: float = 2e-3
    batch_size: int = 150
    num_importance_samples: int = 5
    epochs: int = 600
    center_refresh_period: int = 100
    num_centers: int = 32
    # recognition model
    hidden: int = 512
    trunk_depth: int = 2
    # generative mean network
    decoder_arch: str = "fc"
    decoder_hidden: int = 512
    decoder_depth: int = 2
    decoder_out: str = "softplus"
    latent_dim: int = 2
    # dataset scale
    train_size: int = 300
    pool_size: int = 2000
    test_size: int = 2000
    pendulum_total: int = 3000
    demos_per_target: int = 5
    samples_per_demo: int = 100
    # pool loop
    iterations: int = 7
    batch_per_iteration: int = 10
    num_runs: int = 5
    retry_margin: float = 4.0
    # trajectory loop and oracles
    pair_angles: tuple = (40.0, 120.0, 200.0, 280.0)
    oracle_budget: int = 8
    reservoir_size: int = 2000
    demo_samples: int = 200
    # geometry solver
    geodesic_samples: int = 64
    geodesic_iterations: int = 300
    geodesic_learning_rate: float = 3e-2
    geodesic_hidden: int = 64
    geodesic_depth: int = 2
    grid_nx: int = 64
    grid_ny: int = 64
    grid_margin: float = 0.15

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidArgumentError(
                f"unknown experiment {self.experiment!r}, expected one of {EXPERIMENTS}")
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(
                f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            num_importance_samples=self.num_importance_samples,
            epochs=self.epochs,
            center_refresh_period=self.center_refresh_period,
            num_centers=self.num_centers,
            seed=self.seed,
        )

    def geodesic_config(self) -> GeodesicConfig:
        return GeodesicConfig(
            samples=self.geodesic_samples,
            iterations=self.geodesic_iterations,
            learning_rate=self.geodesic_learning_rate,
            hidden=self.geodesic_hidden,
            depth=self.geodesic_depth,
            seed=self.seed,
        )

    def strategies(self) -> tuple:
        if self.strategy == "all":
            return ("mf", "max_entropy", "random")
        return (self.strategy.replace("-", "_"),)


# fields whose defaults depend on the experiment; everything else shares
# the dataclass defaults above (which are the toy values)
_EXPERIMENT_DEFAULTS = {
    "toy": {},
    "pendulum": {
        "learning_rate": 1e-4,
        "batch_size": 32,
        "epochs": 60,
        "decoder_arch": "residual",
        "decoder_hidden": 128,
        "decoder_depth": 10,
        "decoder_out": "sigmoid",
    },
    "trajectories": {
        "learning_rate": 5e-4,
        "batch_size": 150,
        "num_importance_samples": 15,
        "epochs": 150,
        "decoder_arch": "residual",
        "decoder_hidden": 64,
        "decoder_depth": 10,
        "decoder_out": "softplus",
    },
}


def parse_config_file(path) -> dict:
    """Read `key = value` lines into a dict of raw strings."""
    raw = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParseError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
            key, value = (part.strip() for part in text.split("=", 1))
            if not key:
                raise ParseError(f"{path}:{lineno}: empty key")
            if key in raw:
                raise ParseError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    return raw


def _coerce(name: str, kind, value):
    if isinstance(value, kind if kind is not tuple else tuple):
        return value
    text = str(value).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(float(part) for part in text.split(",") if part.strip())
        return text
    except ValueError as exc:
        raise ParseError(f"config key {name!r}: cannot parse {text!r} as {kind.__name__}") from exc


def make_run_config(experiment: str | None = None, *overrides: dict) -> RunConfig:
    """Build a RunConfig from defaults plus override dicts, later dicts winning.

    The experiment may come from the argument or from an `experiment`
    key in any override dict. Unknown keys are rejected by name.
    """
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {f.name: type(getattr(RunConfig, f.name, "")) for f in fields(RunConfig)
             if f.name != "experiment"}
    types["experiment"] = str

    merged: dict = {}
    for source in overrides:
        for key, value in source.items():
            if key not in known:
                raise ParseError(f"unknown config key {key!r}")
            merged[key] = value
    if experiment is not None:
        merged.setdefault("experiment", experiment)
    if "experiment" not in merged:
        raise InvalidArgumentError("no experiment selected")
    exp = str(merged["experiment"])
    if exp not in EXPERIMENTS:
        raise InvalidArgumentError(f"unknown experiment {exp!r}, expected one of {EXPERIMENTS}")

    values = dict(_EXPERIMENT_DEFAULTS[exp])
    values.update(merged)
    values["experiment"] = exp
    coerced = {k: _coerce(k, types[k], v) for k, v in values.items()}
    return RunConfig(**coerced)
