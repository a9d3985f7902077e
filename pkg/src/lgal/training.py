"""Training loop for the recognition/generative pair.

All trainable parameters (recognition trunk and heads, decoder mean
network, precision weights) live in one flat vector driven by a single
Adam state. The precision weights are projected back onto the
non-negative orthant after every step, and the radial-basis centers are
refreshed by k-means on the full set of latent means every
`center_refresh_period` optimizer steps, counting step zero.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError, TrainingDivergedError
from .model import (
    GenerativeModel,
    RecognitionModel,
    iwae_gradients,
    kmeans_centers,
    rbf_bandwidths,
)
from .network import ParamSet
from .optim import adam_init, adam_step

Array = np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 150
    num_importance_samples: int = 5
    epochs: int = 40
    center_refresh_period: int = 100
    num_centers: int = 32
    seed: int = 0
    alpha: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch size must be positive, got {self.batch_size}")
        if self.num_importance_samples < 1:
            raise InvalidArgumentError("need at least one importance sample")
        if self.epochs < 1:
            raise InvalidArgumentError("need at least one epoch")
        if self.center_refresh_period < 1:
            raise InvalidArgumentError("center refresh period must be positive")
        if self.num_centers < 2:
            raise InvalidArgumentError("need at least two centers")


@dataclass
class TraceRow:
    epoch: int
    bound: float
    wall_seconds: float


@dataclass
class _ParamGroups:
    """Bookkeeping to pack five parameter groups into one flat vector."""

    names: list[str]
    sizes: list[int]
    shapes: dict[str, tuple[int, ...]]
    offsets: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.offsets = {}
        at = 0
        for name, size in zip(self.names, self.sizes):
            self.offsets[name] = at
            at += size
        self.total = at

    def pack(self, parts: dict[str, Array]) -> Array:
        return np.concatenate([np.asarray(parts[n]).ravel() for n in self.names])

    def segment(self, flat: Array, name: str) -> Array:
        o = self.offsets[name]
        return flat[o:o + self.sizes[self.names.index(name)]]


def _groups_for(rec: RecognitionModel, gen: GenerativeModel) -> _ParamGroups:
    names = ["rec_trunk", "rec_mean", "rec_std", "gen_mean", "weights"]
    sizes = [
        rec.trunk_params.values.size,
        rec.mean_params.values.size,
        rec.std_params.values.size,
        gen.mean_params.values.size,
        gen.weights.size,
    ]
    shapes = {"weights": gen.weights.shape}
    return _ParamGroups(names, sizes, shapes)


def _apply_flat(rec: RecognitionModel, gen: GenerativeModel,
                groups: _ParamGroups, flat: Array) -> tuple[RecognitionModel, GenerativeModel]:
    rec = replace(
        rec,
        trunk_params=ParamSet(groups.segment(flat, "rec_trunk").copy()),
        mean_params=ParamSet(groups.segment(flat, "rec_mean").copy()),
        std_params=ParamSet(groups.segment(flat, "rec_std").copy()),
    )
    gen = replace(
        gen,
        mean_params=ParamSet(groups.segment(flat, "gen_mean").copy()),
        weights=groups.segment(flat, "weights").reshape(groups.shapes["weights"]).copy(),
    )
    return rec, gen


def train(rec: RecognitionModel, gen: GenerativeModel, data: Array,
          config: TrainConfig) -> tuple[RecognitionModel, GenerativeModel, list[TraceRow]]:
    """Maximize the importance-weighted bound; returns new models and a trace.

    The inputs are left untouched. Two calls with the same initial
    models, data, and config produce bit-identical parameters: a single
    generator seeded from config.seed drives shuffling, noise draws, and
    center reseeding in a fixed order.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != rec.n_x:
        raise InvalidArgumentError(
            f"data shape {data.shape} does not match model input width {rec.n_x}"
        )
    if data.shape[0] < config.batch_size:
        raise InvalidArgumentError("fewer data points than one batch")

    rec = rec.copy()
    gen = gen.copy()
    rng = np.random.default_rng(config.seed)
    groups = _groups_for(rec, gen)
    flat = groups.pack({
        "rec_trunk": rec.trunk_params.values,
        "rec_mean": rec.mean_params.values,
        "rec_std": rec.std_params.values,
        "gen_mean": gen.mean_params.values,
        "weights": gen.weights,
    })
    params = ParamSet(flat)
    state = adam_init(params.values.size)
    n = data.shape[0]
    k = config.num_importance_samples
    trace: list[TraceRow] = []
    t0 = time.perf_counter()
    step = 0
    w_lo = groups.offsets["weights"]

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        bounds = []
        for start in range(0, n, config.batch_size):
            rec, gen = _apply_flat(rec, gen, groups, params.values)
            if step % config.center_refresh_period == 0:
                z_means, _ = rec.encode(data)
                centers = kmeans_centers(z_means, config.num_centers, rng)
                gen = gen.with_centers(centers)
            batch = data[order[start:start + config.batch_size]]
            eps = rng.standard_normal((batch.shape[0], k, rec.n_z))
            bound, grads = iwae_gradients(rec, gen, batch, eps)
            if not np.isfinite(bound):
                raise TrainingDivergedError(f"bound became {bound}", step=step)
            bounds.append(bound)
            # Adam descends, so feed it the negated ascent gradients.
            descent = groups.pack({k2: -v for k2, v in grads.items()})
            params, state = adam_step(state, params, descent, config.learning_rate)
            params.values[w_lo:] = np.maximum(params.values[w_lo:], 0.0)
            step += 1
        trace.append(TraceRow(epoch, float(np.mean(bounds)), time.perf_counter() - t0))

    rec, gen = _apply_flat(rec, gen, groups, params.values)
    return rec, gen, trace


def trace_to_csv(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("epoch,bound,wall_seconds\n")
        for row in trace:
            fh.write(f"{row.epoch},{row.bound:.17g},{row.wall_seconds:.6f}\n")
