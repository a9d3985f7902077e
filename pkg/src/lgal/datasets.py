"""Synthetic datasets: the two-crescent toy set, rendered pendulum
images, and minimum-jerk joint trajectories, plus CSV and PGM export.

All generators take an explicit numpy Generator and are pure functions
of (config, rng). Observations stay in the positive orthant because the
decoder mean networks end in softplus or sigmoid heads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError

Array = np.ndarray


@dataclass
class LabeledSplit:
    """Train/test/pool observation matrices with optional row metadata."""

    train: Array
    test: Array
    pool: Array
    train_meta: Array | None = None
    test_meta: Array | None = None
    pool_meta: Array | None = None
    meta_name: str | None = None

    def __post_init__(self):
        widths = {a.shape[1] for a in (self.train, self.test, self.pool) if a.size}
        if len(widths) > 1:
            raise InvalidArgumentError(f"split parts disagree on width: {widths}")
        for name in ("train", "test", "pool"):
            meta = getattr(self, f"{name}_meta")
            part = getattr(self, name)
            if meta is not None and len(meta) != len(part):
                raise InvalidArgumentError(f"{name} metadata length mismatch")

    @property
    def n_x(self) -> int:
        return self.train.shape[1]


@dataclass
class ToyConfig:
    """Two facing crescents plus a sparse central bridge.

    The bridge box is dense in the pool and test splits but nearly
    absent from training (its mixture weight is multiplied by
    train_bridge_factor there), which is what leaves the model ignorant
    about the region between the clusters.
    """

    train_size: int = 3300
    test_size: int = 2000
    pool_size: int = 2000
    left_center: tuple[float, float] = (2.0, 3.0)
    right_center: tuple[float, float] = (8.0, 3.0)
    radius: float = 1.5
    radial_noise: float = 0.12
    arc_degrees: float = 170.0
    bridge_x: tuple[float, float] = (2.7, 7.3)
    bridge_y: tuple[float, float] = (2.5, 3.5)
    bridge_weight: float = 0.08
    train_bridge_factor: float = 0.02


def _sample_toy(config: ToyConfig, n: int, bridge_weight: float,
                rng: np.random.Generator) -> tuple[Array, Array]:
    w_c = (1.0 - bridge_weight) / 2.0
    comp = rng.choice(3, size=n, p=[w_c, w_c, bridge_weight])
    points = np.empty((n, 2))
    half_arc = np.deg2rad(config.arc_degrees) / 2.0
    for side, center, facing in ((0, config.left_center, np.pi), (1, config.right_center, 0.0)):
        mask = comp == side
        m = int(mask.sum())
        phi = facing + rng.uniform(-half_arc, half_arc, size=m)
        rad = config.radius + rng.normal(0.0, config.radial_noise, size=m)
        points[mask, 0] = center[0] + rad * np.cos(phi)
        points[mask, 1] = center[1] + rad * np.sin(phi)
    mask = comp == 2
    m = int(mask.sum())
    points[mask, 0] = rng.uniform(*config.bridge_x, size=m)
    points[mask, 1] = rng.uniform(*config.bridge_y, size=m)
    return points, comp.astype(np.float64)


def gen_toy(config: ToyConfig, rng: np.random.Generator) -> LabeledSplit:
    train, train_meta = _sample_toy(
        config, config.train_size, config.bridge_weight * config.train_bridge_factor, rng
    )
    test, test_meta = _sample_toy(config, config.test_size, config.bridge_weight, rng)
    pool, pool_meta = _sample_toy(config, config.pool_size, config.bridge_weight, rng)
    return LabeledSplit(train, test, pool, train_meta, test_meta, pool_meta, "cluster")


@dataclass
class PendulumConfig:
    total: int = 15000
    ranges: tuple[tuple[float, float], ...] = ((0.0, 150.0), (180.0, 330.0))
    pixel_noise: float = 0.05
    test_fraction: float = 0.1
    image_size: int = 16
    rod_length: float = 7.0
    rod_width: float = 1.5


def render_pendulum(angle_deg: float, image_size: int = 16,
                    rod_length: float = 7.0, rod_width: float = 1.5) -> Array:
    """Antialiased rod at the given angle, as an (size, size) image in [0, 1].

    The rod is a segment from the image center, 0 degrees pointing up,
    angles increasing clockwise. Pixel intensity is a unit-width linear
    ramp in the distance to the segment, so total ink varies only with
    grid discretization, not with angle.
    """
    c = (image_size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    dx, dy = np.sin(theta), -np.cos(theta)
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    px, py = xs - c, ys - c
    t = np.clip(px * dx + py * dy, 0.0, rod_length)
    dist = np.hypot(px - t * dx, py - t * dy)
    return np.clip(rod_width / 2.0 + 0.5 - dist, 0.0, 1.0)


def gen_pendulum_dataset(config: PendulumConfig, rng: np.random.Generator) -> LabeledSplit:
    spans = np.array([hi - lo for lo, hi in config.ranges], dtype=np.float64)
    if np.any(spans <= 0):
        raise InvalidArgumentError("angle ranges must be non-empty intervals")
    pick = rng.choice(len(config.ranges), size=config.total, p=spans / spans.sum())
    angles = np.empty(config.total)
    for i, (lo, hi) in enumerate(config.ranges):
        mask = pick == i
        angles[mask] = rng.uniform(lo, hi, size=int(mask.sum()))
    frames = np.stack([
        render_pendulum(a, config.image_size, config.rod_length, config.rod_width).ravel()
        for a in angles
    ])
    frames = np.clip(frames + rng.normal(0.0, config.pixel_noise, size=frames.shape), 0.0, 1.0)
    order = rng.permutation(config.total)
    n_test = int(round(config.total * config.test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    empty = np.empty((0, frames.shape[1]))
    return LabeledSplit(
        frames[train_idx], frames[test_idx], empty,
        angles[train_idx], angles[test_idx], np.empty(0), "angle",
    )


@dataclass
class TrajectoryConfig:
    """Minimum-jerk reaches from one start pose to two target clusters."""

    start: tuple[float, ...] = (0.8, 0.8, 0.8, 0.8, 0.8, 0.8, 0.8)
    targets: tuple[tuple[float, ...], ...] = (
        (1.6, 1.1, 0.5, 1.3, 0.9, 0.4, 1.0),
        (0.4, 1.5, 1.4, 0.5, 1.2, 1.5, 0.6),
    )
    demos_per_target: int = 5
    samples_per_demo: int = 1000
    target_noise: float = 0.05


def min_jerk_profile(tau: Array) -> Array:
    """The smooth 0-to-1 ramp 10 t^3 - 15 t^4 + 6 t^5."""
    tau = np.asarray(tau, dtype=np.float64)
    return 10.0 * tau**3 - 15.0 * tau**4 + 6.0 * tau**5


def min_jerk_demo(start: Array, end: Array, samples: int) -> Array:
    """One demonstration: straight line in joint space, min-jerk in time."""
    tau = np.linspace(0.0, 1.0, samples)
    s = min_jerk_profile(tau)
    return np.asarray(start)[None, :] + s[:, None] * (np.asarray(end) - np.asarray(start))[None, :]


def gen_joint_trajectories(config: TrajectoryConfig, rng: np.random.Generator) -> LabeledSplit:
    start = np.asarray(config.start, dtype=np.float64)
    rows = []
    meta = []
    for cluster, target in enumerate(config.targets):
        target = np.asarray(target, dtype=np.float64)
        for _ in range(config.demos_per_target):
            end = target + rng.normal(0.0, config.target_noise, size=start.shape)
            rows.append(min_jerk_demo(start, end, config.samples_per_demo))
            meta.append(np.full(config.samples_per_demo, float(cluster)))
    train = np.concatenate(rows)
    empty = np.empty((0, start.size))
    return LabeledSplit(train, empty, empty,
                        np.concatenate(meta), np.empty(0), np.empty(0), "cluster")


def save_csv(path, data: Array, meta: Array | None = None,
             meta_name: str | None = None) -> None:
    """Rows of float64 printed with %.17g, so reading back is bit-exact."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise InvalidArgumentError("save_csv expects a 2-D array")
    if (meta is None) != (meta_name is None):
        raise InvalidArgumentError("metadata and its column name go together")
    cols = [f"dim_{i}" for i in range(data.shape[1])]
    if meta_name is not None:
        cols.append(meta_name)
        meta = np.asarray(meta, dtype=np.float64)
        if len(meta) != len(data):
            raise InvalidArgumentError("metadata length mismatch")
    with open(path, "w", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(data.shape[0]):
            row = [f"{v:.17g}" for v in data[i]]
            if meta_name is not None:
                row.append(f"{meta[i]:.17g}")
            fh.write(",".join(row) + "\n")


def load_csv(path) -> tuple[Array, Array | None, str | None]:
    """Inverse of save_csv. Raises ParseError with a 1-based line number."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    header = lines[0].split(",")
    n_dim = sum(1 for c in header if c.startswith("dim_"))
    if n_dim == 0 or header[:n_dim] != [f"dim_{i}" for i in range(n_dim)]:
        raise ParseError(f"{path}:1: bad header {lines[0]!r}")
    meta_name = header[n_dim] if len(header) == n_dim + 1 else None
    if len(header) > n_dim + 1:
        raise ParseError(f"{path}:1: too many columns in header")
    width = len(header)
    rows = np.empty((len(lines) - 1, width))
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != width:
            raise ParseError(f"{path}:{ln}: expected {width} fields, got {len(parts)}")
        try:
            rows[ln - 2] = [float(p) for p in parts]
        except ValueError as err:
            raise ParseError(f"{path}:{ln}: {err}") from err
    data = rows[:, :n_dim]
    meta = rows[:, n_dim] if meta_name is not None else None
    return data, meta, meta_name


def save_split(directory, split: LabeledSplit) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "test", "pool"):
        part = getattr(split, name)
        meta = getattr(split, f"{name}_meta")
        if meta is not None and len(meta) == 0 and len(part) == 0:
            meta = None
        save_csv(directory / f"{name}.csv", part,
                 meta, split.meta_name if meta is not None else None)


def load_split(directory) -> LabeledSplit:
    directory = Path(directory)
    parts = {}
    metas = {}
    meta_name = None
    for name in ("train", "test", "pool"):
        data, meta, mname = load_csv(directory / f"{name}.csv")
        parts[name] = data
        metas[name] = meta
        meta_name = meta_name or mname
    return LabeledSplit(parts["train"], parts["test"], parts["pool"],
                        metas["train"], metas["test"], metas["pool"], meta_name)


def save_pgm8(path, image: Array) -> None:
    """8-bit binary PGM of one image scaled from [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidArgumentError("save_pgm8 expects a 2-D image")
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(quantized.tobytes())
