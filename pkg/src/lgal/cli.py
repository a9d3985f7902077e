"""Batch command-line front end.

Subcommands cover the whole desk-scale pipeline: `train` fits a model
and writes a bundle plus a loss trace, `mf-map` rasterizes the
magnification factor over latent space, `geodesic` solves curves between
observation pairs and reports which cross the threshold, `active-pool`
and `active-traj` run the two acquisition loops, and `eval` summarizes a
bundle against its experiment's data.

Every command is deterministic given (config, seed); reruns overwrite
their outputs with identical bytes, except for the wall-clock column of
the training trace. Exit codes: 0 success (including geodesic runs where
some pairs failed but were flagged), 1 for usage or configuration
problems, 2 for numerical failures.

The environment variable LGAL_THREADS caps BLAS threading; it is applied
here before numpy is loaded, which is why all numerical imports in this
module are deferred into the handlers.
"""

import argparse
import os
import sys
from dataclasses import replace


def _cap_threads() -> None:
    value = os.environ.get("LGAL_THREADS")
    if not value:
        return
    if not value.isdigit() or int(value) < 1:
        raise SystemExit(f"error: LGAL_THREADS must be a positive integer, got {value!r}")
    for name in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[name] = value


# entropy namespaces for seed derivation; 1..4 are used by the loops in
# active.py, these continue the numbering
_DATA_STREAM = 5
_INIT_STREAM = 6
_ORACLE_STREAM = 7
_CLI_GEODESIC_STREAM = 8
_EVAL_STREAM = 9


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this package uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lgal", description=__doc__.split("\n\n")[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--seed", type=int, metavar="U64", help="base seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--experiment", choices=("toy", "pendulum", "trajectories"))

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="fit a model, write bundle + loss trace")

    p = sub.add_parser("mf-map", parents=[common],
                       help="rasterize the magnification factor over latent space")
    p.add_argument("--bundle", metavar="DIR", required=True)

    p = sub.add_parser("geodesic", parents=[common],
                       help="solve geodesics between observation pairs")
    p.add_argument("--bundle", metavar="DIR", required=True)
    p.add_argument("--pairs", metavar="PATH", required=True,
                   help="CSV of observation pairs, one row per pair (x0 then x1)")

    p = sub.add_parser("active-pool", parents=[common],
                       help="pool-based acquisition comparison (toy data)")
    p.add_argument("--strategy", choices=("mf", "max-entropy", "random", "all"))

    sub.add_parser("active-traj", parents=[common],
                   help="trajectory query loop with a scripted oracle")

    p = sub.add_parser("eval", parents=[common],
                       help="summarize a bundle against its experiment's data")
    p.add_argument("--bundle", metavar="DIR", required=True)
    return parser


def _load_run_config(args):
    from .config import make_run_config, parse_config_file

    file_values = parse_config_file(args.config) if args.config else {}
    flags = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.out is not None:
        flags["out_dir"] = args.out
    if getattr(args, "strategy", None) is not None:
        flags["strategy"] = args.strategy
    return make_run_config(args.experiment, file_values, flags)


# ---------------------------------------------------------------------------
# datasets and models, regenerated deterministically from the config


def _rng(stream: int, *parts: int):
    import numpy as np

    from .active import derived_seed

    return np.random.default_rng(derived_seed(stream, *parts))


def _make_dataset(cfg, seed: int):
    from .datasets import (PendulumConfig, ToyConfig, TrajectoryConfig,
                           gen_joint_trajectories, gen_pendulum_dataset, gen_toy)

    rng = _rng(_DATA_STREAM, seed)
    if cfg.experiment == "toy":
        return gen_toy(ToyConfig(train_size=cfg.train_size, test_size=cfg.test_size,
                                 pool_size=cfg.pool_size), rng)
    if cfg.experiment == "pendulum":
        return gen_pendulum_dataset(PendulumConfig(total=cfg.pendulum_total), rng)
    return gen_joint_trajectories(
        TrajectoryConfig(demos_per_target=cfg.demos_per_target,
                         samples_per_demo=cfg.samples_per_demo), rng)


def _make_models(cfg, train_data, seed: int):
    from .model import make_generative, make_recognition

    rng = _rng(_INIT_STREAM, seed)
    n_x = train_data.shape[1]
    rec = make_recognition(n_x, cfg.latent_dim, hidden=cfg.hidden,
                           depth=cfg.trunk_depth, rng=rng)
    gen = make_generative(n_x, cfg.latent_dim, hidden=cfg.decoder_hidden,
                          depth=cfg.decoder_depth, out_activation=cfg.decoder_out,
                          arch=cfg.decoder_arch, n_centers=cfg.num_centers,
                          data_variance=train_data.var(axis=0), rng=rng)
    return rec, gen


def _calibrated(rec, gen, train_data):
    from .errors import CalibrationFailedError
    from .model import calibrate_alpha

    z_mean, _ = rec.encode(train_data)
    try:
        return gen.with_alpha(calibrate_alpha(gen, z_mean))
    except CalibrationFailedError:
        return gen


def _train_fresh(cfg, train_data, seed: int):
    from .training import train

    rec0, gen0 = _make_models(cfg, train_data, seed)
    tc = replace(cfg.train_config(), seed=seed)
    rec, gen, trace = train(rec0, gen0, train_data, tc)
    return rec, _calibrated(rec, gen, train_data), trace


def _run_info(cfg, seed: int) -> dict:
    return {
        "experiment": cfg.experiment,
        "seed": seed,
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "num_importance_samples": cfg.num_importance_samples,
    }


def _out_dir(cfg):
    from pathlib import Path

    path = Path(cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg) -> int:
    from .bundle import save_bundle
    from .training import trace_to_csv

    split = _make_dataset(cfg, cfg.seed)
    rec, gen, trace = _train_fresh(cfg, split.train, cfg.seed)
    out = _out_dir(cfg)
    stem = f"{cfg.experiment}_seed{cfg.seed}"
    info = _run_info(cfg, cfg.seed)
    info["train_rows"] = int(split.train.shape[0])
    save_bundle(out / f"{stem}_model", rec, gen, run_info=info)
    trace_to_csv(out / f"{stem}_trace.csv", trace)
    print(f"trained {cfg.experiment} on {split.train.shape[0]} rows, "
          f"final bound {trace[-1].bound:.4f}, alpha {gen.alpha:.6g}")
    print(f"bundle: {out / (stem + '_model')}")
    return 0


def cmd_mf_map(cfg, bundle_dir) -> int:
    from .bundle import load_bundle
    from .datasets import save_csv
    from .errors import InvalidArgumentError
    from .geometry import field_to_csv, field_to_pgm16, grid_for_points, mf_map

    rec, gen = load_bundle(bundle_dir)
    if gen.n_z != 2:
        raise InvalidArgumentError(
            f"mf-map needs a two-dimensional latent space, bundle has {gen.n_z}")
    split = _make_dataset(cfg, cfg.seed)
    means, _ = rec.encode(split.train)
    grid = grid_for_points(means, margin=cfg.grid_margin, nx=cfg.grid_nx, ny=cfg.grid_ny)
    field = mf_map(gen, grid)

    out = _out_dir(cfg)
    stem = f"{cfg.experiment}_seed{cfg.seed}"
    field_to_csv(out / f"{stem}_mf.csv", field)
    field_to_pgm16(out / f"{stem}_mf.pgm", field)
    save_csv(out / f"{stem}_latents.csv", means,
             meta=split.train_meta, meta_name=split.meta_name)
    print(f"{cfg.grid_nx}x{cfg.grid_ny} map over "
          f"[{grid.x_range[0]:.3f},{grid.x_range[1]:.3f}]"
          f"x[{grid.y_range[0]:.3f},{grid.y_range[1]:.3f}], "
          f"mf range [{field.values.min():.4g}, {field.values.max():.4g}]")
    return 0


def _read_pairs(path, n_x: int):
    import numpy as np

    from .errors import ParseError

    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                row = np.array([float(p) for p in text.split(",")])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric entry") from exc
            if row.size != 2 * n_x:
                raise ParseError(
                    f"{path}:{lineno}: expected {2 * n_x} values "
                    f"(two {n_x}-dimensional points), got {row.size}")
            pairs.append((row[:n_x], row[n_x:]))
    if not pairs:
        raise ParseError(f"{path}: no pairs found")
    return pairs


def _geodesic_summary(rec, gen, pairs, tau, geo_config, seed, out, stem,
                      *, phase=0, write_curves=True):
    """Solve each pair's geodesic, write curve CSVs, return summary lines.

    A failed solve is recorded with an empty max-MF cell and keeps the
    run going; the caller still exits 0 because flagged partial results
    are valid output.
    """
    import numpy as np

    from .active import derived_seed
    from .errors import GeodesicFailedError
    from .geometry import curve_to_csv, geodesic, mf_along_curve

    lines = ["pair,max_mf,threshold,status"]
    for i, (x0, x1) in enumerate(pairs):
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        z0, _ = rec.encode(x0[None, :])
        z1, _ = rec.encode(x1[None, :])
        gc = replace(geo_config,
                     seed=derived_seed(_CLI_GEODESIC_STREAM, seed, phase, i))
        try:
            curve = geodesic(gen, z0[0], z1[0], gc)
        except GeodesicFailedError as exc:
            print(f"pair {i}: geodesic failed ({exc})", file=sys.stderr)
            lines.append(f"{i},,{tau:.17g},failed")
            continue
        mf = mf_along_curve(gen, curve)
        if write_curves:
            curve_to_csv(out / f"{stem}_pair{i}_curve.csv", curve, mf)
        status = "smooth" if mf.max() <= tau else "crossing"
        lines.append(f"{i},{mf.max():.17g},{tau:.17g},{status}")
    return lines


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_geodesic(cfg, bundle_dir, pairs_path) -> int:
    from .active import omega_values, threshold
    from .bundle import load_bundle

    rec, gen = load_bundle(bundle_dir)
    pairs = _read_pairs(pairs_path, rec.n_x)
    split = _make_dataset(cfg, cfg.seed)
    tau = threshold(omega_values(rec, gen, split.train))

    out = _out_dir(cfg)
    stem = f"{cfg.experiment}_seed{cfg.seed}"
    lines = _geodesic_summary(rec, gen, pairs, tau, cfg.geodesic_config(),
                              cfg.seed, out, stem)
    _write_lines(out / f"{stem}_geodesics.csv", lines)
    for line in lines[1:]:
        print(line.replace(",", "  "))
    return 0


def cmd_active_pool(cfg) -> int:
    from .active import pool_loop, records_to_csv, run_filename
    from .errors import InvalidArgumentError

    if cfg.experiment != "toy":
        raise InvalidArgumentError("active-pool runs on the toy experiment only")
    out = _out_dir(cfg)
    for run in range(cfg.num_runs):
        seed = cfg.seed + run
        split = _make_dataset(cfg, seed)
        rec, gen, _ = _train_fresh(cfg, split.train, seed)
        tc = replace(cfg.train_config(), seed=seed)
        for strategy in cfg.strategies():
            result = pool_loop(rec, gen, split.train, split.pool, split.test,
                               strategy, cfg.iterations, cfg.batch_per_iteration,
                               tc, retry_margin=cfg.retry_margin)
            path = out / run_filename(cfg.experiment, strategy, seed)
            records_to_csv(path, result)
            final = result.records[-1].test_error
            print(f"seed {seed} {strategy:11s}: "
                  f"error {result.initial_test_error:.4f} -> {final:.4f}")
    return 0


def _trajectory_pairs(cfg):
    """Observation-space endpoint pairs for the trajectory loop."""
    import numpy as np

    from .datasets import TrajectoryConfig, render_pendulum

    if cfg.experiment == "pendulum":
        images = [render_pendulum(a).ravel() for a in cfg.pair_angles]
        n = len(images)
        return [(images[i], images[(i + 1) % n]) for i in range(n)]
    tc = TrajectoryConfig()
    start = np.array(tc.start)
    t0, t1 = (np.array(t) for t in tc.targets)
    return [(start, t0), (start, t1), (t0, t1)]


def _make_oracle(cfg, split):
    from .active import PendulumOracle, TrajectoryOracle

    if cfg.experiment == "pendulum":
        return PendulumOracle.build(
            cfg.reservoir_size, cfg.oracle_budget, split.train, split.train_meta,
            _rng(_ORACLE_STREAM, cfg.seed))
    return TrajectoryOracle(samples=cfg.demo_samples, budget=cfg.oracle_budget)


def cmd_active_traj(cfg) -> int:
    from .active import (decisions_to_csv, omega_values, threshold,
                         trajectory_query_loop)
    from .bundle import save_bundle
    from .errors import InvalidArgumentError

    if cfg.experiment == "toy":
        raise InvalidArgumentError(
            "active-traj runs on the pendulum or trajectories experiment")
    split = _make_dataset(cfg, cfg.seed)
    rec, gen, _ = _train_fresh(cfg, split.train, cfg.seed)
    pairs = _trajectory_pairs(cfg)
    oracle = _make_oracle(cfg, split)

    out = _out_dir(cfg)
    stem = f"{cfg.experiment}_seed{cfg.seed}"
    geo = cfg.geodesic_config()
    info = _run_info(cfg, cfg.seed)
    info["train_rows"] = int(split.train.shape[0])

    save_bundle(out / f"{stem}_pre_model", rec, gen, run_info=info)
    tau = threshold(omega_values(rec, gen, split.train))
    pre = _geodesic_summary(rec, gen, pairs, tau, geo, cfg.seed, out,
                            f"{stem}_pre")
    _write_lines(out / f"{stem}_pre_geodesics.csv", pre)

    tc = cfg.train_config()
    result = trajectory_query_loop(rec, gen, pairs, oracle, split.train, tc,
                                   geo_config=geo, retry_margin=cfg.retry_margin)
    decisions_to_csv(out / f"{stem}_decisions.csv", result.decisions)
    save_bundle(out / f"{stem}_post_model", result.rec, result.gen, run_info=info)

    tau = threshold(omega_values(result.rec, result.gen, result.train_data))
    post = _geodesic_summary(result.rec, result.gen, pairs, tau, geo,
                             cfg.seed, out, f"{stem}_post", phase=1)
    _write_lines(out / f"{stem}_post_geodesics.csv", post)

    queried = sum(1 for d in result.decisions if d.queried)
    print(f"{len(pairs)} pairs, {queried} queried, "
          f"{result.queries_served} demonstrations served")
    for before, after in zip(pre[1:], post[1:]):
        print(f"before: {before.replace(',', '  ')}   after: {after.replace(',', '  ')}")
    return 0


def cmd_eval(cfg, bundle_dir) -> int:
    from .active import (derived_seed, omega_values, reconstruction_error,
                         threshold)
    from .bundle import load_bundle
    from .model import iwae_bound

    import numpy as np

    rec, gen = load_bundle(bundle_dir)
    split = _make_dataset(cfg, cfg.seed)
    test = split.test if split.test.size else split.train
    rng = np.random.default_rng(derived_seed(_EVAL_STREAM, cfg.seed))
    metrics = [
        ("train_bound", iwae_bound(rec, gen, split.train,
                                   cfg.num_importance_samples, rng)),
        ("test_bound", iwae_bound(rec, gen, test,
                                  cfg.num_importance_samples, rng)),
        ("test_reconstruction_error", reconstruction_error(rec, gen, test)),
        ("threshold", threshold(omega_values(rec, gen, split.train))),
        ("alpha", gen.alpha),
    ]
    out = _out_dir(cfg)
    lines = ["metric,value"]
    for name, value in metrics:
        lines.append(f"{name},{value:.17g}")
        print(f"{name:27s} {value:.6g}")
    _write_lines(out / f"{cfg.experiment}_seed{cfg.seed}_eval.csv", lines)
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    _cap_threads()
    args = build_parser().parse_args(argv)

    from .errors import (BudgetExhaustedError, CalibrationFailedError,
                         GeodesicFailedError, InvalidArgumentError,
                         NumericalError, ParseError, TrainingDivergedError)

    try:
        cfg = _load_run_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "mf-map":
            return cmd_mf_map(cfg, args.bundle)
        if args.command == "geodesic":
            return cmd_geodesic(cfg, args.bundle, args.pairs)
        if args.command == "active-pool":
            return cmd_active_pool(cfg)
        if args.command == "active-traj":
            return cmd_active_traj(cfg)
        return cmd_eval(cfg, args.bundle)
    except (ParseError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, TrainingDivergedError, CalibrationFailedError,
            GeodesicFailedError, BudgetExhaustedError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
