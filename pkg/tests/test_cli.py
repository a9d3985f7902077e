"""End-to-end checks of the command-line front end.

Commands run in-process through main() with miniature configs, so the
whole file stays fast. Determinism contracts are checked by rerunning
into the same output directory and comparing bytes.
"""

import numpy as np
import pytest

from lgal.bundle import save_bundle
from lgal.cli import build_parser, main
from lgal.model import GenerativeModel, make_generative, make_recognition
from lgal.network import NetworkSpec, ParamSet, fc

TINY_TOY = """
experiment = toy
train_size = 120
test_size = 60
pool_size = 80
batch_size = 60
epochs = 3
num_centers = 6
hidden = 12
decoder_hidden = 12
grid_nx = 6
grid_ny = 6
geodesic_iterations = 15
geodesic_samples = 12
"""


@pytest.fixture
def toy_cfg(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TINY_TOY)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def _tree_bytes(root):
    """Map of relative path -> content bytes for a file or directory."""
    if root.is_file():
        return {root.name: root.read_bytes()}
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestParsing:
    def test_usage_error_exits_one(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["no-such-command"])
        assert err.value.code == 1
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["train", "--frobnicate"])
        assert err.value.code == 1

    def test_unknown_config_key_exits_one(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("experiment = toy\nepcohs = 5\n")
        assert _run("train", "--config", path) == 1
        assert "epcohs" in capsys.readouterr().err

    def test_missing_config_file_exits_one(self, tmp_path, capsys):
        assert _run("train", "--config", tmp_path / "absent.cfg") == 1
        assert "absent.cfg" in capsys.readouterr().err

    def test_missing_experiment_exits_one(self, tmp_path):
        assert _run("train", "--seed", 1, "--out", tmp_path) == 1

    def test_invalid_thread_cap_rejected(self, monkeypatch):
        monkeypatch.setenv("LGAL_THREADS", "zero")
        with pytest.raises(SystemExit):
            main(["train", "--experiment", "toy"])

    def test_thread_cap_applied(self, monkeypatch, tmp_path):
        monkeypatch.setenv("LGAL_THREADS", "1")
        monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
        _run("train", "--config", tmp_path / "absent.cfg")  # fails after capping
        import os
        assert os.environ["OMP_NUM_THREADS"] == "1"


class TestTrain:
    def test_bundle_and_trace_written(self, toy_cfg, tmp_path):
        out = tmp_path / "out"
        assert _run("train", "--config", toy_cfg, "--seed", 5, "--out", out) == 0
        bundle = out / "toy_seed5_model"
        assert (bundle / "manifest.json").exists()
        trace = (out / "toy_seed5_trace.csv").read_text().splitlines()
        assert trace[0] == "epoch,bound,wall_seconds"
        assert len(trace) == 1 + 3

    def test_rerun_overwrites_bit_identical_bundle(self, toy_cfg, tmp_path):
        out = tmp_path / "out"
        _run("train", "--config", toy_cfg, "--seed", 5, "--out", out)
        first = _tree_bytes(out / "toy_seed5_model")
        _run("train", "--config", toy_cfg, "--seed", 5, "--out", out)
        assert _tree_bytes(out / "toy_seed5_model") == first

    def test_seed_changes_bundle(self, toy_cfg, tmp_path):
        out = tmp_path / "out"
        _run("train", "--config", toy_cfg, "--seed", 5, "--out", out)
        _run("train", "--config", toy_cfg, "--seed", 6, "--out", out)
        a = _tree_bytes(out / "toy_seed5_model")
        b = _tree_bytes(out / "toy_seed6_model")
        assert a != {k: v for k, v in b.items()}


class TestMfMap:
    def test_outputs_and_rerun_identical(self, toy_cfg, tmp_path):
        out = tmp_path / "out"
        _run("train", "--config", toy_cfg, "--seed", 2, "--out", out)
        bundle = out / "toy_seed2_model"
        assert _run("mf-map", "--config", toy_cfg, "--seed", 2, "--out", out,
                    "--bundle", bundle) == 0
        names = ["toy_seed2_mf.csv", "toy_seed2_mf.pgm", "toy_seed2_latents.csv"]
        first = {n: (out / n).read_bytes() for n in names}
        header = first["toy_seed2_mf.csv"].decode().splitlines()
        assert "# resolution,6,6" in header[:3]
        assert _run("mf-map", "--config", toy_cfg, "--seed", 2, "--out", out,
                    "--bundle", bundle) == 0
        assert {n: (out / n).read_bytes() for n in names} == first

    def test_wrong_latent_dimension_exits_one(self, toy_cfg, tmp_path, capsys):
        rng = np.random.default_rng(0)
        rec = make_recognition(4, 3, hidden=8, depth=2, rng=rng)
        gen = make_generative(4, 3, hidden=8, n_centers=4, rng=rng)
        bundle = tmp_path / "m3"
        save_bundle(bundle, rec, gen)
        assert _run("mf-map", "--config", toy_cfg, "--out", tmp_path,
                    "--bundle", bundle) == 1
        assert "two-dimensional" in capsys.readouterr().err


def _flat_decoder_bundle(tmp_path):
    """Linear decoder with a floored precision head: constant metric."""
    rng = np.random.default_rng(3)
    rec = make_recognition(2, 2, hidden=8, depth=2, rng=rng)
    w = np.array([[1.0, 0.4], [-0.2, 0.8]])
    gen = GenerativeModel(
        mean_net=NetworkSpec(2, (fc(2, "linear"),)),
        mean_params=ParamSet(np.concatenate([w.ravel(), np.zeros(2)])),
        centers=np.array([[80.0, 80.0], [81.0, 80.0]]),
        bandwidths=np.array([5.0, 5.0]),
        weights=np.zeros((2, 2)),
    )
    path = tmp_path / "flat_model"
    save_bundle(path, rec, gen)
    return path


class TestGeodesic:
    def test_summary_and_straight_curve(self, toy_cfg, tmp_path):
        bundle = _flat_decoder_bundle(tmp_path)
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("# x0 then x1\n2,3,8,3\n2,3,4,5\n")
        out = tmp_path / "out"
        assert _run("geodesic", "--config", toy_cfg, "--seed", 4, "--out", out,
                    "--bundle", bundle, "--pairs", pairs) == 0
        summary = (out / "toy_seed4_geodesics.csv").read_text().splitlines()
        assert summary[0] == "pair,max_mf,threshold,status"
        assert len(summary) == 3
        assert all(line.split(",")[3] in ("smooth", "crossing") for line in summary[1:])

        rows = np.loadtxt(out / "toy_seed4_pair0_curve.csv",
                          delimiter=",", skiprows=1)
        z = rows[:, 1:3]
        chord = z[0] + rows[:, :1] * (z[-1] - z[0])
        assert np.abs(z - chord).max() < 1e-3

    def test_malformed_pairs_exit_one(self, toy_cfg, tmp_path, capsys):
        bundle = _flat_decoder_bundle(tmp_path)
        pairs = tmp_path / "pairs.csv"
        pairs.write_text("1,2,3\n")
        assert _run("geodesic", "--config", toy_cfg, "--out", tmp_path / "o",
                    "--bundle", bundle, "--pairs", pairs) == 1
        assert "expected 4 values" in capsys.readouterr().err


class TestActivePool:
    def test_runs_and_reruns_identically(self, tmp_path):
        cfg = tmp_path / "pool.cfg"
        cfg.write_text(TINY_TOY + "iterations = 2\nbatch_per_iteration = 4\nnum_runs = 2\n")
        out = tmp_path / "out"
        assert _run("active-pool", "--config", cfg, "--seed", 0, "--out", out) == 0
        files = sorted(p.name for p in out.iterdir())
        assert files == [
            "toy_max_entropy_seed0.csv", "toy_max_entropy_seed1.csv",
            "toy_mf_seed0.csv", "toy_mf_seed1.csv",
            "toy_random_seed0.csv", "toy_random_seed1.csv",
        ]
        first = _tree_bytes(out)
        assert _run("active-pool", "--config", cfg, "--seed", 0, "--out", out) == 0
        assert _tree_bytes(out) == first

    def test_initial_rows_match_across_strategies(self, tmp_path):
        cfg = tmp_path / "pool.cfg"
        cfg.write_text(TINY_TOY + "iterations = 1\nbatch_per_iteration = 4\nnum_runs = 1\n")
        out = tmp_path / "out"
        _run("active-pool", "--config", cfg, "--seed", 3, "--out", out)
        starts = {p.name: p.read_text().splitlines()[1].split(",")[4:6]
                  for p in out.iterdir()}
        assert len({tuple(v) for v in starts.values()}) == 1

    def test_single_strategy_flag(self, tmp_path):
        cfg = tmp_path / "pool.cfg"
        cfg.write_text(TINY_TOY + "iterations = 1\nbatch_per_iteration = 4\nnum_runs = 1\n")
        out = tmp_path / "out"
        assert _run("active-pool", "--config", cfg, "--seed", 0, "--out", out,
                    "--strategy", "max-entropy") == 0
        assert [p.name for p in out.iterdir()] == ["toy_max_entropy_seed0.csv"]

    def test_wrong_experiment_exits_one(self, tmp_path):
        cfg = tmp_path / "p.cfg"
        cfg.write_text("experiment = pendulum\n")
        assert _run("active-pool", "--config", cfg, "--out", tmp_path / "o") == 1


class TestActiveTraj:
    def test_trajectories_end_to_end(self, tmp_path):
        cfg = tmp_path / "traj.cfg"
        cfg.write_text(
            "experiment = trajectories\n"
            "samples_per_demo = 30\ndemos_per_target = 2\n"
            "epochs = 5\nbatch_size = 40\nnum_centers = 6\n"
            "hidden = 12\ndecoder_hidden = 12\ndecoder_depth = 3\n"
            "geodesic_iterations = 20\ngeodesic_samples = 12\n"
            "oracle_budget = 3\ndemo_samples = 30\n")
        out = tmp_path / "out"
        assert _run("active-traj", "--config", cfg, "--seed", 1, "--out", out) == 0
        stem = "trajectories_seed1"
        for name in (f"{stem}_pre_model/manifest.json",
                     f"{stem}_post_model/manifest.json",
                     f"{stem}_pre_geodesics.csv",
                     f"{stem}_post_geodesics.csv",
                     f"{stem}_decisions.csv"):
            assert (out / name).exists(), name
        decisions = (out / f"{stem}_decisions.csv").read_text().splitlines()
        assert decisions[0] == "pair,phase,max_mf,threshold,queried,served,n_added"
        pairs_seen = {line.split(",")[0] for line in decisions[1:]}
        assert pairs_seen == {"0", "1", "2"}
        for summary in (f"{stem}_pre_geodesics.csv", f"{stem}_post_geodesics.csv"):
            assert len((out / summary).read_text().splitlines()) == 4

    def test_toy_rejected(self, toy_cfg, tmp_path):
        assert _run("active-traj", "--config", toy_cfg, "--out", tmp_path / "o") == 1


class TestEval:
    def test_metrics_csv(self, toy_cfg, tmp_path):
        out = tmp_path / "out"
        _run("train", "--config", toy_cfg, "--seed", 2, "--out", out)
        assert _run("eval", "--config", toy_cfg, "--seed", 2, "--out", out,
                    "--bundle", out / "toy_seed2_model") == 0
        lines = (out / "toy_seed2_eval.csv").read_text().splitlines()
        assert lines[0] == "metric,value"
        names = [line.split(",")[0] for line in lines[1:]]
        assert names == ["train_bound", "test_bound",
                         "test_reconstruction_error", "threshold", "alpha"]
        first = (out / "toy_seed2_eval.csv").read_bytes()
        _run("eval", "--config", toy_cfg, "--seed", 2, "--out", out,
             "--bundle", out / "toy_seed2_model")
        assert (out / "toy_seed2_eval.csv").read_bytes() == first
