"""Training loop contracts: tracing, determinism, refresh, validation."""

import numpy as np
import pytest

from lgal.datasets import ToyConfig, gen_toy
from lgal.errors import InvalidArgumentError, NumericalError, TrainingDivergedError
from lgal.model import make_generative, make_recognition
from lgal.training import TrainConfig, trace_to_csv, train


def _fresh(model_seed=0, train_size=90):
    data = gen_toy(ToyConfig(train_size=train_size, test_size=10, pool_size=10),
                   np.random.default_rng(11)).train
    rng = np.random.default_rng(model_seed)
    rec = make_recognition(2, 2, hidden=16, rng=rng)
    gen = make_generative(2, 2, hidden=16, n_centers=4,
                          data_variance=data.var(axis=0), rng=rng)
    return rec, gen, data


def _cfg(**kw):
    base = dict(batch_size=30, epochs=3, num_centers=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_trace_has_one_row_per_epoch_with_increasing_wall():
    rec, gen, data = _fresh()
    _, _, trace = train(rec, gen, data, _cfg(epochs=4))
    assert [r.epoch for r in trace] == [0, 1, 2, 3]
    walls = [r.wall_seconds for r in trace]
    assert walls == sorted(walls)
    assert all(np.isfinite(r.bound) for r in trace)


def test_bound_improves_on_toy_data():
    rec, gen, data = _fresh()
    _, _, trace = train(rec, gen, data, _cfg(epochs=25, learning_rate=2e-3))
    assert trace[-1].bound > trace[0].bound


def test_same_seed_reproduces_parameters_exactly():
    rec, gen, data = _fresh()
    rec_a, gen_a, _ = train(rec, gen, data, _cfg())
    rec_b, gen_b, _ = train(rec, gen, data, _cfg())
    assert np.array_equal(rec_a.trunk_params.values, rec_b.trunk_params.values)
    assert np.array_equal(gen_a.mean_params.values, gen_b.mean_params.values)
    assert np.array_equal(gen_a.weights, gen_b.weights)
    assert np.array_equal(gen_a.centers, gen_b.centers)


def test_seed_changes_parameters():
    rec, gen, data = _fresh()
    _, gen_a, _ = train(rec, gen, data, _cfg(seed=0))
    _, gen_b, _ = train(rec, gen, data, _cfg(seed=1))
    assert not np.array_equal(gen_a.mean_params.values, gen_b.mean_params.values)


def test_input_models_left_untouched():
    rec, gen, data = _fresh()
    trunk_before = rec.trunk_params.values.copy()
    weights_before = gen.weights.copy()
    centers_before = gen.centers.copy()
    train(rec, gen, data, _cfg())
    assert np.array_equal(rec.trunk_params.values, trunk_before)
    assert np.array_equal(gen.weights, weights_before)
    assert np.array_equal(gen.centers, centers_before)


def test_centers_leave_placeholder_circle():
    rec, gen, data = _fresh()
    _, gen_after, _ = train(rec, gen, data, _cfg(epochs=1))
    assert not np.array_equal(gen_after.centers, gen.centers)
    # refreshed centers live among the encoded latents, not on the unit circle
    assert not np.allclose(np.linalg.norm(gen_after.centers, axis=1), 1.0)


def test_precision_weights_stay_nonnegative():
    rec, gen, data = _fresh()
    _, gen_after, _ = train(rec, gen, data, _cfg(epochs=5))
    assert gen_after.weights.min() >= 0.0


def test_rejects_width_mismatch_and_short_data():
    rec, gen, data = _fresh()
    with pytest.raises(InvalidArgumentError, match="width"):
        train(rec, gen, data[:, :1], _cfg())
    with pytest.raises(InvalidArgumentError, match="batch"):
        train(rec, gen, data[:10], _cfg(batch_size=30))


def test_divergence_raises_package_error():
    rec, gen, data = _fresh()
    old = np.seterr(all="ignore")
    try:
        with pytest.raises((NumericalError, TrainingDivergedError)):
            train(rec, gen, data, _cfg(learning_rate=1e5, epochs=10))
    finally:
        np.seterr(**old)


def test_config_validation():
    for bad in (dict(learning_rate=0.0), dict(batch_size=0), dict(epochs=0),
                dict(num_importance_samples=0), dict(center_refresh_period=0),
                dict(num_centers=1)):
        with pytest.raises(InvalidArgumentError):
            _cfg(**bad)


def test_trace_csv_round_trip(tmp_path):
    rec, gen, data = _fresh()
    _, _, trace = train(rec, gen, data, _cfg(epochs=2))
    path = tmp_path / "trace.csv"
    trace_to_csv(path, trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,bound,wall_seconds"
    assert len(lines) == 3
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.allclose(rows[:, 1], [r.bound for r in trace])
