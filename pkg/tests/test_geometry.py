"""Metric, magnification factor, curves, geodesics, grid oracle, exports.

The strongest oracles here are models whose metric is known in closed
form: a linear decoder with floored (constant) variance has G = W'W
everywhere, so geodesics must be straight lines and lengths are exact.
"""

import numpy as np
import pytest

from lgal import geometry, tape
from lgal.errors import InvalidArgumentError
from lgal.geometry import (
    DiscretizedCurve,
    GeodesicConfig,
    GridConfig,
    MFField,
    curve_length,
    curve_to_csv,
    field_from_csv,
    field_to_csv,
    field_to_pgm16,
    geodesic,
    grid_for_points,
    grid_geodesic_oracle,
    magnification_factor,
    metric_batch,
    metric_tensor,
    mf_along_curve,
    mf_map,
)
from lgal.model import GenerativeModel, make_generative
from lgal.network import NetworkSpec, ParamSet, fc


def linear_model(w: np.ndarray, n_z: int = 2) -> GenerativeModel:
    """Decoder mean = W z with constant (floored) variance, so G = W'W."""
    n_x = w.shape[0]
    spec = NetworkSpec(n_z, (fc(n_x, "linear"),))
    params = ParamSet(np.concatenate([w.ravel(), np.zeros(n_x)]))
    return GenerativeModel(
        mean_net=spec,
        mean_params=params,
        centers=np.array([[100.0] * n_z, [101.0] + [100.0] * (n_z - 1)]),
        bandwidths=np.array([5.0, 5.0]),
        weights=np.zeros((n_x, 2)),
    )


def random_model(seed=0, n_x=3, n_z=2):
    rng = np.random.default_rng(seed)
    return make_generative(n_x, n_z, hidden=16, depth=2, n_centers=5, rng=rng), rng


class TestMetricTensor:
    def test_linear_decoder_gives_w_transpose_w(self):
        w = np.array([[2.0, 0.5], [0.0, 1.5], [1.0, -1.0]])
        gen = linear_model(w)
        mt = metric_tensor(gen, np.array([0.3, -0.7]))
        np.testing.assert_allclose(mt.matrix, w.T @ w, rtol=1e-12)
        np.testing.assert_allclose(mt.mean_jacobian, w, rtol=1e-12)
        np.testing.assert_allclose(mt.sigma_jacobian, 0.0, atol=0)

    def test_symmetric_and_psd_on_random_models(self):
        gen, rng = random_model(1)
        for _ in range(20):
            z = rng.normal(size=2) * 2
            mt = metric_tensor(gen, z)
            np.testing.assert_allclose(mt.matrix, mt.matrix.T, atol=1e-12)
            assert np.linalg.eigvalsh(mt.matrix).min() > -1e-10

    def test_matches_finite_difference_jacobians(self):
        gen, rng = random_model(2)
        h = 1e-6
        for _ in range(5):
            z = rng.normal(size=2)
            if gen.precision(z).min() < 10 * gen.precision_floor:
                continue
            jm = np.zeros((gen.n_x, 2))
            js = np.zeros((gen.n_x, 2))
            for j in range(2):
                e = np.zeros(2)
                e[j] = h
                mp, vp = gen.decode(z + e)
                mm, vm = gen.decode(z - e)
                jm[:, j] = (mp - mm) / (2 * h)
                js[:, j] = (np.sqrt(vp) - np.sqrt(vm)) / (2 * h)
            want = jm.T @ jm + js.T @ js
            got = metric_tensor(gen, z).matrix
            assert np.abs(got - want).max() < 1e-3

    def test_batch_matches_single(self):
        gen, rng = random_model(3)
        z = rng.normal(size=(7, 2))
        gb = metric_batch(gen, z)
        for i in range(7):
            np.testing.assert_allclose(gb[i], metric_tensor(gen, z[i]).matrix, rtol=1e-12)


class TestMagnificationFactor:
    def test_diagonal_decoder_closed_form(self):
        # mean = diag(2, 3) zero-padded to five outputs: MF = 2 * 3 = 6
        w = np.zeros((5, 2))
        w[0, 0] = 2.0
        w[1, 1] = 3.0
        gen = linear_model(w)
        assert magnification_factor(gen, np.zeros(2)) == pytest.approx(6.0, abs=1e-9)

    def test_identity_decoder_is_one(self):
        gen = linear_model(np.eye(2))
        assert magnification_factor(gen, np.array([0.2, 0.4])) == pytest.approx(1.0, abs=1e-12)

    def test_batch_equals_singles(self):
        gen, rng = random_model(4)
        z = rng.normal(size=(6, 2))
        batch = magnification_factor(gen, z)
        for i in range(6):
            assert batch[i] == pytest.approx(magnification_factor(gen, z[i]), rel=1e-12)

    def test_never_negative_or_nan(self):
        gen, rng = random_model(5)
        z = rng.normal(size=(50, 2)) * 5
        mf = magnification_factor(gen, z)
        assert np.all(np.isfinite(mf)) and np.all(mf >= 0)


class TestCurveLength:
    def test_straight_line_under_constant_metric(self):
        w = np.array([[2.0, 0.0], [0.0, 0.5], [1.0, 1.0]])
        gen = linear_model(w)
        z0, z1 = np.array([-1.0, 0.5]), np.array([2.0, -0.5])
        curve = DiscretizedCurve(np.linspace(z0, z1, 33))
        d = z1 - z0
        want = np.sqrt(d @ (w.T @ w) @ d)
        assert curve_length(gen, curve) == pytest.approx(want, rel=1e-12)

    def test_refinement_converges(self):
        gen, _ = random_model(6)
        z0, z1 = np.array([-1.5, 0.0]), np.array([1.5, 0.3])
        lengths = [
            curve_length(gen, DiscretizedCurve(np.linspace(z0, z1, t)))
            for t in (8, 32, 128, 512)
        ]
        assert abs(lengths[-1] - lengths[-2]) < abs(lengths[1] - lengths[0]) + 1e-9

    def test_additive_over_concatenation(self):
        gen, rng = random_model(7)
        pts = rng.normal(size=(9, 2))
        whole = curve_length(gen, DiscretizedCurve(pts))
        first = curve_length(gen, DiscretizedCurve(pts[:5]))
        second = curve_length(gen, DiscretizedCurve(pts[4:]))
        assert whole == pytest.approx(first + second, rel=1e-12)


class TestGeodesic:
    def test_constant_metric_stays_straight(self):
        gen = linear_model(np.array([[1.5, 0.2], [0.1, 2.0]]))
        z0, z1 = np.array([-1.0, -1.0]), np.array([1.0, 2.0])
        curve = geodesic(gen, z0, z1, GeodesicConfig(samples=32, iterations=120, seed=3))
        chord = np.linspace(z0, z1, 32)
        assert np.abs(curve.points - chord).max() < 1e-3

    def test_endpoints_exact_and_sample_count(self):
        gen, _ = random_model(8)
        z0, z1 = np.array([-2.0, 0.1]), np.array([2.0, -0.2])
        curve = geodesic(gen, z0, z1, GeodesicConfig(samples=48, iterations=60, seed=1))
        assert curve.points.shape == (48, 2)
        assert np.array_equal(curve.points[0], z0)
        assert np.array_equal(curve.points[-1], z1)

    def test_never_longer_than_the_chord(self):
        for seed in range(4):
            gen, rng = random_model(20 + seed)
            z0, z1 = rng.normal(size=2) * 2, rng.normal(size=2) * 2
            curve = geodesic(gen, z0, z1, GeodesicConfig(samples=32, iterations=80, seed=seed))
            chord = curve_length(gen, DiscretizedCurve(np.linspace(z0, z1, 32)))
            assert curve_length(gen, curve) <= chord + 1e-9

    def test_identical_endpoints_rejected(self):
        gen, _ = random_model(9)
        with pytest.raises(InvalidArgumentError):
            geodesic(gen, np.ones(2), np.ones(2))

    def test_energy_gradients_match_finite_differences(self):
        # the solver's exact gradients against finite differences of the
        # same discrete energy, evaluated through plain forwards
        from lgal.network import forward, init_params, mlp_spec, tape_layer_params

        gen, rng = random_model(10)
        z0, z1 = np.array([-1.0, 0.3]), np.array([1.2, -0.4])
        samples = 12
        spec = mlp_spec(1, (6,), 2, "tanh", "linear")
        params = init_params(spec, rng)
        ts = np.linspace(0.0, 1.0, samples)
        affine = np.outer(1.0 - ts, z0) + np.outer(ts, z1)
        window = (ts * (1.0 - ts))[:, None]

        def energy_np(flat):
            eta = forward(spec, ParamSet(flat), ts[:, None])
            pts = affine + window * eta
            deltas = pts[1:] - pts[:-1]
            mids = 0.5 * (pts[1:] + pts[:-1])
            g = metric_batch(gen, mids)
            return float(
                (samples - 1) * np.einsum("si,sij,sj->", deltas, g, deltas)
            )

        leaves = tape_layer_params(spec, params)
        energy, _ = geometry._curve_energy_graph(gen, affine, window, spec, leaves, ts)
        assert energy.data == pytest.approx(energy_np(params.values), rel=1e-10)
        tape.backward(energy)
        from lgal.network import collect_param_grads

        got = collect_param_grads(spec, leaves)
        h = 1e-6
        want = np.zeros_like(got)
        for i in range(got.size):
            up, down = params.values.copy(), params.values.copy()
            up[i] += h
            down[i] -= h
            want[i] = (energy_np(up) - energy_np(down)) / (2 * h)
        denom = np.maximum(np.abs(want), 1.0)
        assert np.max(np.abs(got - want) / denom) < 1e-5


class TestGridOracle:
    def test_euclidean_metric_within_quantization_bound(self):
        gen = linear_model(np.eye(2))
        grid = GridConfig((-2.0, 2.0), (-2.0, 2.0), 41, 41)
        rng = np.random.default_rng(11)
        for _ in range(5):
            z0, z1 = rng.uniform(-1.8, 1.8, size=2), rng.uniform(-1.8, 1.8, size=2)
            if np.allclose(z0, z1):
                continue
            path = grid_geodesic_oracle(gen, z0, z1, grid)
            straight = float(np.linalg.norm(z1 - z0))
            length = curve_length(gen, path)
            assert straight - 1e-9 <= length <= 1.0824 * straight + 0.3

    def test_path_steps_are_grid_neighbors(self):
        gen, _ = random_model(12)
        grid = GridConfig((-2.0, 2.0), (-2.0, 2.0), 21, 21)
        path = grid_geodesic_oracle(gen, np.array([-1.5, -1.5]), np.array([1.5, 1.2]), grid)
        dx = grid.xs[1] - grid.xs[0]
        dy = grid.ys[1] - grid.ys[0]
        inner = path.points[1:-1]
        steps = np.abs(np.diff(inner, axis=0))
        assert np.all(steps[:, 0] <= dx + 1e-9)
        assert np.all(steps[:, 1] <= dy + 1e-9)

    def test_exact_endpoints_spliced_on(self):
        gen, _ = random_model(13)
        grid = GridConfig((-2.0, 2.0), (-2.0, 2.0), 15, 15)
        z0, z1 = np.array([-1.03, 0.21]), np.array([0.77, -0.89])
        path = grid_geodesic_oracle(gen, z0, z1, grid)
        assert np.array_equal(path.points[0], z0)
        assert np.array_equal(path.points[-1], z1)

    def test_endpoint_outside_grid_rejected(self):
        gen, _ = random_model(14)
        grid = GridConfig((-1.0, 1.0), (-1.0, 1.0), 11, 11)
        with pytest.raises(InvalidArgumentError):
            grid_geodesic_oracle(gen, np.array([0.0, 0.0]), np.array([3.0, 0.0]), grid)


class TestMfMap:
    def test_values_laid_out_row_major(self):
        gen, _ = random_model(15)
        grid = GridConfig((-1.0, 1.0), (-0.5, 0.5), 5, 3)
        field = mf_map(gen, grid)
        assert field.values.shape == (3, 5)
        for iy in (0, 2):
            for ix in (0, 4):
                z = np.array([grid.xs[ix], grid.ys[iy]])
                assert field.values[iy, ix] == pytest.approx(
                    magnification_factor(gen, z), rel=1e-12
                )

    def test_grid_for_points_covers_cloud(self):
        rng = np.random.default_rng(16)
        pts = rng.normal(size=(40, 2))
        grid = grid_for_points(pts, margin=0.1)
        assert grid.x_range[0] < pts[:, 0].min() and grid.x_range[1] > pts[:, 0].max()
        assert grid.y_range[0] < pts[:, 1].min() and grid.y_range[1] > pts[:, 1].max()


class TestExports:
    def test_field_csv_round_trip(self, tmp_path):
        gen, _ = random_model(17)
        field = mf_map(gen, GridConfig((-1.0, 2.0), (0.0, 1.0), 7, 4))
        path = tmp_path / "field.csv"
        field_to_csv(path, field)
        back = field_from_csv(path)
        assert np.array_equal(back.values, field.values)
        assert back.grid.x_range == field.grid.x_range
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# x_range,")
        assert lines[2] == "# resolution,7,4"
        assert len(lines) == 3 + 4

    def test_curve_csv_layout(self, tmp_path):
        curve = DiscretizedCurve(np.array([[0.0, 1.0], [0.5, 1.5], [1.0, 2.0]]))
        path = tmp_path / "curve.csv"
        curve_to_csv(path, curve, mf=np.array([3.0, 4.0, 5.0]))
        lines = path.read_text().splitlines()
        assert lines[0] == "t,z_0,z_1,mf"
        assert lines[1] == "0,0,1,3"
        assert lines[2] == "0.5,0.5,1.5,4"

    def test_pgm16_format_and_sidecar(self, tmp_path):
        values = np.array([[0.0, 1.0], [2.0, 4.0]])
        field = MFField(values=values, grid=GridConfig((0.0, 1.0), (0.0, 1.0), 2, 2))
        path = tmp_path / "field.pgm"
        field_to_pgm16(path, field)
        blob = path.read_bytes()
        header = b"P5\n2 2\n65535\n"
        assert blob.startswith(header)
        pixels = np.frombuffer(blob[len(header):], dtype=">u2").reshape(2, 2)
        assert pixels[0, 0] == 0 and pixels[1, 1] == 65535
        assert pixels[0, 1] == round(1.0 / 4.0 * 65535)
        sidecar = (tmp_path / "field.pgm.range.csv").read_text().splitlines()
        assert sidecar[0] == "min,max"
        assert [float(v) for v in sidecar[1].split(",")] == [0.0, 4.0]

    def test_mf_along_curve_matches_pointwise(self):
        gen, rng = random_model(18)
        curve = DiscretizedCurve(rng.normal(size=(9, 2)))
        vals = mf_along_curve(gen, curve)
        for i in (0, 4, 8):
            assert vals[i] == pytest.approx(magnification_factor(gen, curve.points[i]), rel=1e-12)
