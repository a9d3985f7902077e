"""Bundle directories round-trip models bit for bit."""

import json

import numpy as np
import pytest

from lgal.bundle import load_bundle, save_bundle
from lgal.errors import ParseError
from lgal.model import make_generative, make_recognition


def models(seed=0):
    rng = np.random.default_rng(seed)
    rec = make_recognition(3, 2, hidden=8, depth=2, rng=rng)
    gen = make_generative(3, 2, hidden=8, depth=1, n_centers=4, alpha=2.5, rng=rng)
    return rec, gen


class TestBundleRoundTrip:
    def test_everything_survives_bit_for_bit(self, tmp_path):
        rec, gen = models()
        save_bundle(tmp_path / "m", rec, gen)
        rec2, gen2 = load_bundle(tmp_path / "m")
        assert np.array_equal(rec2.trunk_params.values, rec.trunk_params.values)
        assert np.array_equal(rec2.std_params.values, rec.std_params.values)
        assert np.array_equal(gen2.mean_params.values, gen.mean_params.values)
        assert np.array_equal(gen2.centers, gen.centers)
        assert np.array_equal(gen2.bandwidths, gen.bandwidths)
        assert np.array_equal(gen2.weights, gen.weights)
        assert gen2.alpha == gen.alpha
        assert gen2.precision_floor == gen.precision_floor
        assert gen2.bandwidth_divisor == gen.bandwidth_divisor
        assert rec2.trunk == rec.trunk
        assert gen2.mean_net == gen.mean_net

    def test_loaded_model_predicts_identically(self, tmp_path):
        rec, gen = models(1)
        save_bundle(tmp_path / "m", rec, gen)
        rec2, gen2 = load_bundle(tmp_path / "m")
        x = np.random.default_rng(2).normal(size=(5, 3))
        np.testing.assert_array_equal(rec2.encode(x)[0], rec.encode(x)[0])
        z = np.random.default_rng(3).normal(size=(5, 2))
        np.testing.assert_array_equal(gen2.decode(z)[1], gen.decode(z)[1])

    def test_overwrite_is_clean_and_deterministic(self, tmp_path):
        rec, gen = models(4)
        save_bundle(tmp_path / "m", rec, gen)
        first = sorted(p.name for p in (tmp_path / "m").iterdir())
        blob = (tmp_path / "m" / "gen_mean.params").read_bytes()
        save_bundle(tmp_path / "m", rec, gen)
        assert sorted(p.name for p in (tmp_path / "m").iterdir()) == first
        assert (tmp_path / "m" / "gen_mean.params").read_bytes() == blob
        assert not list(tmp_path.glob("m.tmp-*"))

    def test_run_info_lands_in_manifest(self, tmp_path):
        rec, gen = models(6)
        save_bundle(tmp_path / "m", rec, gen, run_info={"seed": 7, "epochs": 40})
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        assert manifest["run"] == {"seed": 7, "epochs": 40}
        load_bundle(tmp_path / "m")

    def test_missing_manifest_rejected(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(ParseError):
            load_bundle(tmp_path / "empty")

    def test_future_format_rejected(self, tmp_path):
        rec, gen = models(5)
        save_bundle(tmp_path / "m", rec, gen)
        manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
        manifest["format"] = 99
        (tmp_path / "m" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ParseError):
            load_bundle(tmp_path / "m")
