"""Model bundles: a directory holding both models and a manifest.

A bundle is the unit the command line trades in. Parameter vectors go
into the same binary format used everywhere else, network shapes into
JSON spec files, and everything scalar (alpha, floor, array shapes)
into manifest.json. Writing stages the whole bundle in a sibling
temporary directory and renames it into place, so a crash mid-write
can never leave a half-written bundle under the target name.
"""

import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError
from .model import GenerativeModel, RecognitionModel
from .network import ParamSet, load_params, load_spec, save_params, save_spec

_FORMAT = 1

_REC_PARTS = ("rec_trunk", "rec_mean", "rec_std")
_GEN_PARTS = ("gen_mean",)
_ARRAY_PARTS = ("centers", "bandwidths", "weights")


def save_bundle(directory, rec: RecognitionModel, gen: GenerativeModel,
                run_info: dict | None = None) -> None:
    """Write both models under `directory`; `run_info` lands in the manifest.

    Callers record provenance (seed, training configuration) through
    `run_info`; it must be JSON-serializable.
    """
    target = Path(directory)
    target.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=target.name + ".tmp-", dir=target.parent))
    try:
        for name, spec, params in (
            ("rec_trunk", rec.trunk, rec.trunk_params),
            ("rec_mean", rec.mean_head, rec.mean_params),
            ("rec_std", rec.std_head, rec.std_params),
            ("gen_mean", gen.mean_net, gen.mean_params),
        ):
            save_spec(stage / f"{name}.spec.json", spec)
            save_params(stage / f"{name}.params", params)
        for name, values in (
            ("centers", gen.centers),
            ("bandwidths", gen.bandwidths),
            ("weights", gen.weights),
        ):
            save_params(stage / f"{name}.params", ParamSet(np.ravel(values)))
        manifest = {
            "format": _FORMAT,
            "n_x": gen.n_x,
            "n_z": gen.n_z,
            "n_centers": int(gen.centers.shape[0]),
            "alpha": gen.alpha,
            "precision_floor": gen.precision_floor,
            "bandwidth_divisor": gen.bandwidth_divisor,
        }
        if run_info is not None:
            manifest["run"] = run_info
        with open(stage / "manifest.json", "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if target.exists():
            shutil.rmtree(target)
        os.replace(stage, target)
    finally:
        if stage.exists():
            shutil.rmtree(stage)


def load_bundle(directory) -> tuple[RecognitionModel, GenerativeModel]:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise ParseError(f"{root} is not a model bundle (no manifest.json)")
    with open(manifest_path, encoding="ascii") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != _FORMAT:
        raise ParseError(f"unsupported bundle format {manifest.get('format')!r}")
    specs = {name: load_spec(root / f"{name}.spec.json") for name in _REC_PARTS + _GEN_PARTS}
    params = {name: load_params(root / f"{name}.params")
              for name in _REC_PARTS + _GEN_PARTS + _ARRAY_PARTS}
    n_z = int(manifest["n_z"])
    n_x = int(manifest["n_x"])
    n_centers = int(manifest["n_centers"])
    rec = RecognitionModel(
        trunk=specs["rec_trunk"],
        mean_head=specs["rec_mean"],
        std_head=specs["rec_std"],
        trunk_params=params["rec_trunk"],
        mean_params=params["rec_mean"],
        std_params=params["rec_std"],
    )
    gen = GenerativeModel(
        mean_net=specs["gen_mean"],
        mean_params=params["gen_mean"],
        centers=params["centers"].values.reshape(n_centers, n_z),
        bandwidths=params["bandwidths"].values,
        weights=params["weights"].values.reshape(n_x, n_centers),
        alpha=float(manifest["alpha"]),
        precision_floor=float(manifest["precision_floor"]),
        bandwidth_divisor=str(manifest["bandwidth_divisor"]),
    )
    return rec, gen
