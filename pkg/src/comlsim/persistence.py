"""Conversion between trained estimators and model bundles."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autoencoders import FluxAutoencoder, PatchAutoencoder
from .engine import LatentModel
from .grid import Normalizer
from .io import FormatError, read_bundle, write_bundle


def _report_dict(est):
    rep = getattr(est, "train_report_", None)
    return rep.to_dict() if rep is not None else None


def _patch_entry(prefix, ae: PatchAutoencoder, arrays) -> dict:
    arrays[f"{prefix}.encoder"] = ae.encoder_.get_flat()
    arrays[f"{prefix}.decoder"] = ae.decoder_.get_flat()
    return {"params": ae.get_params(), "report": _report_dict(ae)}


def _patch_from(prefix, entry, arrays) -> PatchAutoencoder:
    ae = PatchAutoencoder.from_state(entry["params"], arrays[f"{prefix}.encoder"],
                                     arrays[f"{prefix}.decoder"])
    return ae


def autoencoders_to_bundle(sol_ae, cond_aes, sol_norm: Normalizer, cond_norms, spacing,
                           extra: dict | None = None):
    arrays = {}
    spec = {
        "kind": "autoencoders",
        "solution": _patch_entry("solution", sol_ae, arrays),
        "conditions": [_patch_entry(f"condition{i}", ae, arrays) for i, ae in enumerate(cond_aes)],
        "solution_norm": sol_norm.to_dict(),
        "condition_norms": [n.to_dict() for n in cond_norms],
        "spacing": list(map(float, spacing)),
        "extra": extra or {},
    }
    return spec, arrays


def autoencoders_from_bundle(spec, arrays):
    sol = _patch_from("solution", spec["solution"], arrays)
    conds = tuple(_patch_from(f"condition{i}", e, arrays) for i, e in enumerate(spec["conditions"]))
    return (sol, conds, Normalizer.from_dict(spec["solution_norm"]),
            tuple(Normalizer.from_dict(d) for d in spec["condition_norms"]), tuple(spec["spacing"]))


def model_to_bundle(model: LatentModel, extra: dict | None = None):
    spec, arrays = autoencoders_to_bundle(model.solution_ae, model.condition_aes, model.solution_norm,
                                          model.condition_norms, model.spacing, extra)
    spec["kind"] = "latent_model"
    spec["inactive_zero"] = bool(model.inactive_zero)
    spec["flux"] = {"params": model.flux_ae.get_params(), "report": _report_dict(model.flux_ae)}
    arrays["flux.net"] = model.flux_ae.net_.get_flat()
    arrays["flux.mean"] = model.flux_ae.mean_
    arrays["flux.scale"] = model.flux_ae.scale_
    return spec, arrays


def model_from_bundle(spec, arrays) -> LatentModel:
    if spec.get("kind") != "latent_model":
        raise FormatError(f"bundle holds {spec.get('kind')!r}, not a complete latent model")
    sol, conds, sn, cns, spacing = autoencoders_from_bundle(spec, arrays)
    flux = FluxAutoencoder.from_state(spec["flux"]["params"], arrays["flux.net"], arrays["flux.mean"],
                                      arrays["flux.scale"])
    return LatentModel(sol, conds, flux, sn, cns, spacing, spec.get("inactive_zero", False))


def save_model(path, model: LatentModel, extra: dict | None = None) -> Path:
    return write_bundle(path, *model_to_bundle(model, extra))


def load_model(path) -> LatentModel:
    return model_from_bundle(*read_bundle(path))


def save_autoencoders(path, sol_ae, cond_aes, sol_norm, cond_norms, spacing, extra=None) -> Path:
    return write_bundle(path, *autoencoders_to_bundle(sol_ae, cond_aes, sol_norm, cond_norms, spacing, extra))


def load_autoencoders(path):
    spec, arrays = read_bundle(path)
    if spec.get("kind") not in ("autoencoders", "latent_model"):
        raise FormatError(f"unexpected bundle kind {spec.get('kind')!r}")
    return autoencoders_from_bundle(spec, arrays)


def arrays_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
