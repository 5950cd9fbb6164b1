"""TOML experiment configuration with strict validation.

Sections and their keys are listed in ``SCHEMA``; anything else is an error.
Defaults follow the usual few-shot conventions: K=5 adaptation steps,
alpha=1e-2, batches of B=4 tasks, R=60000 rounds, SGD meta-steps of 1e-3
(initialization) and 1e-4 (mirror map), non-PSD quadratic term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import mirror as mm
from .adaptation import AdaptationConfig
from .smoothness import TheoryInputs, estimate_sigma
from .tasks import TaskFamily, family_lipschitz, sample_universe, init_model_params
from .trainer import TrainConfig

SCHEMA_VERSION = 1

SCHEMA = {
    "experiment": {"schema_version": SCHEMA_VERSION, "id": "experiment", "out_dir": "runs/experiment",
                   "seed": 0},
    "train": {"R": 60000, "B": 4, "B_hat": 0, "optimizer": "sgd", "checkpoint_every": 0,
              "chunk_size": 0, "population_every": 0},
    "adaptation": {"K": 5, "alpha": 1e-2, "mode": "mida", "prior_strength": 0.0},
    "lr": {"mode": "constant", "beta1": 1e-3, "beta2": 1e-4, "C_beta": None},
    "theory": {"G_ell": None, "H_ell": None, "G_lh": 1.0, "G_h": None, "H_h": 1.0,
               "sigma": None, "Delta": 1.0},
    "family": {"kind": "sinusoid_regression", "T": 64, "shots": 10, "val_count": 10, "seed": 0,
               "amplitude_range": [0.1, 5.0], "phase_range": [0.0, math.pi],
               "input_range": [-5.0, 5.0], "hidden_width": 8, "num_classes": 3, "feature_dim": 2,
               "class_radius": 2.0, "noise_std": 1.0, "dim": 5, "eig_range": [0.5, 4.0],
               "center_scale": 1.0, "val_gap": 0.1},
    "mirror": {"num_layers": 1, "hidden_widths": [], "activation": "softplus",
               "weight_bound": 1.0, "skip_bound": 1.0, "include_quadratic": True,
               "quadratic_bound": 2.0, "enforce_psd_quadratic": False},
    "eval": {"n_tasks": 200, "every": 0},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Validated experiment: the training config plus run-level settings."""

    sections: dict
    train: TrainConfig
    experiment_id: str
    out_dir: str
    checkpoint_every: int
    eval_tasks: int
    theory_overrides: dict = field(default_factory=dict)

    def to_toml(self) -> str:
        return tomli_w.dumps(_strip_none(self.sections))


def _strip_none(sections: dict) -> dict:
    return {s: {k: v for k, v in body.items() if v is not None} for s, body in sections.items()}


def _merge(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table")
    unknown = set(raw) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    merged = {}
    for section, defaults in SCHEMA.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        bad = set(body) - set(defaults)
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        merged[section] = {**defaults, **body}
    if merged["experiment"]["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    return merged


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return build_config(raw)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def build_config(raw: dict) -> ExperimentConfig:
    s = _merge(raw)
    try:
        fam = TaskFamily(**s["family"])
        ad_cfg = AdaptationConfig(**s["adaptation"])
        m = s["mirror"]
        spec = None
        if ad_cfg.mode == "mida" or (ad_cfg.mode == "pgd"):
            spec = mm.MirrorMapSpec(input_dim=fam.model.dim, **m)
        lr = s["lr"]
        tr = s["train"]
        theory = None
        if lr["mode"] == "adaptive":
            theory = theory_inputs(s, fam, ad_cfg, spec)
        C_beta = lr["C_beta"]
        if lr["mode"] == "adaptive" and C_beta is None:
            C_beta = math.sqrt(fam.T)
        train = TrainConfig(
            family=fam, adaptation=ad_cfg, mirror_spec=spec, R=tr["R"], B=tr["B"],
            B_hat=tr["B_hat"], lr_mode=lr["mode"], beta1=lr["beta1"], beta2=lr["beta2"],
            C_beta=C_beta, theory=theory, optimizer=tr["optimizer"],
            seed=s["experiment"]["seed"], eval_every=s["eval"]["every"],
            eval_tasks=s["eval"]["n_tasks"], chunk_size=tr["chunk_size"],
            population_every=tr["population_every"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(sections=s, train=train, experiment_id=s["experiment"]["id"],
                            out_dir=s["experiment"]["out_dir"],
                            checkpoint_every=tr["checkpoint_every"],
                            eval_tasks=s["eval"]["n_tasks"])


def theory_inputs(sections: dict, fam: TaskFamily, ad_cfg: AdaptationConfig,
                  spec: mm.MirrorMapSpec | None) -> TheoryInputs:
    """Theory inputs with gaps filled from exact or estimated values.

    G_h comes from the mirror-map bound when not configured; G_ell and H_ell
    are exact for the quadratic family; sigma is estimated at initial points
    when not configured.
    """
    th = dict(sections["theory"])
    if th["G_h"] is None:
        if spec is None:
            raise ConfigError("[theory] G_h is required without a mirror map")
        th["G_h"] = mm.lipschitz_bounds(spec).G_h
    if th["G_ell"] is None or th["H_ell"] is None:
        if fam.kind != "quadratic":
            raise ConfigError(f"[theory] G_ell and H_ell must be set for the {fam.kind} family")
        G_ell, H_ell = family_lipschitz(fam)
        th["G_ell"] = G_ell if th["G_ell"] is None else th["G_ell"]
        th["H_ell"] = H_ell if th["H_ell"] is None else th["H_ell"]
    if th["sigma"] is None:
        rng = np.random.default_rng(sections["experiment"]["seed"])
        probes = [init_model_params(fam.model, rng) for _ in range(10)]
        th["sigma"] = math.sqrt(estimate_sigma(sample_universe(fam), probes))
    return TheoryInputs(G_ell=float(th["G_ell"]), H_ell=float(th["H_ell"]), G_lh=float(th["G_lh"]),
                        G_h=float(th["G_h"]), H_h=float(th["H_h"]), sigma=float(th["sigma"]),
                        T=fam.T, alpha=ad_cfg.alpha, K=ad_cfg.K)


def default_toml() -> str:
    return tomli_w.dumps(_strip_none(SCHEMA))
