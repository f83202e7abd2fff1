"""Experiment configuration: one structured YAML/JSON file deep-merged over
full-scale defaults, with a stable hash for resumable runs. Only the output
directory may be overridden from the environment (CFNIDS_OUTPUT)."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass

import yaml

from . import classifier, diffusion, distill, vcnet, wachter

DEFAULTS = {
    "dataset": {
        "csv": None,
        "schema": None,
        "test_fraction": 0.2,
        "split_seed": 0,
    },
    "preprocess": {"correlation_threshold": 0.95, "n_quantiles": 1000},
    "classifier": {
        "hidden": [128, 64, 32],
        "lr": 5e-4,
        "epochs": 600,
        "batch_size": 256,
        "seed": 11,
    },
    "guidance_classifier": {
        "hidden": [128, 64, 32],
        "lr": 5e-4,
        "epochs": 100,
        "batch_size": 256,
        "t_dim": 32,
        "seed": 12,
    },
    "diffusion": {
        "steps": 2500,
        "beta_min": 1e-4,
        "beta_max": 0.02,
        "hidden": [256, 256],
        "lr": 1e-3,
        "epochs": 100,
        "batch_size": 256,
        "seed": 13,
    },
    "distill": {"factors": [2, 5], "epochs": 50, "lr": 1e-3, "batch_size": 256, "seed": 14},
    "vcnet": {
        "hidden": [64, 32],
        "latent_dim": 16,
        "components": 5,
        "lr": 5e-4,
        "epochs": 200,
        "batch_size": 256,
        "w_recon": 1.0,
        "w_kl": 0.5,
        "w_cls": 1.0,
        "seed": 15,
    },
    "wachter": {
        "initial_lam": 1.0,
        "lam_growth": 3.0,
        "max_outer": 25,
        "inner_steps": 40,
        "step_size": 0.05,
    },
    "guidance": {"alpha": 1.0, "lam": 0.5, "k": 10, "tau": None, "clip": 6.0,
                 "use_blackbox": False},
    "explain": {"chunk": 32, "jobs": 1},
    "evaluate": {
        "seeds": [0, 1, 2, 3, 4],
        "pool_sizes": [1000],
        "k": 10,
        "lof_neighbors": 20,
        "lof_reference_cap": 4000,
        "methods": ["tabdiff", "tabdiff-distilled", "vcnet", "wachter"],
    },
    "rules": {"purity_threshold": 0.9, "accuracy_floor": 0.5},
    "output_dir": "runs/experiment",
}

METHODS = ("tabdiff", "tabdiff-distilled", "vcnet", "wachter")


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def config_hash(raw: dict) -> str:
    hashable = {k: v for k, v in raw.items() if k != "output_dir"}
    blob = json.dumps(hashable, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    @property
    def output_dir(self) -> str:
        return os.environ.get("CFNIDS_OUTPUT", self.raw["output_dir"])

    def classifier_config(self) -> classifier.TrainConfig:
        c = self.raw["classifier"]
        return classifier.TrainConfig(
            hidden=tuple(c["hidden"]), lr=c["lr"], epochs=c["epochs"], batch_size=c["batch_size"]
        )

    def guidance_classifier_config(self) -> classifier.TrainConfig:
        c = self.raw["guidance_classifier"]
        return classifier.TrainConfig(
            hidden=tuple(c["hidden"]), lr=c["lr"], epochs=c["epochs"],
            batch_size=c["batch_size"], t_dim=c["t_dim"],
        )

    def schedule(self) -> diffusion.NoiseSchedule:
        c = self.raw["diffusion"]
        return diffusion.build_schedule(c["steps"], c["beta_min"], c["beta_max"])

    def denoiser_config(self) -> diffusion.DenoiserConfig:
        c = self.raw["diffusion"]
        return diffusion.DenoiserConfig(
            hidden=tuple(c["hidden"]), t_dim=self.raw["guidance_classifier"]["t_dim"],
            lr=c["lr"], epochs=c["epochs"], batch_size=c["batch_size"],
        )

    def distill_config(self) -> distill.DistillConfig:
        c = self.raw["distill"]
        return distill.DistillConfig(lr=c["lr"], epochs=c["epochs"], batch_size=c["batch_size"])

    def distill_plan(self) -> distill.DistillationPlan:
        return distill.DistillationPlan(tuple(int(f) for f in self.raw["distill"]["factors"]))

    def vcnet_config(self) -> vcnet.VcnetConfig:
        c = self.raw["vcnet"]
        return vcnet.VcnetConfig(
            hidden=tuple(c["hidden"]), latent_dim=c["latent_dim"], components=c["components"],
            lr=c["lr"], epochs=c["epochs"], batch_size=c["batch_size"],
            w_recon=c["w_recon"], w_kl=c["w_kl"], w_cls=c["w_cls"],
        )

    def wachter_config(self) -> wachter.WachterConfig:
        c = self.raw["wachter"]
        return wachter.WachterConfig(
            initial_lam=c["initial_lam"], lam_growth=c["lam_growth"],
            max_outer=c["max_outer"], inner_steps=c["inner_steps"], step_size=c["step_size"],
        )

    def guidance_config(self, k=None) -> diffusion.GuidanceConfig:
        c = self.raw["guidance"]
        return diffusion.GuidanceConfig(
            alpha=c["alpha"], lam=c["lam"], k=k if k is not None else c["k"],
            tau=c["tau"], clip=c["clip"],
        )


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    cfg = ExperimentConfig(_deep_merge(DEFAULTS, user))
    ds = cfg.raw["dataset"]
    if ds["csv"] is None or ds["schema"] is None:
        raise ConfigError(f"{path}: dataset.csv and dataset.schema are required")
    if not cfg.raw["evaluate"]["seeds"]:
        raise ConfigError("evaluate.seeds must be non-empty")
    if any(p <= 0 for p in cfg.raw["evaluate"]["pool_sizes"]):
        raise ConfigError("evaluate.pool_sizes must be positive")
    for m in cfg.raw["evaluate"]["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} (choose from {METHODS})")
    return cfg
