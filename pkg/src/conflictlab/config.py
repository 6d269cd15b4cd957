"""Experiment configuration: a single human-readable JSON file with a
schema version, validated for cross-field consistency at load time."""

from __future__ import annotations

import json
from pathlib import Path

from .datafiles import cfg_from_dict, cfg_to_dict
from .netsim import SimConfig
from .scenarios import SCENARIOS
from .xapps import PolicyParams

SCHEMA_VERSION = 1

SEARCH_METHODS = ("guided", "rs", "bptt", "cem")


def default_config(scenario: str = "direct", out_dir: str = "runs/exp") -> dict:
    if scenario not in SCENARIOS + ("all",):
        raise ValueError(f"unknown scenario {scenario!r}")
    return {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "out_dir": out_dir,
        "sim": cfg_to_dict(SimConfig()),
        "policy_params": {
            "load_low": 3,
            "load_high": 3,
            "util_target": 2.0,
            "margin": 0.5,
        },
        "conflict": {"theta_c": 2, "p_max": 4.0, "tp_threshold": None},
        "data": {"episodes_per_set": 500, "collect_seed": 1000},
        "surrogate": {
            "n_members": 5,
            "max_epochs": 200,
            "patience": 10,
            "batch": 256,
            "lr": 1e-3,
            "train_seed": 2000,
        },
        "diffusion": {
            "n_steps": 100,
            "beta_start": 1e-4,
            "beta_end": 0.02,
            "train_steps": 2500,
            "batch": 64,
            "lr": 1e-3,
            "train_seed": 3000,
        },
        "guidance": {
            "gamma": 0.7,
            "eta": 12.0,
            "delta": 1e-8,
            "phi_weight": 40.0,
            "n_candidates": 256,
        },
        "searchers": {
            "rs": {"n": 1000},
            "cem": {"pop": 256, "generations": 30, "elite_frac": 0.1},
            "bptt": {"n_restarts": 64, "steps": 40, "lr": 0.05, "grad_clip": 10.0},
        },
        "calibration": {"seed": 4000, "n_conditions": 1000, "top_k": 50, "target": 0.10},
        "seeds": [0, 1, 2, 3, 4],
        "ablation": {"scenario": "indirect", "variants": ["full", "no_Udyn", "no_Upi", "no_both", "no_guidance"]},
        "metrics_ks": [10, 20, 50],
    }


def validate_config(cfg: dict) -> dict:
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported config schema version")
    if cfg["scenario"] not in SCENARIOS + ("all",):
        raise ValueError(f"unknown scenario {cfg['scenario']!r}")
    sim = cfg_from_dict(cfg["sim"])  # runs SimConfig invariants
    if cfg["conflict"]["theta_c"] < 1:
        raise ValueError("theta_c must be >= 1")
    if cfg["conflict"]["p_max"] <= 0:
        raise ValueError("p_max must be positive")
    if not cfg["seeds"]:
        raise ValueError("at least one seed required")
    if cfg["data"]["episodes_per_set"] < 1:
        raise ValueError("episodes_per_set must be positive")
    ks = cfg.get("metrics_ks", [])
    max_emitted = min(
        cfg["searchers"]["rs"]["n"],
        cfg["searchers"]["bptt"]["n_restarts"],
        cfg["searchers"]["cem"]["pop"],
        cfg["guidance"]["n_candidates"],
    )
    if ks and max(ks) > max_emitted:
        raise ValueError(
            f"metrics_ks up to {max(ks)} need every searcher to emit that many "
            f"candidates (smallest emits {max_emitted})"
        )
    if cfg["ablation"]["scenario"] not in SCENARIOS:
        raise ValueError("ablation scenario must be a concrete scenario")
    for v in cfg["ablation"]["variants"]:
        if v not in ("full", "no_Udyn", "no_Upi", "no_both", "no_guidance"):
            raise ValueError(f"unknown ablation variant {v!r}")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file missing: {path}")
    with path.open() as fh:
        return validate_config(json.load(fh))


def save_config(cfg: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")


def sim_config(cfg: dict) -> SimConfig:
    return cfg_from_dict(cfg["sim"])


def policy_params(cfg: dict) -> PolicyParams:
    return PolicyParams(**cfg["policy_params"])
