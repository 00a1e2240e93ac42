"""Run configuration: JSON parsing, per-experiment presets, and validation.

A run config is a JSON object with the scalar sampler settings plus one block
for the chosen experiment.  Unset fields fall back to the selected preset
("reference" carries the full-scale experiment settings, "ci" is a desk-scale
variant with coarser grids and shorter chains).  Validation collects every
violation before failing.

Environment overrides: REPCNLD_SEED and REPCNLD_OUTPUT_DIR replace the seed
and output directory after the file is parsed.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ConfigError

EXPERIMENTS = ("mixture1d", "mixture2d", "center", "permeability", "verify")
METHODS = ("pcnld", "repcnld", "m-repcnld")
SEED_ENV = "REPCNLD_SEED"
OUTPUT_ENV = "REPCNLD_OUTPUT_DIR"


@dataclass(frozen=True)
class MixtureSpec:
    """Gaussian-mixture target plus its auxiliary sampling prior."""

    weights: tuple
    means: tuple          # (M, n)
    covariances: tuple    # (M, n, n)
    prior_mean: tuple
    prior_cov: tuple      # (n, n)
    modes_radius: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    method: str
    delta: float
    tau1: float
    tau2: float
    n_iter: int
    seed: int
    burn_in: int
    output_dir: str
    swap_attempt_prob: float = 1.0
    variance_ratio: Optional[float] = None
    start: Optional[tuple] = None
    mixture: Optional[MixtureSpec] = None
    center: Optional[dict] = None
    permeability: Optional[dict] = None


_MIXTURE_1D = {
    "weights": [0.4, 0.6],
    "means": [[-3.0], [2.0]],
    "covariances": [[[0.49]], [[0.25]]],
    "prior_mean": [0.0],
    "prior_cov": [[3.0]],
    "modes_radius": 2.0,
}

_MIXTURE_2D = {
    "weights": [0.3, 0.3, 0.4],
    "means": [[4.0, 2.0], [-4.0, 2.0], [0.0, -3.0]],
    "covariances": [
        [[1.0, 0.6], [0.6, 1.0]],
        [[1.0, -0.6], [-0.6, 1.0]],
        [[1.0, 0.0], [0.0, 1.0]],
    ],
    "prior_mean": [0.0, 0.0],
    "prior_cov": [[10.0, 0.0], [0.0, 10.0]],
    "modes_radius": 2.0,
}

_CENTER_BLOCK = {
    "widths": [0.1, 0.2],
    "source_strength": 1.0,
    "sensor": [0.5, 0.3],
    "sigma_obs": 0.1,
    "final_time": 0.1,
    "mesh_high": 40,
    "dt_high": 0.001,
    "mesh_low": 20,
    "dt_low": 0.001,
    "add_data_noise": True,
}

_CENTER_BLOCK_CI = dict(_CENTER_BLOCK, mesh_high=20, mesh_low=10, dt_high=0.005, dt_low=0.005)

# Smoothness 0.45 puts the 86% energy target at a 15-mode truncation on the
# default 40x40 grid; see MaternParams for the kernel itself.
_PERM_BLOCK = {
    "variance": 1.0,
    "smoothness": 0.45,
    "length_scales": [1.0, 0.5],
    "energy_target": 0.86,
    "kl_grid": [40, 40],
    "wells": None,
    "rate": 1.5,
    "well_width": 0.05,
    "initial_value": 4.0,
    "sigma_obs": 0.1,
    "obs_times": [0.01, 0.04, 0.06, 0.08, 0.10],
    "final_time": 0.1,
    "mesh": 60,
    "dt_high": 0.002,
    "dt_low": 0.005,
    "data_mesh": 120,
    "data_steps": 100,
    "add_data_noise": True,
}

_PERM_BLOCK_CI = dict(_PERM_BLOCK, mesh=30, data_mesh=60, data_steps=50)

PRESETS = {
    ("mixture1d", "reference"): {
        "delta": 0.001, "tau1": 1.0, "tau2": 15.0, "n_iter": 100_000, "burn_in": 0,
        "mixture": _MIXTURE_1D,
    },
    ("mixture1d", "ci"): {
        "delta": 0.001, "tau1": 1.0, "tau2": 15.0, "n_iter": 30_000, "burn_in": 0,
        "mixture": _MIXTURE_1D,
    },
    ("mixture2d", "reference"): {
        "delta": 0.001, "tau1": 1.0, "tau2": 20.0, "n_iter": 100_000, "burn_in": 0,
        "mixture": _MIXTURE_2D,
    },
    ("mixture2d", "ci"): {
        "delta": 0.001, "tau1": 1.0, "tau2": 20.0, "n_iter": 30_000, "burn_in": 0,
        "mixture": _MIXTURE_2D,
    },
    ("center", "reference"): {
        "delta": 1e-5, "tau1": 1.0, "tau2": 15.0, "n_iter": 300_000, "burn_in": 270_000,
        "center": _CENTER_BLOCK,
    },
    ("center", "ci"): {
        "delta": 1e-5, "tau1": 1.0, "tau2": 15.0, "n_iter": 30_000, "burn_in": 10_000,
        "center": _CENTER_BLOCK_CI,
    },
    ("permeability", "reference"): {
        "delta": 0.002, "tau1": 1.0, "tau2": 1.5, "n_iter": 500_000, "burn_in": 100_000,
        "permeability": _PERM_BLOCK,
    },
    ("permeability", "ci"): {
        "delta": 0.002, "tau1": 1.0, "tau2": 1.5, "n_iter": 10_000, "burn_in": 2_000,
        "permeability": _PERM_BLOCK_CI,
    },
    # The verification harness ignores the sampler scalars; defaults keep the
    # config valid.
    ("verify", "reference"): {"delta": 0.001, "tau1": 1.0, "tau2": 2.0, "n_iter": 1, "burn_in": 0},
    ("verify", "ci"): {"delta": 0.001, "tau1": 1.0, "tau2": 2.0, "n_iter": 1, "burn_in": 0},
}

_COMMON_DEFAULTS = {
    "method": "repcnld",
    "preset": "reference",
    "seed": 0,
    "swap_attempt_prob": 1.0,
    "variance_ratio": None,
    "start": None,
    "output_dir": "runs/latest",
}


def _to_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_to_tuple(v) for v in value)
    return value


def config_from_dict(raw):
    """Resolve a raw config dict against its preset and validate it."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    violations = []
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        violations.append(f"experiment: must be one of {EXPERIMENTS}, got {experiment!r}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations), violations)
    preset = raw.get("preset", _COMMON_DEFAULTS["preset"])
    if (experiment, preset) not in PRESETS:
        violations.append(f"preset: unknown preset {preset!r} for experiment {experiment!r}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations), violations)

    merged = dict(_COMMON_DEFAULTS)
    merged.update(copy.deepcopy(PRESETS[(experiment, preset)]))
    block_keys = {"mixture", "center", "permeability"}
    for key, value in raw.items():
        if key in ("experiment", "preset"):
            continue
        if key in block_keys:
            if key not in merged or merged[key] is None:
                merged[key] = {}
            if not isinstance(value, dict):
                violations.append(f"{key}: block must be an object")
                continue
            merged[key].update(value)
        else:
            merged[key] = value

    if os.environ.get(SEED_ENV):
        merged["seed"] = int(os.environ[SEED_ENV])
    if os.environ.get(OUTPUT_ENV):
        merged["output_dir"] = os.environ[OUTPUT_ENV]

    method = merged.get("method")
    if method not in METHODS:
        violations.append(f"method: must be one of {METHODS}, got {method!r}")

    delta = merged.get("delta")
    if not isinstance(delta, (int, float)) or not 0.0 < float(delta) < 2.0:
        violations.append(f"delta: step size must lie in the open interval (0, 2), got {delta!r}")

    n_iter = merged.get("n_iter")
    if not isinstance(n_iter, int) or n_iter <= 0:
        violations.append(f"n_iter: iteration count must be a positive integer, got {n_iter!r}")

    burn_in = merged.get("burn_in", 0)
    if not isinstance(burn_in, int) or burn_in < 0 or (isinstance(n_iter, int) and burn_in >= n_iter):
        violations.append(f"burn_in: must be a nonnegative integer below n_iter, got {burn_in!r}")

    tau1 = merged.get("tau1")
    tau2 = merged.get("tau2")
    if not isinstance(tau1, (int, float)) or tau1 <= 0:
        violations.append(f"tau1: must be positive, got {tau1!r}")
    if method in ("repcnld", "m-repcnld"):
        if not isinstance(tau2, (int, float)) or not (isinstance(tau1, (int, float)) and tau2 > tau1):
            violations.append(f"tau2: replica exchange needs tau2 > tau1, got tau1={tau1!r}, tau2={tau2!r}")

    prob = merged.get("swap_attempt_prob", 1.0)
    if not isinstance(prob, (int, float)) or not 0.0 < prob <= 1.0:
        violations.append(f"swap_attempt_prob: must lie in (0, 1], got {prob!r}")

    seed = merged.get("seed")
    if not isinstance(seed, int):
        violations.append(f"seed: must be an integer, got {seed!r}")

    if not merged.get("output_dir"):
        violations.append("output_dir: must be a nonempty path")

    variance_ratio = merged.get("variance_ratio")
    if method == "m-repcnld":
        if experiment not in ("center", "permeability"):
            violations.append(
                "method: m-repcnld needs a two-fidelity forward model; "
                f"experiment {experiment!r} has none"
            )
        if variance_ratio is None or not isinstance(variance_ratio, (int, float)) or variance_ratio < 0:
            violations.append(
                f"variance_ratio: m-repcnld requires a nonnegative variance ratio, got {variance_ratio!r}"
            )
        elif isinstance(tau1, (int, float)) and isinstance(tau2, (int, float)) and tau2 > tau1 > 0:
            tau_delta = 1.0 / tau1 - 1.0 / tau2
            bound = 1.0 / (tau_delta ** 2 + tau_delta)
            if variance_ratio >= bound:
                violations.append(
                    f"variance_ratio: {variance_ratio} violates the admissibility bound "
                    f"r < 1/(tau_delta^2 + tau_delta) = {bound!r}"
                )
    elif variance_ratio is not None and method != "m-repcnld":
        violations.append("variance_ratio: only meaningful for the m-repcnld method")

    start = merged.get("start")
    if start is not None and not isinstance(start, (list, tuple)):
        violations.append(f"start: must be a coordinate list, got {start!r}")

    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations), violations)

    mixture = None
    if experiment.startswith("mixture"):
        blk = merged["mixture"]
        mixture = MixtureSpec(
            weights=_to_tuple(blk["weights"]),
            means=_to_tuple(blk["means"]),
            covariances=_to_tuple(blk["covariances"]),
            prior_mean=_to_tuple(blk["prior_mean"]),
            prior_cov=_to_tuple(blk["prior_cov"]),
            modes_radius=float(blk.get("modes_radius", 2.0)),
        )

    return RunConfig(
        experiment=experiment,
        method=method,
        delta=float(delta),
        tau1=float(tau1),
        tau2=float(tau2) if tau2 is not None else float(tau1),
        n_iter=n_iter,
        seed=seed,
        burn_in=burn_in,
        output_dir=str(merged["output_dir"]),
        swap_attempt_prob=float(prob),
        variance_ratio=None if variance_ratio is None else float(variance_ratio),
        start=None if start is None else tuple(float(v) for v in start),
        mixture=mixture,
        center=merged.get("center") if experiment == "center" else None,
        permeability=merged.get("permeability") if experiment == "permeability" else None,
    )


def parse_config(path):
    """Load and validate a JSON run config; raises ConfigError listing all violations."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(config):
    """Round-trippable echo of a resolved config (used by run manifests)."""
    out = {
        "experiment": config.experiment,
        "method": config.method,
        "delta": config.delta,
        "tau1": config.tau1,
        "tau2": config.tau2,
        "n_iter": config.n_iter,
        "seed": config.seed,
        "burn_in": config.burn_in,
        "output_dir": config.output_dir,
        "swap_attempt_prob": config.swap_attempt_prob,
        "variance_ratio": config.variance_ratio,
        "start": list(config.start) if config.start is not None else None,
    }
    if config.mixture is not None:
        out["mixture"] = {
            "weights": np.asarray(config.mixture.weights).tolist(),
            "means": np.asarray(config.mixture.means).tolist(),
            "covariances": np.asarray(config.mixture.covariances).tolist(),
            "prior_mean": np.asarray(config.mixture.prior_mean).tolist(),
            "prior_cov": np.asarray(config.mixture.prior_cov).tolist(),
            "modes_radius": config.mixture.modes_radius,
        }
    if config.center is not None:
        out["center"] = dict(config.center)
    if config.permeability is not None:
        out["permeability"] = dict(config.permeability)
    return out
