"""Experiment orchestration: build the target from a run config, run the
requested sampler, and emit trace, diagnostics, and manifest artifacts.

All randomness flows through the four named streams derived from the master
seed, so a (config, seed) pair reproduces its trace byte for byte.  The
manifest is written before sampling starts and finalized afterwards; it echoes
the fully resolved config, the derived stream keys, and fixture checksums, so
a run can be repeated exactly from the manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, config_to_dict
from .diagnostics import (
    acf,
    ess,
    kde,
    field_moments,
    mode_occupancy,
    save_acf_csv,
    save_ess_csv,
    save_field_moments_csv,
    save_kde_csv,
    save_summary_json,
    tv_distance,
)
from .dynamics import (
    SwapPolicy,
    TemperatureLadder,
    beta_from_delta,
    run_replica_exchange,
    run_single_chain,
)
from .exceptions import ConfigError
from .priors import GaussianPrior, MaternParams, kl_decompose, save_kl_basis
from .problems import (
    CenterConfig,
    PdePosterior,
    PermeabilityConfig,
    build_initial_center_problem,
    build_permeability_problem,
    save_fixture,
)
from .seeding import seed_streams
from .targets import GaussianMixture, GaussianMixtureModel, mixture_log_density

TRACE_NAME = "trace.csv"
MANIFEST_NAME = "manifest.json"


@dataclass
class ExperimentResult:
    out_dir: Path
    traces: tuple
    manifest_path: Path
    trace_path: Path
    summary: dict


def _build_mixture(config):
    spec = config.mixture
    mixture = GaussianMixture(
        np.asarray(spec.weights, dtype=float),
        np.asarray(spec.means, dtype=float),
        np.asarray(spec.covariances, dtype=float),
    )
    prior = GaussianPrior.from_moments(
        np.asarray(spec.prior_mean, dtype=float),
        np.asarray(spec.prior_cov, dtype=float),
    )
    return GaussianMixtureModel(mixture, prior), prior, {"mixture": mixture}


def _build_center(config, streams, out_dir):
    blk = config.center
    rng = streams.generator("data") if blk.get("add_data_noise", True) else None
    problem = build_initial_center_problem(CenterConfig(
        widths=tuple(blk["widths"]),
        source_strength=blk["source_strength"],
        sensor=tuple(blk["sensor"]),
        sigma_obs=blk["sigma_obs"],
        final_time=blk["final_time"],
        mesh_high=blk["mesh_high"],
        dt_high=blk["dt_high"],
        mesh_low=blk["mesh_low"],
        dt_low=blk["dt_low"],
        add_data_noise=blk.get("add_data_noise", True),
    ), rng=rng)
    checksum = save_fixture(out_dir / "problem_fixture.json", problem, seed=config.seed)
    prior = GaussianPrior.from_moments(
        np.asarray(blk.get("prior_mean", [0.5, 0.5]), dtype=float),
        np.asarray(blk.get("prior_cov", [[0.25, 0.0], [0.0, 0.25]]), dtype=float),
    )
    model = PdePosterior(problem, prior)
    return model, prior, {"problem": problem, "fixtures": {"problem_fixture.json": checksum}}


def _build_permeability(config, streams, out_dir):
    blk = config.permeability
    params = MaternParams(blk["variance"], blk["smoothness"], tuple(blk["length_scales"]))
    basis = kl_decompose(params, tuple(blk["kl_grid"]), blk["energy_target"])
    save_kl_basis(out_dir / "kl_basis.csv", basis)
    rng = streams.generator("data")
    problem = build_permeability_problem(PermeabilityConfig(
        variance=blk["variance"],
        smoothness=blk["smoothness"],
        length_scales=tuple(blk["length_scales"]),
        energy_target=blk["energy_target"],
        kl_grid=tuple(blk["kl_grid"]),
        wells=None if blk.get("wells") is None else tuple(map(tuple, blk["wells"])),
        rate=blk["rate"],
        well_width=blk["well_width"],
        initial_value=blk["initial_value"],
        sigma_obs=blk["sigma_obs"],
        obs_times=tuple(blk["obs_times"]),
        final_time=blk["final_time"],
        mesh=blk["mesh"],
        dt_high=blk["dt_high"],
        dt_low=blk["dt_low"],
        data_mesh=blk["data_mesh"],
        data_steps=blk["data_steps"],
        add_data_noise=blk.get("add_data_noise", True),
    ), basis, rng)
    checksum = save_fixture(out_dir / "problem_fixture.json", problem, seed=config.seed)
    prior = GaussianPrior.from_moments(np.zeros(basis.truncation), np.eye(basis.truncation))
    model = PdePosterior(problem, prior)
    extras = {"problem": problem, "basis": basis,
              "fixtures": {"problem_fixture.json": checksum}}
    return model, prior, extras


def write_trace_csv(path, traces):
    """Fixed column order: iter, chain, xi_0..xi_{n-1}, energy, swapped."""
    dim = traces[0].positions.shape[1]
    header = "iter,chain," + ",".join(f"xi_{j}" for j in range(dim)) + ",energy,swapped"
    lines = [header]
    n = traces[0].n_records
    for k in range(n):
        for trace in traces:
            coords = ",".join(repr(float(v)) for v in trace.positions[k])
            lines.append(
                f"{k},{trace.chain_id},{coords},{float(trace.energies[k])!r},{int(trace.swapped[k])}"
            )
    text = "\n".join(lines) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_trace_csv(path):
    """Traces back from CSV, one (positions, energies, swapped) per chain id."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        dim = len(header) - 4
        rows = {"iters": [], "chain": [], "xi": [], "energy": [], "swapped": []}
        for line in fh:
            parts = line.strip().split(",")
            rows["iters"].append(int(parts[0]))
            rows["chain"].append(int(parts[1]))
            rows["xi"].append([float(v) for v in parts[2:2 + dim]])
            rows["energy"].append(float(parts[2 + dim]))
            rows["swapped"].append(bool(int(parts[3 + dim])))
    chain_ids = sorted(set(rows["chain"]))
    out = {}
    chains = np.asarray(rows["chain"])
    xi = np.asarray(rows["xi"])
    energy = np.asarray(rows["energy"])
    swapped = np.asarray(rows["swapped"])
    for cid in chain_ids:
        mask = chains == cid
        out[cid] = (xi[mask], energy[mask], swapped[mask])
    return out


def _mixture_summary(config, traces, extras, out_dir):
    mixture = extras["mixture"]
    low = traces[0]
    retained = low.positions[config.burn_in:]
    summary = {}
    modes = [(m, c) for m, c in zip(mixture.means, mixture.covariances)]
    occupancy = mode_occupancy(retained, modes, config.mixture.modes_radius)
    summary["mode_occupancy"] = occupancy.tolist()
    if mixture.dim == 1:
        samples = retained[:, 0]
        lo = float(mixture.means.min() - 4.0 * np.sqrt(mixture.covariances.max()))
        hi = float(mixture.means.max() + 4.0 * np.sqrt(mixture.covariances.max()))
        grid = np.linspace(lo, hi, 1024)
        estimate = kde(samples, grid)
        truth = np.exp([mixture_log_density(mixture, np.array([x])) for x in grid])
        summary["tv_distance"] = tv_distance(grid, estimate.values, truth)
        save_kde_csv(out_dir / "kde_grid.csv", estimate)
    elif mixture.dim == 2:
        spread = float(np.sqrt(mixture.covariances.max()))
        gx = np.linspace(mixture.means[:, 0].min() - 3 * spread, mixture.means[:, 0].max() + 3 * spread, 96)
        gy = np.linspace(mixture.means[:, 1].min() - 3 * spread, mixture.means[:, 1].max() + 3 * spread, 96)
        sub = retained[:: max(1, retained.shape[0] // 20000)]
        estimate = kde(sub, (gx, gy))
        save_kde_csv(out_dir / "kde_grid.csv", estimate)
    return summary


def _field_summary(config, traces, extras, out_dir):
    basis = extras.get("basis")
    if basis is None:
        return {}
    retained = traces[0].positions[config.burn_in:]
    moments = field_moments(retained, basis)
    save_field_moments_csv(out_dir / "field_moments.csv", basis, moments)
    return {"field_moment_nodes": int(moments.mean.size)}


def _run_verify_experiment(config, out_dir):
    from .verify import run_suites

    started = time.time()
    results = run_suites(seed=config.seed)
    summary = {
        "experiment": "verify",
        "seed": config.seed,
        "checks": [{"name": r.name, "ok": r.ok, "detail": r.detail} for r in results],
        "ok": all(r.ok for r in results),
    }
    save_summary_json(out_dir / "summary.json", summary)
    manifest = {
        "version": __version__,
        "config": config_to_dict(config),
        "status": "complete" if summary["ok"] else "failed",
        "duration_s": time.time() - started,
    }
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if not summary["ok"]:
        failed = ", ".join(c["name"] for c in summary["checks"] if not c["ok"])
        raise ConfigError(f"verification failed: {failed}")
    return ExperimentResult(out_dir=out_dir, traces=(), manifest_path=manifest_path,
                            trace_path=None, summary=summary)


def run_experiment(config: RunConfig):
    """Run one configured experiment end to end; returns paths and summary."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.experiment == "verify":
        return _run_verify_experiment(config, out_dir)
    streams = seed_streams(config.seed)
    started = time.time()

    fixtures = {}
    if config.experiment.startswith("mixture"):
        model, prior, extras = _build_mixture(config)
    elif config.experiment == "center":
        model, prior, extras = _build_center(config, streams, out_dir)
        fixtures = extras.get("fixtures", {})
    elif config.experiment == "permeability":
        model, prior, extras = _build_permeability(config, streams, out_dir)
        fixtures = extras.get("fixtures", {})
    else:
        raise ConfigError(f"unknown experiment {config.experiment!r}")

    manifest = {
        "version": __version__,
        "config": config_to_dict(config),
        "streams": streams.state_keys(),
        "fixtures": fixtures,
        "status": "running",
    }
    manifest_path = out_dir / MANIFEST_NAME
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    schedule = beta_from_delta(config.delta)
    start = None if config.start is None else np.asarray(config.start, dtype=float)
    try:
        if config.method == "pcnld":
            trace = run_single_chain(
                model, prior, schedule, config.tau1, config.n_iter,
                rng=streams.generator("chain1"), start=start,
            )
            traces = (trace,)
        else:
            ladder = TemperatureLadder(config.tau1, config.tau2)
            if config.method == "m-repcnld":
                policy = SwapPolicy(
                    correction_enabled=True,
                    variance_ratio=config.variance_ratio,
                    obs_count=model.posterior.n_obs,
                )
            else:
                policy = SwapPolicy()
            traces = run_replica_exchange(
                model, prior, schedule, ladder, policy, config.n_iter,
                streams=streams, start1=start, start2=start,
                attempt_probability=config.swap_attempt_prob,
            )
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        manifest["duration_s"] = time.time() - started
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        raise

    trace_path = out_dir / TRACE_NAME
    trace_digest = write_trace_csv(trace_path, traces)

    summary = {
        "experiment": config.experiment,
        "method": config.method,
        "n_iter": config.n_iter,
        "burn_in": config.burn_in,
        "seed": config.seed,
        "swap_attempts": traces[0].swap_attempts,
        "swap_accepts": traces[0].swap_accepts,
        "swap_rate": traces[0].swap_rate,
    }
    retained = traces[0].positions[config.burn_in:]
    energy_acfs = {
        f"chain{t.chain_id}": acf(t.energies[config.burn_in:], min(500, (config.n_iter - config.burn_in) // 4))
        for t in traces
    }
    save_acf_csv(out_dir / "acf.csv", energy_acfs)
    report = ess(retained)
    save_ess_csv(out_dir / "ess.csv", report)
    summary["ess"] = report.ess.tolist()
    summary["iact"] = report.rho.tolist()
    energy_report = ess(traces[0].energies[config.burn_in:])
    summary["energy_iact"] = float(energy_report.rho[0])

    if config.experiment.startswith("mixture"):
        summary.update(_mixture_summary(config, traces, extras, out_dir))
    elif config.experiment == "permeability":
        summary.update(_field_summary(config, traces, extras, out_dir))

    save_summary_json(out_dir / "summary.json", summary)
    manifest["status"] = "complete"
    manifest["duration_s"] = time.time() - started
    manifest["trace_sha256"] = trace_digest
    manifest["artifacts"] = sorted(p.name for p in out_dir.iterdir() if p.is_file())
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)

    return ExperimentResult(
        out_dir=out_dir, traces=traces, manifest_path=manifest_path,
        trace_path=trace_path, summary=summary,
    )


def rerun_from_manifest(manifest_path, output_dir=None):
    """Re-execute a run from its manifest's resolved config echo."""
    from .config import config_from_dict

    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = dict(manifest["config"])
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    config = config_from_dict(raw)
    return run_experiment(config)
