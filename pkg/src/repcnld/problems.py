"""The two parabolic inverse problems: pollution-source center identification
and log-permeability identification, plus the posterior target model that
wires a problem to its Gaussian prior.

Synthetic data is never generated with an inference-grade solver: the center
problem takes its observation from the closed-form solution, and the
permeability problem generates data on a strictly finer grid than any
inference fidelity.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .pde import (
    FidelityPair,
    GridSpec,
    ParabolicProblem,
    gradient_loglik,
    solve_forward,
)
from .targets import BayesianPosterior, Fidelity, ModelEval, TargetModel

FIXTURE_VERSION = 1


class InitialCenterProblem(ParabolicProblem):
    """Recover the center of a Gaussian pollution source from one late-time reading.

    The manufactured solution is  u(x, t; xi) = u0(x; xi) exp(-t)  with
    u0 a Gaussian bump of amplitude q / (2 pi l1 l2) centered at xi, so the
    source and Dirichlet data are matched to it:

        f = -exp(-t) (u0 + lap(u0)),      g = u0 exp(-t) on the boundary.

    kappa is identically one, so the per-step matrix is xi-independent and its
    factorization is shared by the whole run.
    """

    kind = "center"
    gradient_mode = "load"
    matrix_constant = True

    def __init__(self, widths, source_strength, sensors, obs_times, sigma_obs,
                 final_time, fidelities, data=None):
        super().__init__(final_time, sensors, obs_times, sigma_obs, fidelities, data)
        self.widths = (float(widths[0]), float(widths[1]))
        self.source_strength = float(source_strength)

    @property
    def n_params(self):
        return 2

    @property
    def amplitude(self):
        l1, l2 = self.widths
        return self.source_strength / (2.0 * math.pi * l1 * l2)

    def bump(self, points, xi):
        l1, l2 = self.widths
        dx = (points[:, 0] - xi[0]) / l1
        dy = (points[:, 1] - xi[1]) / l2
        return self.amplitude * np.exp(-0.5 * (dx * dx + dy * dy))

    def _curvature(self, points, xi):
        # lap(u0) = u0 * R with R collecting the second-derivative factors.
        l1, l2 = self.widths
        dx = points[:, 0] - xi[0]
        dy = points[:, 1] - xi[1]
        return (dx * dx / l1 ** 4 - 1.0 / l1 ** 2) + (dy * dy / l2 ** 4 - 1.0 / l2 ** 2)

    def kappa_elements(self, mesh, xi):
        return np.ones(mesh.elements.shape[0])

    def initial_state(self, mesh, xi):
        return self.bump(mesh.nodes, xi)

    def source_nodes(self, mesh, times, xi):
        profile = self.bump(mesh.nodes, xi) * (1.0 + self._curvature(mesh.nodes, xi))
        return -np.exp(-np.asarray(times))[:, None] * profile[None, :]

    def dirichlet_values(self, mesh, times, xi):
        trace = self.bump(mesh.nodes[mesh.boundary], xi)
        return np.exp(-np.asarray(times))[:, None] * trace[None, :]

    def _d_bump(self, points, xi):
        """du0/dxi_i at the points, shape (2, n_points)."""
        u0 = self.bump(points, xi)
        l1, l2 = self.widths
        return np.stack([
            u0 * (points[:, 0] - xi[0]) / l1 ** 2,
            u0 * (points[:, 1] - xi[1]) / l2 ** 2,
        ])

    def d_initial_state(self, mesh, xi):
        return self._d_bump(mesh.nodes, xi)

    def d_source_nodes(self, mesh, times, xi):
        points = mesh.nodes
        u0 = self.bump(points, xi)
        curv = self._curvature(points, xi)
        du0 = self._d_bump(points, xi)
        l1, l2 = self.widths
        d_curv = np.stack([
            -2.0 * (points[:, 0] - xi[0]) / l1 ** 4,
            -2.0 * (points[:, 1] - xi[1]) / l2 ** 4,
        ])
        d_profile = du0 * (1.0 + curv)[None, :] + u0[None, :] * d_curv
        decay = np.exp(-np.asarray(times))
        return -decay[None, :, None] * d_profile[:, None, :]

    def d_dirichlet_values(self, mesh, times, xi):
        d_trace = self._d_bump(mesh.nodes[mesh.boundary], xi)
        decay = np.exp(-np.asarray(times))
        return decay[None, :, None] * d_trace[:, None, :]

    def truth_observation(self):
        """Closed-form sensor value u(x_o, T) = amplitude * e^{-1} * e^{-T} for any
        center on the unit-misfit ellipse around the sensor."""
        return self.amplitude * math.exp(-1.0) * math.exp(-self.final_time)

    def solution_ellipse(self, n_points=720):
        """Points of the solution set {u0(x_o; xi) = truth}, an ellipse around the sensor."""
        l1, l2 = self.widths
        cx, cy = self.sensors[0]
        theta = np.linspace(0.0, 2.0 * math.pi, n_points, endpoint=False)
        return np.column_stack([
            cx + math.sqrt(2.0) * l1 * np.cos(theta),
            cy + math.sqrt(2.0) * l2 * np.sin(theta),
        ])


@dataclass(frozen=True)
class CenterConfig:
    widths: tuple = (0.1, 0.2)
    source_strength: float = 1.0
    sensor: tuple = (0.5, 0.3)
    sigma_obs: float = 0.1
    final_time: float = 0.1
    mesh_high: int = 40
    dt_high: float = 0.001
    mesh_low: int = 20
    dt_low: float = 0.001
    add_data_noise: bool = True


def build_initial_center_problem(config=None, rng=None):
    """Initial-center problem with synthetic data from the truth constraint.

    The observation is the closed-form value of the manufactured solution at
    the sensor (any center on the solution ellipse produces it), plus
    N(0, sigma^2) noise unless ``add_data_noise`` is off (the no-noise variant
    is used by the ellipse-geometry checks).
    """
    config = config or CenterConfig()
    problem = InitialCenterProblem(
        widths=config.widths,
        source_strength=config.source_strength,
        sensors=[config.sensor],
        obs_times=[config.final_time],
        sigma_obs=config.sigma_obs,
        final_time=config.final_time,
        fidelities=FidelityPair(
            high=GridSpec(config.mesh_high, config.dt_high),
            low=GridSpec(config.mesh_low, config.dt_low),
        ),
    )
    data = np.array([problem.truth_observation()])
    if config.add_data_noise:
        if rng is None:
            raise ConfigError("data noise requested but no generator supplied")
        data = data + config.sigma_obs * rng.standard_normal(data.shape)
    problem.data = data
    return problem


class PermeabilityProblem(ParabolicProblem):
    """Recover a log-permeability field, parameterized by a truncated KL basis,
    from pressure readings at injection wells.

    No-flow boundary, constant initial pressure, and a fixed array of Gaussian
    well sources.  The stiffness matrix depends on xi through
    kappa = exp(mean + sum_i sqrt(lambda_i) phi_i xi_i), so the gradient
    contracts the costate against re-weighted stiffness applications.
    """

    kind = "permeability"
    gradient_mode = "stiffness"
    matrix_constant = False

    def __init__(self, basis, wells, rates, well_width, initial_value, sigma_obs,
                 obs_times, final_time, fidelities, data=None):
        super().__init__(final_time, wells, obs_times, sigma_obs, fidelities, data)
        self.basis = basis
        self.rates = np.asarray(rates, dtype=float)
        if self.rates.size != self.sensors.shape[0]:
            raise ConfigError("one production rate per well is required")
        self.well_width = float(well_width)
        self.initial_value = float(initial_value)
        self._mode_cache = {}

    @property
    def n_params(self):
        return self.basis.truncation

    def _modes_at_centroids(self, mesh):
        key = mesh.n_cells
        if key not in self._mode_cache:
            mean_vals, modes = self.basis.interpolate_at(mesh.centroids)
            self._mode_cache[key] = (mean_vals, modes)
        return self._mode_cache[key]

    def kappa_elements(self, mesh, xi):
        mean_vals, modes = self._modes_at_centroids(mesh)
        log_k = mean_vals + modes @ (np.sqrt(self.basis.eigenvalues) * xi)
        return np.exp(log_k)

    def kappa_weight_fields(self, mesh):
        _, modes = self._modes_at_centroids(mesh)
        return modes * np.sqrt(self.basis.eigenvalues)[None, :]

    def initial_state(self, mesh, xi):
        return np.full(mesh.n_nodes, self.initial_value)

    def source_nodes(self, mesh, times, xi):
        lw2 = self.well_width ** 2
        diff = mesh.nodes[None, :, :] - self.sensors[:, None, :]
        sq = np.sum(diff * diff, axis=-1)
        profile = (self.rates[:, None] / (2.0 * math.pi * lw2)) * np.exp(-0.5 * sq / lw2)
        profile = profile.sum(axis=0)
        return np.broadcast_to(profile, (len(times), mesh.n_nodes)).copy()


@dataclass(frozen=True)
class PermeabilityConfig:
    variance: float = 1.0
    smoothness: float = 0.2
    length_scales: tuple = (1.0, 0.5)
    energy_target: float = 0.86
    kl_grid: tuple = (40, 40)
    wells: tuple = None            # defaults to a 3x3 interior lattice
    rate: float = 1.5
    well_width: float = 0.05
    initial_value: float = 4.0
    sigma_obs: float = 0.1
    obs_times: tuple = (0.01, 0.04, 0.06, 0.08, 0.10)
    final_time: float = 0.1
    mesh: int = 30
    dt_high: float = 0.002
    dt_low: float = 0.005
    data_mesh: int = 60
    data_steps: int = 50
    add_data_noise: bool = True

    def well_array(self):
        if self.wells is not None:
            return np.atleast_2d(np.asarray(self.wells, dtype=float))
        ticks = np.array([0.25, 0.5, 0.75])
        gx, gy = np.meshgrid(ticks, ticks, indexing="xy")
        return np.column_stack([gx.ravel(), gy.ravel()])


def build_permeability_problem(config, basis, rng, truth_xi=None):
    """Permeability problem with data generated on a strictly finer grid.

    The truth coefficient vector is a prior draw (standard normal KL weights)
    unless supplied; well pressures are collected at the measurement times and
    perturbed with observation noise.
    """
    wells = config.well_array()
    data_dt = config.final_time / config.data_steps
    if config.data_mesh <= config.mesh:
        raise ConfigError(
            f"data-generation mesh {config.data_mesh} must be finer than the "
            f"inference mesh {config.mesh} (inverse-crime guard)"
        )
    problem = PermeabilityProblem(
        basis=basis,
        wells=wells,
        rates=np.full(wells.shape[0], config.rate),
        well_width=config.well_width,
        initial_value=config.initial_value,
        sigma_obs=config.sigma_obs,
        obs_times=config.obs_times,
        final_time=config.final_time,
        fidelities=FidelityPair(
            high=GridSpec(config.mesh, config.dt_high),
            low=GridSpec(config.mesh, config.dt_low),
        ),
    )
    if truth_xi is None:
        truth_xi = rng.standard_normal(basis.truncation)
    truth_xi = np.asarray(truth_xi, dtype=float)
    clean = solve_forward(problem, truth_xi, GridSpec(config.data_mesh, data_dt)).observed
    data = clean.copy()
    if config.add_data_noise:
        data = data + config.sigma_obs * rng.standard_normal(data.shape)
    problem.data = data
    problem.truth_xi = truth_xi
    return problem


class PdePosterior(TargetModel):
    """Bayesian posterior target backed by the parabolic solver.

    ``evaluate`` performs one forward solve (energy) and one costate solve
    (gradient) at the requested fidelity; the forward solution rides along as
    the evaluation's aux payload so replica exchange can swap it between
    chains.
    """

    def __init__(self, problem, prior):
        if prior.dim != problem.n_params:
            raise ConfigError("prior dimension does not match the problem parameterization")
        if problem.data is None:
            raise ConfigError("posterior requires a problem with generated data")
        self.problem = problem
        self.prior = prior
        self.posterior = BayesianPosterior(
            forward=lambda xi, fidelity: solve_forward(problem, xi, fidelity).observed,
            data=problem.data,
            noise_sd=problem.sigma_obs,
            prior=prior,
        )

    @property
    def dim(self):
        return self.problem.n_params

    def _potential(self, residual):
        s2 = self.problem.sigma_obs ** 2
        n_d = residual.size
        return 0.5 * n_d * math.log(2.0 * math.pi * s2) + 0.5 * float(residual @ residual) / s2

    def evaluate(self, xi, fidelity=Fidelity.HIGH):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        fwd = solve_forward(self.problem, xi, fidelity)
        energy = self.prior.quad_form(xi) + self._potential(fwd.residual)
        grad = gradient_loglik(self.problem, xi, fidelity, forward=fwd)
        return ModelEval(energy=energy, grad_potential=grad, aux=fwd)


def estimate_fidelity_variance(problem, prior, n_draws, rng):
    """Offline estimate of the low-fidelity forward-error variance sigma_tilde^2:
    the pooled sample variance of componentwise G - G_tilde over prior draws.

    This is a documented helper for choosing the multi-variance ratio; it is
    never applied automatically.
    """
    diffs = []
    for _ in range(n_draws):
        xi = prior.sample(rng.standard_normal(prior.dim))
        g_high = solve_forward(problem, xi, Fidelity.HIGH).observed
        g_low = solve_forward(problem, xi, Fidelity.LOW).observed
        diffs.append(g_high - g_low)
    return float(np.var(np.concatenate(diffs)))


def problem_fixture(problem, seed=None):
    """Serializable description of a generated problem (mesh shapes, time grid,
    sensors, data vector, generation seed) so runs are exactly repeatable."""
    fixture = {
        "version": FIXTURE_VERSION,
        "kind": problem.kind,
        "final_time": problem.final_time,
        "sigma_obs": problem.sigma_obs,
        "obs_times": list(problem.obs_times),
        "sensors": problem.sensors.tolist(),
        "fidelities": {
            "high": {"n_cells": problem.fidelities.high.n_cells, "dt": problem.fidelities.high.dt},
            "low": {"n_cells": problem.fidelities.low.n_cells, "dt": problem.fidelities.low.dt},
        },
        "data": problem.data.tolist() if problem.data is not None else None,
        "seed": seed,
    }
    if problem.kind == "center":
        fixture["widths"] = list(problem.widths)
        fixture["source_strength"] = problem.source_strength
    elif problem.kind == "permeability":
        fixture["rates"] = problem.rates.tolist()
        fixture["well_width"] = problem.well_width
        fixture["initial_value"] = problem.initial_value
        fixture["truncation"] = problem.basis.truncation
        if hasattr(problem, "truth_xi"):
            fixture["truth_xi"] = problem.truth_xi.tolist()
    return fixture


def save_fixture(path, problem, seed=None):
    fixture = problem_fixture(problem, seed)
    text = json.dumps(fixture, indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
