"""Structured-grid parabolic solver with backward Euler stepping and the
discrete-adjoint gradient of the data-misfit potential.

The forward model is div(kappa grad u) + f on the unit square, discretized
with bilinear elements in space and backward Euler in time.  Observations are
bilinear interpolations of the state at sensor points and measurement times.
Writing all time levels as one block-bidiagonal system A(xi) v = F(xi) with
observations G = C v, the gradient of

    psi(xi) = (n_d/2) log(2 pi sigma^2) + ||d - G(xi)||^2 / (2 sigma^2)

is (1/sigma^2) J^T r with r = G - d, assembled row-by-row as

    [J^T r]_i = [A_i'(xi) v - F_i'(xi)] . z,      A(xi)^T z = -C^T r,

so one forward sweep and one transposed (backward-in-time) sweep replace n
sensitivity solves.  The n derivative contractions are evaluated as vectorized
array reductions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import ConfigError, SolveError
from .targets import Fidelity

logger = logging.getLogger(__name__)

# Interior systems at or below this many unknowns use a precomputed dense
# inverse when the matrix does not depend on xi; larger systems keep a sparse
# LU factorization.
DENSE_SOLVE_LIMIT = 2700


def _local_stiffness():
    # Bilinear element on a square; independent of h in two dimensions.
    return np.array(
        [[4.0, -1.0, -2.0, -1.0],
         [-1.0, 4.0, -1.0, -2.0],
         [-2.0, -1.0, 4.0, -1.0],
         [-1.0, -2.0, -1.0, 4.0]]) / 6.0


def _local_mass(h):
    return (h * h / 36.0) * np.array(
        [[4.0, 2.0, 1.0, 2.0],
         [2.0, 4.0, 2.0, 1.0],
         [1.0, 2.0, 4.0, 2.0],
         [2.0, 1.0, 2.0, 4.0]])


_K_LOCAL = _local_stiffness()


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform bilinear-element mesh of the unit square."""

    n_cells: int
    nodes: np.ndarray        # (N, 2)
    elements: np.ndarray     # (n_cells^2, 4), counterclockwise corners
    boundary: np.ndarray     # sorted boundary node indices
    interior: np.ndarray
    centroids: np.ndarray    # (n_cells^2, 2) element centers

    @classmethod
    def unit_square(cls, n_cells):
        n_cells = int(n_cells)
        if n_cells < 2:
            raise ConfigError(f"mesh needs at least 2 cells per side, got {n_cells}")
        side = n_cells + 1
        coords = np.linspace(0.0, 1.0, side)
        xx, yy = np.meshgrid(coords, coords, indexing="xy")
        nodes = np.column_stack([xx.ravel(), yy.ravel()])
        ix, iy = np.meshgrid(np.arange(n_cells), np.arange(n_cells), indexing="xy")
        base = (ix + iy * side).ravel()
        elements = np.column_stack([base, base + 1, base + side + 1, base + side])
        on_edge = (
            np.isclose(nodes[:, 0], 0.0) | np.isclose(nodes[:, 0], 1.0)
            | np.isclose(nodes[:, 1], 0.0) | np.isclose(nodes[:, 1], 1.0)
        )
        boundary = np.flatnonzero(on_edge)
        interior = np.flatnonzero(~on_edge)
        centroids = nodes[elements].mean(axis=1)
        return cls(n_cells, nodes, elements, boundary, interior, centroids)

    @property
    def h(self):
        return 1.0 / self.n_cells

    @property
    def n_nodes(self):
        return self.nodes.shape[0]


def assemble_mass(mesh):
    return _assemble(mesh, _local_mass(mesh.h), None)


def assemble_stiffness(mesh, kappa_elements=None):
    """Stiffness matrix with a piecewise-constant (per element) coefficient."""
    return _assemble(mesh, _K_LOCAL, kappa_elements)


def _assemble(mesh, local, coeff):
    n_elem = mesh.elements.shape[0]
    if coeff is None:
        data = np.broadcast_to(local, (n_elem, 4, 4))
    else:
        coeff = np.asarray(coeff, dtype=float)
        if coeff.shape != (n_elem,):
            raise ConfigError(f"element coefficient must have shape ({n_elem},), got {coeff.shape}")
        data = coeff[:, None, None] * local
    rows = np.repeat(mesh.elements, 4, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 4)).ravel()
    mat = sp.coo_matrix((data.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    return mat.tocsr()


def observation_matrix(mesh, sensors):
    """Sparse bilinear-interpolation rows, one per sensor point."""
    sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
    h = mesh.h
    side = mesh.n_cells + 1
    rows, cols, vals = [], [], []
    for j, (x, y) in enumerate(sensors):
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ConfigError(f"sensor {j} at ({x}, {y}) lies outside the unit square")
        ix = min(int(x / h), mesh.n_cells - 1)
        iy = min(int(y / h), mesh.n_cells - 1)
        sx = x / h - ix
        sy = y / h - iy
        base = ix + iy * side
        nodes = [base, base + 1, base + side + 1, base + side]
        weights = [(1 - sx) * (1 - sy), sx * (1 - sy), sx * sy, (1 - sx) * sy]
        for node, w in zip(nodes, weights):
            if w != 0.0:
                rows.append(j)
                cols.append(node)
                vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(sensors.shape[0], mesh.n_nodes))


@dataclass(frozen=True)
class GridSpec:
    """One fidelity's discretization: cells per side and time step."""

    n_cells: int
    dt: float

    def __post_init__(self):
        if self.n_cells < 2:
            raise ConfigError(f"grid needs at least 2 cells per side, got {self.n_cells}")
        if self.dt <= 0:
            raise ConfigError(f"time step must be positive, got {self.dt}")


@dataclass(frozen=True)
class FidelityPair:
    """High/low solver resolutions; low must be coarser in space or time."""

    high: GridSpec
    low: GridSpec

    def __post_init__(self):
        coarser_space = self.low.n_cells < self.high.n_cells
        coarser_time = self.low.dt > self.high.dt
        finer_somewhere = self.low.n_cells > self.high.n_cells or self.low.dt < self.high.dt
        if not (coarser_space or coarser_time) or finer_somewhere:
            raise ConfigError(
                "low fidelity must be coarser than high in at least one of space/time "
                f"and finer in neither, got high={self.high}, low={self.low}"
            )

    def spec(self, fidelity):
        return self.high if fidelity == Fidelity.HIGH else self.low


class ParabolicProblem:
    """Base class for the parabolic inverse problems.

    Subclasses provide the coefficient field, initial state, source, and
    boundary data as functions of the unknown vector xi, plus the analytic
    derivative hooks used by the adjoint gradient.  Instances are immutable
    after data generation; the per-fidelity structural caches they carry are
    value-deterministic.
    """

    kind = "generic"
    gradient_mode = None         # "load", "stiffness", or None (no gradient)
    matrix_constant = False      # True when kappa does not depend on xi

    def __init__(self, final_time, sensors, obs_times, sigma_obs, fidelities, data=None):
        if final_time <= 0:
            raise ConfigError(f"final time must be positive, got {final_time}")
        if sigma_obs <= 0:
            raise ConfigError(f"observation noise must be positive, got {sigma_obs}")
        self.final_time = float(final_time)
        self.sensors = np.atleast_2d(np.asarray(sensors, dtype=float))
        self.obs_times = tuple(float(t) for t in obs_times)
        if any(t <= 0 or t > self.final_time + 1e-12 for t in self.obs_times):
            raise ConfigError(f"observation times must lie in (0, T], got {self.obs_times}")
        self.sigma_obs = float(sigma_obs)
        self.fidelities = fidelities
        self.data = None if data is None else np.asarray(data, dtype=float)
        self._systems = {}

    @property
    def n_obs(self):
        return self.sensors.shape[0] * len(self.obs_times)

    @property
    def n_params(self):
        raise NotImplementedError

    # -- physics hooks -------------------------------------------------------
    def kappa_elements(self, mesh, xi):
        raise NotImplementedError

    def initial_state(self, mesh, xi):
        raise NotImplementedError

    def source_nodes(self, mesh, times, xi):
        """Source values at the nodes for each requested time, shape (n_times, N)."""
        raise NotImplementedError

    def dirichlet_values(self, mesh, times, xi):
        """Boundary values for each time, shape (n_times, n_bnd); None for no-flow."""
        return None

    # -- derivative hooks (adjoint gradient) ---------------------------------
    def d_initial_state(self, mesh, xi):
        raise NotImplementedError

    def d_source_nodes(self, mesh, times, xi):
        raise NotImplementedError

    def d_dirichlet_values(self, mesh, times, xi):
        return None

    def kappa_weight_fields(self, mesh):
        """d(log kappa)/d xi_i at element centers, shape (n_elem, n_params)."""
        raise NotImplementedError


@dataclass
class _FidelitySystem:
    """Structural, xi-independent parts shared by all solves at one fidelity."""

    spec: GridSpec
    mesh: StructuredMesh
    n_steps: int
    times: np.ndarray
    mass: sp.csr_matrix
    mass_ii: sp.csr_matrix
    mass_over_dt: sp.csr_matrix
    mass_ii_over_dt: sp.csr_matrix
    obs: sp.csr_matrix
    obs_steps: tuple
    uses_dirichlet: bool = False
    solver: Optional[object] = None      # cached when the matrix is xi-independent
    matrix: Optional[sp.csr_matrix] = None
    a_ib: Optional[sp.csr_matrix] = None
    kappa: Optional[np.ndarray] = None


class _DenseSolver:
    def __init__(self, matrix):
        self.inverse = np.linalg.inv(matrix.toarray())

    def solve(self, rhs, transpose=False):
        op = self.inverse.T if transpose else self.inverse
        return op @ rhs


class _SparseSolver:
    def __init__(self, matrix):
        self.lu = spla.splu(matrix.tocsc())

    def solve(self, rhs, transpose=False):
        return self.lu.solve(np.asarray(rhs, dtype=float), trans="T" if transpose else "N")


def _resolve_spec(problem, fidelity):
    if isinstance(fidelity, GridSpec):
        return fidelity
    return problem.fidelities.spec(fidelity)


def _build_system(problem, spec):
    mesh = StructuredMesh.unit_square(spec.n_cells)
    n_steps = int(round(problem.final_time / spec.dt))
    if n_steps < 1 or abs(n_steps * spec.dt - problem.final_time) > 1e-9 * problem.final_time:
        raise ConfigError(
            f"time step {spec.dt} does not divide the final time {problem.final_time}"
        )
    times = np.arange(n_steps + 1) * spec.dt
    mass = assemble_mass(mesh)
    obs = observation_matrix(mesh, problem.sensors)
    uses_dirichlet = problem.dirichlet_values(mesh, times[:1], np.zeros(problem.n_params)) is not None
    if uses_dirichlet and np.abs(obs[:, mesh.boundary]).sum() > 1e-14:
        raise ConfigError(
            "sensors interpolate from Dirichlet boundary nodes; move them into the interior"
        )
    obs_steps = []
    for t in problem.obs_times:
        k = int(round(t / spec.dt))
        snap = abs(k * spec.dt - t)
        if snap > 1e-12:
            logger.info("observation time %.6g snapped to step %d (distance %.3g)", t, k, snap)
        if not 1 <= k <= n_steps:
            raise ConfigError(f"observation time {t} falls outside the time grid")
        obs_steps.append(k)
    interior = mesh.interior if uses_dirichlet else np.arange(mesh.n_nodes)
    mass_ii = mass[interior][:, interior].tocsr()
    return _FidelitySystem(
        spec=spec, mesh=mesh, n_steps=n_steps, times=times, mass=mass,
        mass_ii=mass_ii, mass_over_dt=(mass / spec.dt).tocsr(),
        mass_ii_over_dt=(mass_ii / spec.dt).tocsr(),
        obs=obs, obs_steps=tuple(obs_steps), uses_dirichlet=uses_dirichlet,
    )


def _get_system(problem, spec):
    key = (spec.n_cells, spec.dt)
    if key not in problem._systems:
        problem._systems[key] = _build_system(problem, spec)
    return problem._systems[key]


def _make_operator(problem, system, xi):
    """The per-step matrix M/dt + K(kappa) with its interior solver."""
    mesh = system.mesh
    if problem.matrix_constant and system.solver is not None:
        return system.matrix, system.a_ib, system.solver, system.kappa
    kappa = np.asarray(problem.kappa_elements(mesh, xi), dtype=float)
    matrix = (system.mass / system.spec.dt + assemble_stiffness(mesh, kappa)).tocsr()
    if system.uses_dirichlet:
        interior, boundary = mesh.interior, mesh.boundary
        a_ii = matrix[interior][:, interior]
        a_ib = matrix[interior][:, boundary].tocsr()
    else:
        a_ii = matrix
        a_ib = None
    if a_ii.shape[0] <= DENSE_SOLVE_LIMIT and problem.matrix_constant:
        solver = _DenseSolver(a_ii)
    else:
        solver = _SparseSolver(a_ii)
    if problem.matrix_constant:
        system.matrix, system.a_ib, system.solver, system.kappa = matrix, a_ib, solver, kappa
    return matrix, a_ib, solver, kappa


@dataclass
class Assembly:
    """Per-step system, load sequence, and initial vector for one (xi, fidelity)."""

    mesh: StructuredMesh
    spec: GridSpec
    n_steps: int
    times: np.ndarray
    mass: sp.csr_matrix
    mass_ii: sp.csr_matrix
    mass_over_dt: sp.csr_matrix
    mass_ii_over_dt: sp.csr_matrix
    matrix: sp.csr_matrix            # M/dt + K(kappa), full node set
    a_ib: Optional[sp.csr_matrix]
    solver: object
    kappa: np.ndarray
    u0: np.ndarray                   # (N,)
    loads: np.ndarray                # (n_steps, N): M f(t_k) for k = 1..n_steps
    dirichlet: Optional[np.ndarray]  # (n_steps, n_bnd) boundary values at t_1..t_T
    interior: np.ndarray
    boundary: np.ndarray
    obs: sp.csr_matrix
    obs_steps: tuple

    @property
    def uses_dirichlet(self):
        return self.dirichlet is not None


def assemble(problem, xi, fidelity=Fidelity.HIGH):
    """Assemble the backward Euler system for one unknown vector and fidelity."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.size != problem.n_params:
        raise ConfigError(f"xi has length {xi.size}, problem expects {problem.n_params}")
    spec = _resolve_spec(problem, fidelity)
    system = _get_system(problem, spec)
    matrix, a_ib, solver, kappa = _make_operator(problem, system, xi)
    mesh = system.mesh
    step_times = system.times[1:]
    sources = np.asarray(problem.source_nodes(mesh, step_times, xi), dtype=float)
    loads = (system.mass @ sources.T).T
    dirichlet = problem.dirichlet_values(mesh, step_times, xi)
    if dirichlet is not None:
        dirichlet = np.asarray(dirichlet, dtype=float)
    u0 = np.asarray(problem.initial_state(mesh, xi), dtype=float)
    interior = mesh.interior if system.uses_dirichlet else np.arange(mesh.n_nodes)
    boundary = mesh.boundary if system.uses_dirichlet else np.array([], dtype=int)
    return Assembly(
        mesh=mesh, spec=spec, n_steps=system.n_steps, times=system.times,
        mass=system.mass, mass_ii=system.mass_ii,
        mass_over_dt=system.mass_over_dt, mass_ii_over_dt=system.mass_ii_over_dt,
        matrix=matrix, a_ib=a_ib,
        solver=solver, kappa=kappa, u0=u0, loads=loads, dirichlet=dirichlet,
        interior=interior, boundary=boundary, obs=system.obs, obs_steps=system.obs_steps,
    )


@dataclass
class ForwardSolution:
    """All time levels of one forward solve plus the observed vector."""

    states: np.ndarray               # (n_steps + 1, N)
    observed: np.ndarray             # (n_d,), time-major blocks of sensors
    residual: Optional[np.ndarray]   # observed - data, None without data
    assembly: Assembly

    def observe(self, states=None):
        """Apply the observation operator to stored (or supplied) states."""
        states = self.states if states is None else states
        asm = self.assembly
        return np.concatenate([asm.obs @ states[k] for k in asm.obs_steps])


def solve_forward(problem, xi, fidelity=Fidelity.HIGH, assembly=None):
    """Backward Euler sweep (M/dt + K) u^{k+1} = (M/dt) u^k + M f^{k+1}."""
    asm = assembly if assembly is not None else assemble(problem, xi, fidelity)
    n_nodes = asm.mesh.n_nodes
    states = np.empty((asm.n_steps + 1, n_nodes))
    u = asm.u0.copy()
    states[0] = u
    mass_over_dt = asm.mass_over_dt
    for k in range(1, asm.n_steps + 1):
        rhs = mass_over_dt.dot(u) + asm.loads[k - 1]
        if asm.uses_dirichlet:
            g = asm.dirichlet[k - 1]
            rhs_i = rhs[asm.interior] - asm.a_ib.dot(g)
            u = np.empty(n_nodes)
            u[asm.interior] = asm.solver.solve(rhs_i)
            u[asm.boundary] = g
        else:
            u = asm.solver.solve(rhs)
        # Sum-based finiteness probe: any inf/nan entry poisons the sum.
        if not np.isfinite(u.sum()):
            raise SolveError(f"forward state became non-finite at step {k}", step=k)
        states[k] = u
    sol = ForwardSolution(states=states, observed=None, residual=None, assembly=asm)
    sol.observed = sol.observe()
    if problem.data is not None:
        if problem.data.size != sol.observed.size:
            raise ConfigError(
                f"data has {problem.data.size} entries, observation operator yields {sol.observed.size}"
            )
        sol.residual = sol.observed - problem.data
    return sol


def solve_costate(problem, xi, fidelity=Fidelity.HIGH, residual=None, forward=None):
    """Transposed backward-in-time sweep A^T z = -C^T r.

    Returns the costate at every time level k = 1..n_steps as an
    (n_steps, N) array with zeros on Dirichlet boundary nodes.
    """
    if forward is None and residual is None:
        forward = solve_forward(problem, xi, fidelity)
    asm = forward.assembly if forward is not None else assemble(problem, xi, fidelity)
    if residual is None:
        residual = forward.residual
    if residual is None:
        raise ConfigError("costate solve needs a residual; the problem carries no data")
    residual = np.asarray(residual, dtype=float)
    n_sensors = asm.obs.shape[0]
    dt = asm.spec.dt

    # -C^T r accumulated per time level (several observation times may share one).
    drive = {}
    for j, k in enumerate(asm.obs_steps):
        block = residual[j * n_sensors:(j + 1) * n_sensors]
        drive[k] = drive.get(k, 0.0) + (asm.obs.T @ block)

    n_nodes = asm.mesh.n_nodes
    costate = np.zeros((asm.n_steps, n_nodes))
    z_next = np.zeros(asm.interior.size)
    mass_ii_over_dt = asm.mass_ii_over_dt
    for k in range(asm.n_steps, 0, -1):
        rhs = mass_ii_over_dt.dot(z_next)
        if k in drive:
            rhs = rhs - drive[k][asm.interior]
        z = asm.solver.solve(rhs, transpose=True)
        if not np.isfinite(z.sum()):
            raise SolveError(f"costate became non-finite at step {k}", step=k)
        costate[k - 1, asm.interior] = z
        z_next = z
    return costate


def gradient_loglik(problem, xi, fidelity=Fidelity.HIGH, forward=None):
    """Gradient of the data-misfit potential, (1/sigma^2) J^T r, via the costate."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if forward is None:
        forward = solve_forward(problem, xi, fidelity)
    asm = forward.assembly
    costate = solve_costate(problem, xi, fidelity, forward=forward)
    if problem.gradient_mode == "stiffness":
        jt_r = _gradient_stiffness(problem, asm, forward.states, costate)
    elif problem.gradient_mode == "load":
        jt_r = _gradient_load(problem, xi, asm, costate)
    else:
        raise ConfigError(f"problem kind {problem.kind!r} does not define a gradient mode")
    return jt_r / problem.sigma_obs ** 2


def _gradient_stiffness(problem, asm, states, costate):
    # [J^T r]_i = sum_k z^k . K'_i u^k with K'_i the stiffness re-weighted by
    # kappa * d(log kappa)/d xi_i per element; one vectorized contraction.
    elements = asm.mesh.elements
    u_loc = states[1:][:, elements]          # (n_steps, n_elem, 4)
    z_loc = costate[:, elements]
    q_elem = np.einsum("kea,ab,keb->e", z_loc, _K_LOCAL, u_loc)
    weights = np.asarray(problem.kappa_weight_fields(asm.mesh), dtype=float)
    return weights.T @ (asm.kappa * q_elem)


def _gradient_load(problem, xi, asm, costate):
    # [J^T r]_i = -F'_i . z with the load derivative assembled exactly as the
    # forward load sequence: source term, initial vector, and Dirichlet lift.
    mesh = asm.mesh
    dt = asm.spec.dt
    step_times = asm.times[1:]
    d_src = np.asarray(problem.d_source_nodes(mesh, step_times, xi), dtype=float)
    d_u0 = np.asarray(problem.d_initial_state(mesh, xi), dtype=float)
    n_params = problem.n_params
    out = np.empty(n_params)
    for i in range(n_params):
        m_dsrc = (asm.mass @ d_src[i].T).T            # (n_steps, N)
        total = float(np.sum(costate * m_dsrc))
        total += float(costate[0] @ (asm.mass @ d_u0[i])) / dt
        out[i] = total
    if asm.uses_dirichlet:
        d_dir = np.asarray(problem.d_dirichlet_values(mesh, step_times, xi), dtype=float)
        n_nodes = mesh.n_nodes
        for i in range(n_params):
            ghat = np.zeros((asm.n_steps, n_nodes))
            ghat[:, asm.boundary] = d_dir[i]
            m_ghat = (asm.mass @ ghat.T).T
            a_ghat = (asm.matrix @ ghat.T).T
            # Blocks k >= 2 carry the previous step's boundary values through M/dt.
            out[i] += float(np.sum(costate[1:] * m_ghat[:-1])) / dt
            out[i] -= float(np.sum(costate * a_ghat))
    return -out


def apply_block_forward(assembly, v_blocks):
    """Apply the space-time block operator A to interior-block vectors."""
    dt = assembly.spec.dt
    a_ii = assembly.matrix[assembly.interior][:, assembly.interior]
    out = np.empty_like(v_blocks)
    for k in range(v_blocks.shape[0]):
        out[k] = a_ii @ v_blocks[k]
        if k > 0:
            out[k] -= assembly.mass_ii @ v_blocks[k - 1] / dt
    return out


def apply_block_adjoint(assembly, w_blocks):
    """Apply the transpose of the space-time block operator."""
    dt = assembly.spec.dt
    a_ii = assembly.matrix[assembly.interior][:, assembly.interior]
    out = np.empty_like(w_blocks)
    n = w_blocks.shape[0]
    for k in range(n):
        out[k] = a_ii.T @ w_blocks[k]
        if k + 1 < n:
            out[k] -= assembly.mass_ii.T @ w_blocks[k + 1] / dt
    return out
