import numpy as np
import pytest

from repcnld.exceptions import ConfigError, SolveError
from repcnld.pde import (
    FidelityPair,
    GridSpec,
    ParabolicProblem,
    StructuredMesh,
    apply_block_adjoint,
    apply_block_forward,
    assemble,
    assemble_mass,
    assemble_stiffness,
    gradient_loglik,
    observation_matrix,
    solve_costate,
    solve_forward,
)
from repcnld.priors import GaussianPrior, MaternParams, kl_decompose
from repcnld.problems import (
    CenterConfig,
    PdePosterior,
    PermeabilityConfig,
    build_initial_center_problem,
    build_permeability_problem,
    estimate_fidelity_variance,
)
from repcnld.targets import Fidelity, posterior_potential


class ConstantNoFlowProblem(ParabolicProblem):
    """kappa = 1, f = 0, u0 = c, no-flow boundary: the state must stay c."""

    kind = "constant"
    matrix_constant = True

    def __init__(self, value, spec):
        super().__init__(0.1, [[0.5, 0.5]], [0.1], 1.0, FidelityPair(spec, GridSpec(2, spec.dt)))
        self.value = value

    @property
    def n_params(self):
        return 1

    def kappa_elements(self, mesh, xi):
        return np.ones(mesh.elements.shape[0])

    def initial_state(self, mesh, xi):
        return np.full(mesh.n_nodes, self.value)

    def source_nodes(self, mesh, times, xi):
        return np.zeros((len(times), mesh.n_nodes))


class BilinearDecayProblem(ParabolicProblem):
    """Manufactured u = (1 + x)(1 + 2y) e^{-t}: spatially exact for bilinear
    elements, so the observed error isolates the backward Euler order."""

    kind = "bilinear-decay"
    matrix_constant = True

    def __init__(self, spec, final_time=0.1):
        super().__init__(final_time, [[0.5, 0.5]], [final_time], 1.0,
                         FidelityPair(spec, GridSpec(2, spec.dt)))

    @property
    def n_params(self):
        return 1

    def exact(self, points, t):
        return (1.0 + points[:, 0]) * (1.0 + 2.0 * points[:, 1]) * np.exp(-t)

    def kappa_elements(self, mesh, xi):
        return np.ones(mesh.elements.shape[0])

    def initial_state(self, mesh, xi):
        return self.exact(mesh.nodes, 0.0)

    def source_nodes(self, mesh, times, xi):
        profile = (1.0 + mesh.nodes[:, 0]) * (1.0 + 2.0 * mesh.nodes[:, 1])
        return -np.exp(-np.asarray(times))[:, None] * profile[None, :]

    def dirichlet_values(self, mesh, times, xi):
        trace = (1.0 + mesh.nodes[mesh.boundary, 0]) * (1.0 + 2.0 * mesh.nodes[mesh.boundary, 1])
        return np.exp(-np.asarray(times))[:, None] * trace[None, :]


class SineDecayProblem(ParabolicProblem):
    """Manufactured u = sin(pi x) sin(pi y) e^{-t} with homogeneous Dirichlet
    data; the spatial L2 error dominates at small time steps."""

    kind = "sine-decay"
    matrix_constant = True

    def __init__(self, spec, final_time=0.02):
        super().__init__(final_time, [[0.5, 0.5]], [final_time], 1.0,
                         FidelityPair(spec, GridSpec(2, spec.dt)))

    @property
    def n_params(self):
        return 1

    def exact(self, points, t):
        return np.sin(np.pi * points[:, 0]) * np.sin(np.pi * points[:, 1]) * np.exp(-t)

    def kappa_elements(self, mesh, xi):
        return np.ones(mesh.elements.shape[0])

    def initial_state(self, mesh, xi):
        return self.exact(mesh.nodes, 0.0)

    def source_nodes(self, mesh, times, xi):
        profile = (2.0 * np.pi ** 2 - 1.0) * np.sin(np.pi * mesh.nodes[:, 0]) * np.sin(np.pi * mesh.nodes[:, 1])
        return np.exp(-np.asarray(times))[:, None] * profile[None, :]

    def dirichlet_values(self, mesh, times, xi):
        return np.zeros((len(times), mesh.boundary.size))


class NanSourceProblem(ConstantNoFlowProblem):
    kind = "nan-source"

    def source_nodes(self, mesh, times, xi):
        out = np.zeros((len(times), mesh.n_nodes))
        out[0, 0] = np.nan
        return out


def small_center(add_noise=False, mesh=20, dt=0.005, rng=None):
    return build_initial_center_problem(
        CenterConfig(add_data_noise=add_noise, mesh_high=mesh, mesh_low=mesh // 2,
                     dt_high=dt, dt_low=dt), rng=rng)


def small_permeability(rng, mesh=16, data_mesh=32):
    params = MaternParams(1.0, 0.45, (1.0, 0.5))
    basis = kl_decompose(params, (20, 20), 0.80)
    cfg = PermeabilityConfig(mesh=mesh, data_mesh=data_mesh, data_steps=50)
    return build_permeability_problem(cfg, basis, rng), basis


class TestMeshAndAssembly:
    def test_node_count(self):
        mesh = StructuredMesh.unit_square(7)
        assert mesh.n_nodes == (7 + 1) ** 2
        assert mesh.elements.shape == (49, 4)

    def test_elements_cover_domain(self):
        mesh = StructuredMesh.unit_square(5)
        areas = np.full(mesh.elements.shape[0], mesh.h ** 2)
        assert areas.sum() == pytest.approx(1.0, rel=1e-12)

    def test_mass_matrix_total(self):
        mesh = StructuredMesh.unit_square(9)
        mass = assemble_mass(mesh)
        assert mass.sum() == pytest.approx(1.0, rel=1e-12)

    def test_stiffness_annihilates_constants(self):
        mesh = StructuredMesh.unit_square(6)
        stiff = assemble_stiffness(mesh, np.full(36, 2.5))
        assert np.abs(stiff @ np.ones(mesh.n_nodes)).max() < 1e-12

    def test_observation_weights_sum_to_one(self):
        mesh = StructuredMesh.unit_square(10)
        obs = observation_matrix(mesh, [[0.53, 0.37], [0.5, 0.3]])
        sums = np.asarray(obs.sum(axis=1)).ravel()
        assert np.allclose(sums, 1.0)


class TestSolveForward:
    def test_constant_state_preserved(self):
        problem = ConstantNoFlowProblem(3.7, GridSpec(12, 0.01))
        sol = solve_forward(problem, np.zeros(1))
        assert np.allclose(sol.states, 3.7, atol=1e-12)

    def test_zero_everything_gives_zero(self):
        problem = ConstantNoFlowProblem(0.0, GridSpec(8, 0.02))
        sol = solve_forward(problem, np.zeros(1))
        assert np.all(sol.states == 0.0)

    def test_backward_euler_first_order_in_dt(self):
        errors = []
        dts = [0.02, 0.01, 0.005]
        for dt in dts:
            problem = BilinearDecayProblem(GridSpec(8, dt))
            sol = solve_forward(problem, np.zeros(1))
            mesh = sol.assembly.mesh
            exact = problem.exact(mesh.nodes, problem.final_time)
            err = sol.states[-1] - exact
            mass = sol.assembly.mass
            errors.append(np.sqrt(err @ (mass @ err)))
        order = np.polyfit(np.log(dts), np.log(errors), 1)[0]
        assert order >= 0.95
        assert errors[0] > errors[1] > errors[2]

    def test_bilinear_elements_second_order_in_dx(self):
        errors = []
        meshes = [8, 16, 32]
        for m in meshes:
            problem = SineDecayProblem(GridSpec(m, 2e-4))
            sol = solve_forward(problem, np.zeros(1))
            mesh = sol.assembly.mesh
            exact = problem.exact(mesh.nodes, problem.final_time)
            err = sol.states[-1] - exact
            mass = sol.assembly.mass
            errors.append(np.sqrt(err @ (mass @ err)))
        order = np.polyfit(np.log([1.0 / m for m in meshes]), np.log(errors), 1)[0]
        assert order >= 1.9
        assert errors[0] > errors[1] > errors[2]

    def test_discrete_conservation_under_no_flow(self):
        rng = np.random.default_rng(21)
        problem, _ = small_permeability(rng)
        xi = rng.standard_normal(problem.n_params)
        sol = solve_forward(problem, xi, Fidelity.HIGH)
        asm = sol.assembly
        ones = np.ones(asm.mesh.n_nodes)
        mass_total = [ones @ (asm.mass @ sol.states[k]) for k in range(asm.n_steps + 1)]
        injected = np.cumsum([ones @ load for load in asm.loads]) * asm.spec.dt
        initial = ones @ (asm.mass @ sol.states[0])
        for k in range(1, asm.n_steps + 1):
            expected = initial + injected[k - 1]
            assert mass_total[k] == pytest.approx(expected, rel=1e-8)

    def test_ellipse_point_reproduces_closed_form_value(self):
        problem = build_initial_center_problem(CenterConfig(add_data_noise=False))
        theta = 0.9
        xi = np.array([0.5 + np.sqrt(2) * 0.1 * np.cos(theta),
                       0.3 + np.sqrt(2) * 0.2 * np.sin(theta)])
        sol = solve_forward(problem, xi, Fidelity.HIGH)
        truth = problem.truth_observation()
        assert sol.observed[0] == pytest.approx(truth, rel=0.02)

    def test_observation_linearity(self):
        problem = small_center(rng=None)
        sol = solve_forward(problem, np.array([0.45, 0.4]), Fidelity.HIGH)
        doubled = sol.observe(2.0 * sol.states)
        assert np.allclose(doubled, 2.0 * sol.observed)

    def test_observed_matches_stored_states_bitwise(self):
        problem = small_center()
        sol = solve_forward(problem, np.array([0.52, 0.33]), Fidelity.HIGH)
        assert np.array_equal(sol.observe(), sol.observed)

    def test_nonfinite_state_reports_step(self):
        problem = NanSourceProblem(1.0, GridSpec(6, 0.02))
        with pytest.raises(SolveError) as err:
            solve_forward(problem, np.zeros(1))
        assert err.value.step == 1

    def test_permeability_zero_coeff_matches_unit_kappa_assembly(self):
        rng = np.random.default_rng(3)
        problem, _ = small_permeability(rng)
        asm = assemble(problem, np.zeros(problem.n_params), Fidelity.HIGH)
        mesh = asm.mesh
        expected = (assemble_mass(mesh) / asm.spec.dt
                    + assemble_stiffness(mesh, np.ones(mesh.elements.shape[0])))
        assert np.abs((asm.matrix - expected.tocsr())).max() < 1e-12

    def test_pressure_drops_with_larger_conductivity(self):
        # Uniformly doubling kappa diffuses injected mass faster, so the peak
        # observed well pressure decreases.
        rng = np.random.default_rng(4)
        problem, basis = small_permeability(rng)
        scale = np.log(2.0) / np.sqrt(basis.eigenvalues[0])
        xi_unit = np.zeros(problem.n_params)
        base = solve_forward(problem, xi_unit, Fidelity.HIGH).observed
        mesh = StructuredMesh.unit_square(problem.fidelities.high.n_cells)
        k_unit = problem.kappa_elements(mesh, xi_unit)

        class Doubled(type(problem)):
            def kappa_elements(self, mesh, xi):
                return 2.0 * super().kappa_elements(mesh, xi)

        doubled = Doubled(
            basis=problem.basis, wells=problem.sensors, rates=problem.rates,
            well_width=problem.well_width, initial_value=problem.initial_value,
            sigma_obs=problem.sigma_obs, obs_times=problem.obs_times,
            final_time=problem.final_time, fidelities=problem.fidelities,
            data=problem.data)
        faster = solve_forward(doubled, xi_unit, Fidelity.HIGH).observed
        assert faster.max() < base.max()


class TestCostate:
    def test_zero_residual_gives_zero_costate(self):
        problem = small_center()
        z = solve_costate(problem, np.array([0.5, 0.35]), Fidelity.HIGH,
                          residual=np.zeros(problem.n_obs))
        assert np.all(z == 0.0)

    def test_final_time_observation_structure(self):
        # With a single observation at the final time, the last costate level
        # solves (M/dt + K)^T z = -C^T r and earlier levels propagate it back.
        problem = small_center()
        xi = np.array([0.48, 0.37])
        fwd = solve_forward(problem, xi, Fidelity.HIGH)
        asm = fwd.assembly
        z = solve_costate(problem, xi, Fidelity.HIGH, forward=fwd)
        rhs = -(asm.obs.T @ fwd.residual)[asm.interior]
        a_ii = asm.matrix[asm.interior][:, asm.interior]
        direct = np.linalg.solve(a_ii.toarray().T, rhs)
        assert np.allclose(z[-1, asm.interior], direct, atol=1e-10)
        prev = np.linalg.solve(a_ii.toarray().T,
                               asm.mass_ii @ z[-1, asm.interior] / asm.spec.dt)
        assert np.allclose(z[-2, asm.interior], prev, atol=1e-10)

    def test_block_operator_transpose_consistency(self):
        problem = small_center()
        asm = assemble(problem, np.array([0.5, 0.3]), Fidelity.HIGH)
        rng = np.random.default_rng(6)
        v = rng.standard_normal((asm.n_steps, asm.interior.size))
        w = rng.standard_normal((asm.n_steps, asm.interior.size))
        lhs = np.sum(apply_block_forward(asm, v) * w)
        rhs = np.sum(v * apply_block_adjoint(asm, w))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_block_operator_transpose_consistency_no_flow(self):
        rng = np.random.default_rng(7)
        problem, _ = small_permeability(rng)
        asm = assemble(problem, rng.standard_normal(problem.n_params), Fidelity.HIGH)
        v = rng.standard_normal((asm.n_steps, asm.interior.size))
        w = rng.standard_normal((asm.n_steps, asm.interior.size))
        lhs = np.sum(apply_block_forward(asm, v) * w)
        rhs = np.sum(v * apply_block_adjoint(asm, w))
        assert lhs == pytest.approx(rhs, rel=1e-10)


def fd_gradient(model, xi, fidelity=Fidelity.HIGH):
    fd = np.empty_like(xi)
    for i in range(xi.size):
        h = 1e-5 * (1.0 + abs(xi[i]))
        hi = xi.copy(); hi[i] += h
        lo = xi.copy(); lo[i] -= h
        fd[i] = (posterior_potential(model.posterior, hi, fidelity)
                 - posterior_potential(model.posterior, lo, fidelity)) / (2 * h)
    return fd


class TestGradient:
    def test_zero_residual_zero_gradient(self):
        problem = small_center(add_noise=False)
        xi = np.array([0.5 + np.sqrt(2) * 0.1, 0.3])
        fwd = solve_forward(problem, xi, Fidelity.HIGH)
        fwd.residual = np.zeros_like(fwd.residual)
        grad = gradient_loglik(problem, xi, Fidelity.HIGH, forward=fwd)
        assert np.allclose(grad, 0.0)

    def test_center_gradient_matches_fd(self):
        rng = np.random.default_rng(31)
        problem = small_center(add_noise=True, rng=rng)
        prior = GaussianPrior.from_moments([0.5, 0.5], np.diag([0.25, 0.25]))
        model = PdePosterior(problem, prior)
        for _ in range(5):
            xi = prior.sample(rng.standard_normal(2))
            grad = gradient_loglik(problem, xi, Fidelity.HIGH)
            fd = fd_gradient(model, xi)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def test_permeability_gradient_matches_fd_both_fidelities(self):
        rng = np.random.default_rng(32)
        problem, basis = small_permeability(rng)
        prior = GaussianPrior.from_moments(np.zeros(problem.n_params), np.eye(problem.n_params))
        model = PdePosterior(problem, prior)
        for fidelity in (Fidelity.HIGH, Fidelity.LOW):
            xi = prior.sample(rng.standard_normal(problem.n_params))
            grad = gradient_loglik(problem, xi, fidelity)
            fd = fd_gradient(model, xi, fidelity)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def test_gradient_normal_to_solution_ellipse(self):
        # Single observation point: the gradient must align with the level-set
        # normal of u0(x_o; xi).  The direction error is a pure spatial
        # discretization effect, so this check runs on a fine mesh.
        problem = build_initial_center_problem(
            CenterConfig(add_data_noise=False, mesh_high=120, mesh_low=60,
                         dt_high=0.001, dt_low=0.001))
        l1, l2 = problem.widths
        cx, cy = problem.sensors[0]
        for theta in (0.7, 2.0, 4.0):
            xi = np.array([cx + np.sqrt(2) * l1 * np.cos(theta),
                           cy + np.sqrt(2) * l2 * np.sin(theta)])
            grad = gradient_loglik(problem, xi, Fidelity.HIGH)
            normal = np.array([(cx - xi[0]) / l1 ** 2, (cy - xi[1]) / l2 ** 2])
            cosang = abs(grad @ normal) / (np.linalg.norm(grad) * np.linalg.norm(normal))
            assert np.arccos(min(1.0, cosang)) < 1e-3

    def test_fidelity_ordering_of_forward_discrepancy(self):
        # Mean squared discrepancy against the high-fidelity output must grow
        # as the alternative gets coarser.
        rng = np.random.default_rng(33)
        problem = build_initial_center_problem(CenterConfig(add_data_noise=True), rng=rng)
        prior = GaussianPrior.from_moments([0.5, 0.5], np.diag([0.25, 0.25]))
        coarse, mid = [], []
        for _ in range(50):
            xi = prior.sample(rng.standard_normal(2))
            high = solve_forward(problem, xi, GridSpec(40, 0.001)).observed
            coarse.append(np.sum((high - solve_forward(problem, xi, GridSpec(20, 0.001)).observed) ** 2))
            mid.append(np.sum((high - solve_forward(problem, xi, GridSpec(30, 0.001)).observed) ** 2))
        assert np.mean(coarse) > np.mean(mid)


class TestBuilders:
    def test_center_defaults_match_reference_setup(self):
        problem = build_initial_center_problem(CenterConfig(add_data_noise=False))
        assert problem.widths == (0.1, 0.2)
        assert problem.source_strength == 1.0
        assert tuple(problem.sensors[0]) == (0.5, 0.3)
        assert problem.sigma_obs == 0.1
        assert problem.final_time == 0.1
        assert problem.fidelities.high == GridSpec(40, 0.001)
        assert problem.fidelities.low == GridSpec(20, 0.001)
        assert problem.data[0] == pytest.approx(
            problem.amplitude * np.exp(-1.0) * np.exp(-0.1), rel=1e-12)

    def test_center_noise_uses_generator(self):
        rng = np.random.default_rng(9)
        with_noise = build_initial_center_problem(CenterConfig(), rng=rng)
        clean = build_initial_center_problem(CenterConfig(add_data_noise=False))
        assert with_noise.data[0] != clean.data[0]

    def test_noise_requires_generator(self):
        with pytest.raises(ConfigError):
            build_initial_center_problem(CenterConfig(add_data_noise=True))

    def test_permeability_truth_zero_gives_unit_kappa(self):
        rng = np.random.default_rng(10)
        params = MaternParams(1.0, 0.45, (1.0, 0.5))
        basis = kl_decompose(params, (20, 20), 0.8)
        cfg = PermeabilityConfig(mesh=16, data_mesh=32, data_steps=50)
        problem = build_permeability_problem(cfg, basis, rng, truth_xi=np.zeros(basis.truncation))
        mesh = StructuredMesh.unit_square(16)
        assert np.allclose(problem.kappa_elements(mesh, np.zeros(problem.n_params)), 1.0)

    def test_permeability_inverse_crime_guard(self):
        rng = np.random.default_rng(11)
        params = MaternParams(1.0, 0.45, (1.0, 0.5))
        basis = kl_decompose(params, (20, 20), 0.8)
        with pytest.raises(ConfigError, match="inverse-crime"):
            build_permeability_problem(
                PermeabilityConfig(mesh=32, data_mesh=32), basis, rng)

    def test_default_well_lattice(self):
        wells = PermeabilityConfig().well_array()
        assert wells.shape == (9, 2)
        assert set(map(tuple, wells)) == {(x, y) for x in (0.25, 0.5, 0.75) for y in (0.25, 0.5, 0.75)}

    def test_estimate_fidelity_variance_positive(self):
        rng = np.random.default_rng(12)
        problem = small_center(add_noise=True, rng=rng)
        prior = GaussianPrior.from_moments([0.5, 0.5], np.diag([0.25, 0.25]))
        var = estimate_fidelity_variance(problem, prior, 10, rng)
        assert var > 0
