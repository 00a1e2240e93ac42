"""Verification suites behind the `verify` CLI command and the acceptance
tests: adjoint-gradient vs finite differences, swap-estimator unbiasedness,
and the strong-error order of the discretized pair dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import SwapPolicy, TemperatureLadder, correction_factor, corrected_swap_statistic, swap_statistic
from .pde import gradient_loglik
from .priors import GaussianPrior, MaternParams, factorize_covariance, kl_decompose
from .problems import (
    CenterConfig,
    PdePosterior,
    PermeabilityConfig,
    build_initial_center_problem,
    build_permeability_problem,
)
from .targets import Fidelity, posterior_potential


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def gradient_check(draws=20, tol=1e-4, seed=1, problems=("center", "permeability"),
                   center_mesh=40, perm_mesh=30):
    """Relative error of the adjoint gradient against central finite differences
    of the data-misfit potential, at prior draws, for both PDE problems."""
    rng = np.random.default_rng(seed)
    results = []
    if "center" in problems:
        problem = build_initial_center_problem(
            CenterConfig(mesh_high=center_mesh, mesh_low=center_mesh // 2), rng=rng)
        prior = GaussianPrior.from_moments([0.5, 0.5], [[0.25, 0.0], [0.0, 0.25]])
        model = PdePosterior(problem, prior)
        worst = _fd_worst_error(model, prior, draws, rng)
        results.append(CheckResult(
            "gradient/center", worst < tol,
            f"max relative FD error {worst:.3e} over {draws} draws (tol {tol:g})"))
    if "permeability" in problems:
        params = MaternParams(1.0, 0.45, (1.0, 0.5))
        basis = kl_decompose(params, (40, 40), 0.86)
        problem = build_permeability_problem(
            PermeabilityConfig(mesh=perm_mesh, data_mesh=2 * perm_mesh, data_steps=50),
            basis, rng)
        prior = GaussianPrior.from_moments(np.zeros(basis.truncation), np.eye(basis.truncation))
        model = PdePosterior(problem, prior)
        worst = _fd_worst_error(model, prior, draws, rng)
        results.append(CheckResult(
            "gradient/permeability", worst < tol,
            f"max relative FD error {worst:.3e} over {draws} draws "
            f"(tol {tol:g}, n={basis.truncation})"))
    return results


def _fd_worst_error(model, prior, draws, rng):
    # Relative error floored at 1e-4: below that scale the central-difference
    # oracle is dominated by its own roundoff (eps * |psi| / step), so draws
    # whose gradient is numerically zero compare absolutely instead.
    worst = 0.0
    for _ in range(draws):
        xi = prior.sample(rng.standard_normal(prior.dim))
        grad = gradient_loglik(model.problem, xi, Fidelity.HIGH)
        fd = np.empty_like(xi)
        for i in range(xi.size):
            h = 1e-5 * (1.0 + abs(xi[i]))
            hi = xi.copy(); hi[i] += h
            lo = xi.copy(); lo[i] -= h
            fd[i] = (posterior_potential(model.posterior, hi)
                     - posterior_potential(model.posterior, lo)) / (2.0 * h)
        denom = max(float(np.linalg.norm(fd)), 1e-4)
        worst = max(worst, float(np.linalg.norm(grad - fd)) / denom)
    return worst


def swap_check(n_draws=100_000, n_obs=5, tau1=1.0, tau2=15.0, variance_ratio=0.2,
               sigma_obs=0.1, u1=1.3, u2=0.7, seed=7):
    """Monte Carlo unbiasedness of the corrected swap statistic.

    The low-fidelity energy is perturbed through the forward-error model
    (independent normal perturbation Z of the forward output next to the
    observation-noise deviate X), so U - U_tilde = (Z'Z - 2 X'Z)/(2 sigma^2).
    The corrected statistic must average to the exact statistic S, and the
    uncorrected one to S times the inverse correction factor.
    """
    ladder = TemperatureLadder(tau1, tau2)
    policy = SwapPolicy(correction_enabled=True, variance_ratio=variance_ratio, obs_count=n_obs)
    rng = np.random.default_rng(seed)
    sigma_tilde = math.sqrt(variance_ratio) * sigma_obs
    z = sigma_tilde * rng.standard_normal((n_draws, n_obs))
    x = sigma_obs * rng.standard_normal((n_draws, n_obs))
    perturbation = (np.sum(z * z, axis=1) - 2.0 * np.sum(x * z, axis=1)) / (2.0 * sigma_obs ** 2)
    u2_tilde = u2 - perturbation

    s_exact = swap_statistic(u1, u2, ladder)
    factor = correction_factor(ladder, policy)
    corrected = np.array([corrected_swap_statistic(u1, v, ladder, policy) for v in u2_tilde])
    plain = corrected / factor

    mean_c = float(corrected.mean())
    se_c = float(corrected.std(ddof=1) / math.sqrt(n_draws))
    mean_p = float(plain.mean()) / s_exact
    se_p = float(plain.std(ddof=1) / math.sqrt(n_draws)) / s_exact
    target_ratio = factor ** -1.0

    ok_corrected = abs(mean_c - s_exact) <= 2.0 * se_c
    ok_plain = abs(mean_p - target_ratio) <= 2.0 * se_p
    return {
        "s_exact": s_exact,
        "mean_corrected": mean_c,
        "se_corrected": se_c,
        "ok_corrected": ok_corrected,
        "mean_ratio_uncorrected": mean_p,
        "se_ratio_uncorrected": se_p,
        "target_ratio": target_ratio,
        "ok_uncorrected": ok_plain,
        "admissibility_bound": 1.0 / (ladder.tau_delta ** 2 + ladder.tau_delta),
        "ok": ok_corrected and ok_plain,
    }


# Strong-error defaults: a contracting quadratic energy keeps the exchanged
# pair close, the near-equal temperatures keep the swap statistic weakly
# state-dependent, and the attempt intensity averages enough swap-timing
# quantization windows per path (the linear-in-delta error channel) for the
# 200-path mean to be stable.
STRONG_ERROR_DEFAULTS = dict(
    prior_cov=((1.0, 0.3), (0.3, 1.0)),
    target_precision=((4.0, 0.0), (0.0, 4.0)),
    tau1=1.0,
    tau2=1.05,
    intensity=4.0,
    horizon=1.0,
    ref_ratio=64,
)


def strong_error_check(deltas=None, n_paths=200, seed=2024, slope_window=(0.8, 1.2), **overrides):
    """Mean-squared endpoint error of the coarse pair dynamics against a
    reference at delta/64 driven by the same Brownian increments and swap
    uniforms; returns the log-log slope over the requested step sizes."""
    params = dict(STRONG_ERROR_DEFAULTS)
    params.update(overrides)
    if deltas is None:
        deltas = [2.0 ** -k for k in range(4, 9)]
    cov = np.asarray(params["prior_cov"], dtype=float)
    precision = np.asarray(params["target_precision"], dtype=float)
    mses = _coupled_pair_errors(
        deltas, n_paths, params["horizon"], cov, precision,
        params["tau1"], params["tau2"], params["intensity"], seed, params["ref_ratio"],
    )
    if len(deltas) >= 2:
        slope = float(np.polyfit(np.log(deltas), np.log(mses), 1)[0])
        ok = slope_window[0] <= slope <= slope_window[1]
    else:
        slope = float("nan")
        ok = False
    return {
        "deltas": list(deltas),
        "mse": [float(v) for v in mses],
        "slope": slope,
        "window": list(slope_window),
        "ok": ok,
    }


def _coupled_pair_errors(deltas, n_paths, horizon, cov, precision, tau1, tau2,
                         intensity, seed, ref_ratio):
    """Endpoint MSE between the pair dynamics at step delta and at delta/ref_ratio.

    Both resolutions consume the same per-fine-tick Brownian increments and
    swap uniforms.  The reference attempts a swap every fine tick with
    probability intensity * s * dt_fine; the coarse chain's per-iteration
    attempt consumes the same tick uniforms (its block-level probability
    matches intensity * s * delta to first order), so the two swap processes
    differ only through timing quantization inside a coarse step.
    """
    sqrt_cov = factorize_covariance(cov)
    drift = cov @ precision
    tau_delta = 1.0 / tau1 - 1.0 / tau2
    master = np.random.default_rng(seed)
    mses = []
    for delta in deltas:
        rng = np.random.default_rng(master.integers(2 ** 63))
        dt_fine = delta / ref_ratio
        n_coarse = int(round(horizon / delta))
        n_fine = n_coarse * ref_ratio
        eta_c = 2.0 / (2.0 + delta)
        eta_r = 2.0 / (2.0 + dt_fine)
        start1 = math.sqrt(tau1) * rng.standard_normal((n_paths, 2)) @ sqrt_cov.T
        start2 = math.sqrt(tau2) * rng.standard_normal((n_paths, 2)) @ sqrt_cov.T
        coarse1, coarse2 = start1.copy(), start2.copy()
        ref1, ref2 = start1.copy(), start2.copy()
        incr1 = rng.standard_normal((n_fine, n_paths, 2))
        incr2 = rng.standard_normal((n_fine, n_paths, 2))
        uniforms = rng.uniform(size=(n_fine, n_paths))
        kick_r = eta_r * math.sqrt(2.0 * dt_fine)
        kick_c = eta_c * math.sqrt(2.0 * delta)
        sqrt_ratio = math.sqrt(ref_ratio)

        def pair_energy(a, b):
            ua = 0.5 * np.einsum("pi,ij,pj->p", a, precision, a)
            ub = 0.5 * np.einsum("pi,ij,pj->p", b, precision, b)
            return ua, ub

        for k in range(n_coarse):
            block = slice(k * ref_ratio, (k + 1) * ref_ratio)
            for j in range(k * ref_ratio, (k + 1) * ref_ratio):
                ref1 = ref1 - eta_r * dt_fine * (ref1 @ drift.T) \
                    + kick_r * math.sqrt(tau1) * (incr1[j] @ sqrt_cov.T)
                ref2 = ref2 - eta_r * dt_fine * (ref2 @ drift.T) \
                    + kick_r * math.sqrt(tau2) * (incr2[j] @ sqrt_cov.T)
                u1, u2 = pair_energy(ref1, ref2)
                s = np.minimum(1.0, np.exp(tau_delta * (u1 - u2)))
                flip = uniforms[j] < intensity * s * dt_fine
                if flip.any():
                    hold = ref1[flip].copy()
                    ref1[flip] = ref2[flip]
                    ref2[flip] = hold
            agg1 = incr1[block].sum(axis=0) / sqrt_ratio
            agg2 = incr2[block].sum(axis=0) / sqrt_ratio
            coarse1 = coarse1 - eta_c * delta * (coarse1 @ drift.T) \
                + kick_c * math.sqrt(tau1) * (agg1 @ sqrt_cov.T)
            coarse2 = coarse2 - eta_c * delta * (coarse2 @ drift.T) \
                + kick_c * math.sqrt(tau2) * (agg2 @ sqrt_cov.T)
            u1, u2 = pair_energy(coarse1, coarse2)
            s = np.minimum(1.0, np.exp(tau_delta * (u1 - u2)))
            flip = uniforms[block].min(axis=0) < intensity * s * dt_fine
            if flip.any():
                hold = coarse1[flip].copy()
                coarse1[flip] = coarse2[flip]
                coarse2[flip] = hold
        err = ((coarse1 - ref1) ** 2).sum(axis=1) + ((coarse2 - ref2) ** 2).sum(axis=1)
        mses.append(float(err.mean()))
    return np.asarray(mses)


def run_suites(suites=("gradient", "swap", "strong-error"), seed=1, draws=20):
    """Run the requested verification suites; returns CheckResult list."""
    results = []
    if "gradient" in suites:
        results.extend(gradient_check(draws=draws, seed=seed))
    if "swap" in suites:
        out = swap_check(seed=seed + 6)
        results.append(CheckResult(
            "swap/unbiasedness", out["ok"],
            f"mean corrected {out['mean_corrected']:.5f} vs exact {out['s_exact']:.5f} "
            f"(2se {2 * out['se_corrected']:.5f}); uncorrected ratio "
            f"{out['mean_ratio_uncorrected']:.4f} vs {out['target_ratio']:.4f}"))
    if "strong-error" in suites:
        out = strong_error_check(seed=seed + 2023)
        results.append(CheckResult(
            "strong-error/order", out["ok"],
            f"log-log slope {out['slope']:.3f} within {out['window']}"))
    return results
