"""Target distributions: Gaussian mixtures with analytic gradients and
Bayesian posteriors built from forward maps via the energy/potential split.

Every target exposes the energy U (negative log target density up to a
constant) and the gradient of the data-misfit potential psi, where
U(xi) = 0.5 * (xi - m)^T B^{-1} (xi - m) + psi(xi).
"""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .exceptions import ConfigError

_LOG_2PI = float(np.log(2.0 * np.pi))


class Fidelity(enum.Enum):
    """Which forward solver a chain evaluates with."""

    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class ModelEval:
    """One forward/gradient evaluation of a target at a fixed position."""

    energy: float
    grad_potential: np.ndarray
    aux: Any = None


class TargetModel(abc.ABC):
    """Behavioral contract for samplable targets.

    ``evaluate`` must be a pure function of (position, fidelity): repeated
    calls with identical inputs return bitwise-identical results, and calls
    from concurrent chains must not interact.
    """

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        ...

    @abc.abstractmethod
    def evaluate(self, xi, fidelity=Fidelity.HIGH) -> ModelEval:
        ...

    def energy(self, xi, fidelity=Fidelity.HIGH) -> float:
        return self.evaluate(xi, fidelity).energy

    def grad_potential(self, xi, fidelity=Fidelity.HIGH) -> np.ndarray:
        return self.evaluate(xi, fidelity).grad_potential


@dataclass(frozen=True)
class GaussianMixture:
    """Finite Gaussian mixture with cached inverses and log-determinants."""

    weights: np.ndarray       # (M,), nonnegative, sums to 1
    means: np.ndarray         # (M, n)
    covariances: np.ndarray   # (M, n, n), each SPD

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covariances, dtype=float)
        if covs.ndim == 2:
            covs = covs[None, :, :]
        if np.any(weights < 0):
            raise ConfigError(f"mixture weights must be nonnegative, got {weights}")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"mixture weights must sum to 1 within 1e-12, got sum {weights.sum()!r}")
        if means.shape[0] != weights.size or covs.shape[0] != weights.size:
            raise ConfigError("weights, means, and covariances disagree on component count")
        if covs.shape[1:] != (means.shape[1], means.shape[1]):
            raise ConfigError("covariance blocks do not match the mean dimension")
        inv = np.empty_like(covs)
        logdet = np.empty(weights.size)
        for k, c in enumerate(covs):
            sign, ld = np.linalg.slogdet(c)
            if sign <= 0 or not np.all(np.linalg.eigvalsh(0.5 * (c + c.T)) > 0):
                raise ConfigError(f"mixture component {k} covariance is not SPD")
            inv[k] = np.linalg.inv(c)
            logdet[k] = ld
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "_inv_covs", inv)
        object.__setattr__(self, "_log_dets", logdet)
        object.__setattr__(self, "_log_weights", np.log(np.where(weights > 0, weights, 1.0)))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size


def _component_log_densities(mix, xi):
    dev = xi[None, :] - mix.means                       # (M, n)
    quad = np.einsum("ki,kij,kj->k", dev, mix._inv_covs, dev)
    return -0.5 * (mix.dim * _LOG_2PI + mix._log_dets + quad)


def mixture_log_density(mix, xi):
    """log pi(xi) via log-sum-exp over component log densities."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    comp = _component_log_densities(mix, xi)
    logw = np.where(mix.weights > 0, mix._log_weights, -np.inf)
    terms = logw + comp
    top = terms.max()
    return float(top + np.log(np.exp(terms - top).sum()))


def mixture_grad_log_density(mix, xi):
    """Gradient of log pi: sum_k w_k(xi) B_k^{-1} (m_k - xi) with stable responsibilities."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    comp = _component_log_densities(mix, xi)
    logw = np.where(mix.weights > 0, mix._log_weights, -np.inf)
    terms = logw + comp
    # Subtract the max before exponentiation so far-tail responsibilities stay finite.
    resp = np.exp(terms - terms.max())
    resp /= resp.sum()
    dev = mix.means - xi[None, :]
    pulls = np.einsum("kij,kj->ki", mix._inv_covs, dev)
    return resp @ pulls


def mixture_potential(mix, prior, xi):
    """Data-misfit potential making exp(-U) equal the mixture density:
    psi(xi) = -log pi(xi) - 0.5 (xi - m)^T B^{-1} (xi - m)."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return -mixture_log_density(mix, xi) - prior.quad_form(xi)


class GaussianMixtureModel(TargetModel):
    """Mixture target wired against a Gaussian prior so that U = -log pi."""

    def __init__(self, mixture, prior):
        if mixture.dim != prior.dim:
            raise ConfigError("mixture and prior dimensions disagree")
        self.mixture = mixture
        self.prior = prior

    @property
    def dim(self):
        return self.mixture.dim

    def energy(self, xi, fidelity=Fidelity.HIGH):
        return -mixture_log_density(self.mixture, np.atleast_1d(np.asarray(xi, dtype=float)))

    def grad_potential(self, xi, fidelity=Fidelity.HIGH):
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        grad_log = mixture_grad_log_density(self.mixture, xi)
        return -grad_log - self.prior.apply_precision(xi - self.prior.mean)

    def evaluate(self, xi, fidelity=Fidelity.HIGH):
        # Energy and gradient share one pass over the component densities.
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        mix = self.mixture
        comp = _component_log_densities(mix, xi)
        terms = np.where(mix.weights > 0, mix._log_weights + comp, -np.inf)
        top = terms.max()
        shifted = np.exp(terms - top)
        total = shifted.sum()
        energy = -(top + np.log(total))
        resp = shifted / total
        dev = mix.means - xi[None, :]
        grad_log = resp @ np.einsum("kij,kj->ki", mix._inv_covs, dev)
        grad_psi = -grad_log - self.prior.apply_precision(xi - self.prior.mean)
        return ModelEval(float(energy), grad_psi)


@dataclass(frozen=True)
class BayesianPosterior:
    """Posterior defined by a forward map, observed data, and noise level.

    ``forward`` maps (xi, fidelity) to the predicted observation vector.
    """

    forward: Callable[[np.ndarray, Fidelity], np.ndarray]
    data: np.ndarray
    noise_sd: float
    prior: "Any"

    def __post_init__(self):
        object.__setattr__(self, "data", np.atleast_1d(np.asarray(self.data, dtype=float)))
        if self.noise_sd <= 0:
            raise ConfigError(f"observation noise must be positive, got {self.noise_sd}")

    @property
    def n_obs(self):
        return self.data.size


def posterior_potential(post, xi, fidelity=Fidelity.HIGH):
    """Negative log likelihood:
    psi = (n_d / 2) log(2 pi sigma^2) + ||d - G(xi)||^2 / (2 sigma^2).

    The additive constant is retained so logged energies match the
    Onsager-Machlup convention used in the mixing diagnostics.
    """
    pred = np.atleast_1d(np.asarray(post.forward(xi, fidelity), dtype=float))
    if pred.size != post.n_obs:
        raise ConfigError(
            f"forward output has {pred.size} entries, data has {post.n_obs}"
        )
    resid = post.data - pred
    s2 = post.noise_sd ** 2
    return float(0.5 * post.n_obs * np.log(2.0 * np.pi * s2) + 0.5 * (resid @ resid) / s2)


def posterior_energy(post, xi, fidelity=Fidelity.HIGH):
    """Energy U = prior quadratic + psi at the requested fidelity."""
    return post.prior.quad_form(xi) + posterior_potential(post, xi, fidelity)
