"""Gaussian priors, Matern covariance functions, and truncated Karhunen-Loeve bases."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as _gamma_fn
from scipy.special import kv as _bessel_kv

from .exceptions import ConfigError, NumericalError

logger = logging.getLogger(__name__)

# Eigenvalues below -1e-10 * ||B|| indicate genuine indefiniteness; anything in
# [-1e-10 * ||B||, 0) is treated as assembly roundoff and clipped to zero.
EIG_CLIP_REL = 1e-10


def _symmetrize(mat):
    return 0.5 * (mat + mat.T)


def factorize_covariance(cov):
    """Symmetric square root ``S`` of a covariance matrix, with ``S @ S == cov``.

    Parameters
    ----------
    cov : (n, n) array_like
        Symmetric positive semidefinite matrix.

    Returns
    -------
    (n, n) ndarray
        Symmetric factor built from the eigendecomposition of ``cov``.

    Raises
    ------
    ConfigError
        If ``cov`` is not symmetric to relative tolerance 1e-12.
    NumericalError
        If an eigenvalue falls below ``-1e-10 * ||cov||``.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    scale = np.linalg.norm(cov)
    if scale > 0 and np.linalg.norm(cov - cov.T) > 1e-12 * scale:
        raise ConfigError("covariance matrix must be symmetric to 1e-12 relative tolerance")
    eigvals, eigvecs = np.linalg.eigh(_symmetrize(cov))
    return _sqrt_from_eig(eigvals, eigvecs)


def _clip_eigenvalues(eigvals):
    spectral = float(np.max(np.abs(eigvals))) if eigvals.size else 0.0
    floor = -EIG_CLIP_REL * spectral
    if np.any(eigvals < floor):
        raise NumericalError(
            f"matrix is not positive semidefinite: eigenvalue {eigvals.min():.3e} "
            f"below tolerance {floor:.3e}"
        )
    return np.clip(eigvals, 0.0, None)


def _sqrt_from_eig(eigvals, eigvecs):
    clipped = _clip_eigenvalues(eigvals)
    s = (eigvecs * np.sqrt(clipped)) @ eigvecs.T
    return _symmetrize(s)


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian reference measure N(mean, cov) with a symmetric square-root factor.

    The factor is used both for drawing samples and for scaling the noise in
    the preconditioned Crank-Nicolson update, so it is computed once and
    shared.  ``eigenvalues``/``eigenvectors`` come from the same decomposition
    and back the precision applications needed by energy evaluations.
    """

    mean: np.ndarray
    cov: np.ndarray
    sqrt_factor: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigError(
                f"covariance shape {cov.shape} does not match mean dimension {mean.size}"
            )
        scale = np.linalg.norm(cov)
        if scale > 0 and np.linalg.norm(cov - cov.T) > 1e-12 * scale:
            raise ConfigError("covariance matrix must be symmetric to 1e-12 relative tolerance")
        eigvals, eigvecs = np.linalg.eigh(_symmetrize(cov))
        sqrt_factor = _sqrt_from_eig(eigvals, eigvecs)
        return cls(mean, _symmetrize(cov), sqrt_factor, _clip_eigenvalues(eigvals), eigvecs)

    @property
    def dim(self):
        return self.mean.size

    def sample(self, noise):
        """Map standard-normal draws to prior draws, ``mean + S @ noise``."""
        noise = np.asarray(noise, dtype=float)
        return self.mean + noise @ self.sqrt_factor.T

    def apply_cov(self, vec):
        return np.asarray(vec, dtype=float) @ self.cov.T

    def apply_sqrt(self, vec):
        return np.asarray(vec, dtype=float) @ self.sqrt_factor.T

    def apply_precision(self, vec):
        """Apply the covariance pseudo-inverse (exact inverse when SPD)."""
        vec = np.asarray(vec, dtype=float)
        coeffs = vec @ self.eigenvectors
        inv = np.where(self.eigenvalues > 0, 1.0 / np.where(self.eigenvalues > 0, self.eigenvalues, 1.0), 0.0)
        return (coeffs * inv) @ self.eigenvectors.T

    def quad_form(self, xi):
        """Prior quadratic energy 0.5 * (xi - mean)^T B^{-1} (xi - mean)."""
        dev = np.asarray(xi, dtype=float) - self.mean
        return 0.5 * float(dev @ self.apply_precision(dev))


def sample_prior(prior, noise):
    """Draw from the prior given a standard normal vector: ``m + S @ w``."""
    return prior.sample(noise)


@dataclass(frozen=True)
class MaternParams:
    """Matern covariance parameters with per-coordinate length scales."""

    variance: float
    smoothness: float
    length_scales: tuple

    def __post_init__(self):
        if self.variance <= 0:
            raise ConfigError(f"Matern variance must be positive, got {self.variance}")
        if self.smoothness <= 0:
            raise ConfigError(f"Matern smoothness must be positive, got {self.smoothness}")
        scales = tuple(float(s) for s in self.length_scales)
        if any(s <= 0 for s in scales):
            raise ConfigError(f"Matern length scales must be positive, got {scales}")
        object.__setattr__(self, "length_scales", scales)


def _matern_from_scaled_distance(dist, params):
    """Evaluate the Matern kernel at anisotropically scaled distances."""
    nu = params.smoothness
    arg = np.sqrt(2.0 * nu) * np.asarray(dist, dtype=float)
    out = np.full_like(arg, params.variance, dtype=float)
    positive = arg > 0
    a = arg[positive]
    coeff = params.variance * (2.0 ** (1.0 - nu)) / _gamma_fn(nu)
    out[positive] = coeff * (a ** nu) * _bessel_kv(nu, a)
    return out


def matern_cov(x1, x2, params):
    """Matern covariance between two points.

    The distance is scaled per coordinate, ``d = sqrt(sum((dx_k / l_k)^2))``,
    and the zero-distance value is the variance exactly (analytic limit).
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    scales = np.asarray(params.length_scales, dtype=float)
    d = np.sqrt(np.sum(((x1 - x2) / scales) ** 2))
    return float(_matern_from_scaled_distance(np.asarray(d), params))


def matern_matrix(points, params):
    """Dense covariance matrix of the Matern kernel over a point set."""
    pts = np.asarray(points, dtype=float)
    scales = np.asarray(params.length_scales, dtype=float)
    scaled = pts / scales
    diff = scaled[:, None, :] - scaled[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return _matern_from_scaled_distance(dist, params)


@dataclass(frozen=True)
class KLBasis:
    """Truncated Karhunen-Loeve basis of a log-coefficient random field.

    Eigenfunctions are orthonormal under the midpoint-quadrature inner
    product on the cell-center grid: sum_j w * phi_i(x_j) * phi_k(x_j) = delta_ik.
    """

    eigenvalues: np.ndarray        # (n,), nonincreasing, positive
    eigenfunctions: np.ndarray     # (n, n_points), quadrature-orthonormal
    mean_field: np.ndarray         # (n_points,)
    truncation: int
    grid_shape: tuple
    centers: np.ndarray            # (n_points, d) cell centers in [0, 1]^d
    weight: float                  # quadrature weight per cell
    total_energy: float
    energy_fraction: float

    @property
    def dim(self):
        return self.truncation

    def _axes(self):
        axes = []
        for k, m in enumerate(self.grid_shape):
            h = 1.0 / m
            axes.append((np.arange(m) + 0.5) * h)
        return axes

    def interpolate_at(self, points):
        """Mean field and eigenfunctions linearly interpolated at points.

        Returns ``(mean_vals, modes)`` with ``modes`` shaped (n_points, n).
        Points slightly outside the cell-center hull are linearly extrapolated.
        """
        from scipy.interpolate import RegularGridInterpolator

        points = np.asarray(points, dtype=float)
        stack = np.concatenate([self.mean_field[None, :], self.eigenfunctions], axis=0)
        values = stack.reshape((stack.shape[0],) + tuple(self.grid_shape))
        values = np.moveaxis(values, 0, -1)
        interp = RegularGridInterpolator(
            self._axes(), values, method="linear", bounds_error=False, fill_value=None
        )
        out = interp(points)
        return out[..., 0], out[..., 1:]

    def log_field_at(self, points, xi):
        """log kappa at arbitrary points for coefficient vector xi."""
        xi = np.asarray(xi, dtype=float)
        if xi.size != self.truncation:
            raise ConfigError(
                f"coefficient vector has length {xi.size}, basis truncation is {self.truncation}"
            )
        mean_vals, modes = self.interpolate_at(points)
        return mean_vals + modes @ (np.sqrt(self.eigenvalues) * xi)


def kl_decompose(params, grid_shape, energy_target, mean_field=None):
    """Truncated KL basis of the Matern field on the unit square (or interval).

    A midpoint-rule Nystroem discretization of the covariance eigenproblem is
    solved densely; the truncation is the smallest n whose eigenvalues capture
    ``energy_target`` of the total discrete spectrum (eigenvalues sorted in
    decreasing order).

    Parameters
    ----------
    params : MaternParams
    grid_shape : tuple of int
        Cells per coordinate, e.g. ``(40, 40)``.
    energy_target : float
        Retained fraction of total prior energy, in (0, 1].
    mean_field : array_like, optional
        Mean of the log field at the cell centers; defaults to zero.
    """
    if not 0.0 < energy_target <= 1.0:
        raise ConfigError(f"energy target must lie in (0, 1], got {energy_target}")
    grid_shape = tuple(int(m) for m in grid_shape)
    if any(m < 2 for m in grid_shape):
        raise ConfigError(f"grid shape must have at least 2 cells per axis, got {grid_shape}")
    if len(grid_shape) != len(params.length_scales):
        raise ConfigError(
            f"grid dimension {len(grid_shape)} does not match "
            f"{len(params.length_scales)} length scales"
        )

    axes = [(np.arange(m) + 0.5) / m for m in grid_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    weight = float(np.prod([1.0 / m for m in grid_shape]))

    cov = matern_matrix(centers, params)
    # Uniform weights make the symmetrized Nystroem operator simply w * C.
    try:
        eigvals, eigvecs = np.linalg.eigh(_symmetrize(cov) * weight)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance eigensolve failed to converge: {exc}") from exc

    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    eigvals = np.clip(eigvals, 0.0, None)

    total = float(eigvals.sum())
    if total <= 0:
        raise NumericalError("covariance operator has no positive spectrum")
    cum = np.cumsum(eigvals) / total
    n = int(np.searchsorted(cum, energy_target - 1e-12) + 1)
    n = min(n, int(np.count_nonzero(eigvals > 0)))

    # Renormalize to quadrature-orthonormal grid functions.
    modes = (eigvecs[:, :n] / np.sqrt(weight)).T
    if mean_field is None:
        mean_field = np.zeros(centers.shape[0])
    else:
        mean_field = np.asarray(mean_field, dtype=float).ravel()
        if mean_field.size != centers.shape[0]:
            raise ConfigError("mean field size does not match the grid")

    basis = KLBasis(
        eigenvalues=eigvals[:n].copy(),
        eigenfunctions=np.ascontiguousarray(modes),
        mean_field=mean_field,
        truncation=n,
        grid_shape=grid_shape,
        centers=centers,
        weight=weight,
        total_energy=total,
        energy_fraction=float(cum[n - 1]),
    )
    logger.info(
        "KL truncation n=%d captures %.4f of total prior energy (target %.4f)",
        n, basis.energy_fraction, energy_target,
    )
    return basis


def field_from_coeffs(basis, xi):
    """Coefficient field kappa = exp(mean + sum_i sqrt(lambda_i) phi_i xi_i) on the grid."""
    xi = np.asarray(xi, dtype=float)
    if xi.size != basis.truncation:
        raise ConfigError(
            f"coefficient vector has length {xi.size}, basis truncation is {basis.truncation}"
        )
    log_field = basis.mean_field + (np.sqrt(basis.eigenvalues) * xi) @ basis.eigenfunctions
    return np.exp(log_field).reshape(basis.grid_shape)


def save_kl_basis(path, basis):
    """Dump eigenpairs to CSV: a header with grid shape and n, then row-major values."""
    with open(path, "w", encoding="utf-8") as fh:
        shape = "x".join(str(m) for m in basis.grid_shape)
        fh.write(
            f"grid,{shape},n,{basis.truncation},total_energy,{basis.total_energy!r},"
            f"energy_fraction,{basis.energy_fraction!r}\n"
        )
        fh.write("eigenvalues," + ",".join(repr(float(v)) for v in basis.eigenvalues) + "\n")
        fh.write("mean," + ",".join(repr(float(v)) for v in basis.mean_field) + "\n")
        for i in range(basis.truncation):
            row = basis.eigenfunctions[i]
            fh.write(f"phi_{i}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_kl_basis(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "grid" or header[2] != "n":
            raise ConfigError(f"unrecognized KL dump header in {path}")
        grid_shape = tuple(int(s) for s in header[1].split("x"))
        n = int(header[3])
        total = float(header[5])
        fraction = float(header[7])
        rows = {}
        for line in fh:
            name, _, rest = line.strip().partition(",")
            rows[name] = np.array([float(v) for v in rest.split(",")])
    eigvals = rows["eigenvalues"]
    modes = np.stack([rows[f"phi_{i}"] for i in range(n)], axis=0)
    axes = [(np.arange(m) + 0.5) / m for m in grid_shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=-1)
    weight = float(np.prod([1.0 / m for m in grid_shape]))
    return KLBasis(
        eigenvalues=eigvals,
        eigenfunctions=modes,
        mean_field=rows["mean"],
        truncation=n,
        grid_shape=grid_shape,
        centers=centers,
        weight=weight,
        total_energy=total,
        energy_fraction=fraction,
    )
