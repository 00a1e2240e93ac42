"""Chain-quality diagnostics: autocorrelation of the energy series, effective
sample size, kernel density estimates, posterior field moments, and mode
occupancy.  All functions are pure reductions over completed traces and run
single-threaded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DegenerateSeriesError


@dataclass(frozen=True)
class AcfSeries:
    """Autocorrelation values at lags 0..L (value at lag 0 is exactly 1)."""

    lags: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class EssReport:
    """Per-coordinate effective sample size ESS = N / (1 + 2 rho), with rho the
    integrated autocorrelation time, truncated at the first negative term."""

    ess: np.ndarray
    rho: np.ndarray
    n_samples: int


@dataclass(frozen=True)
class DensityEstimate:
    """Gaussian-kernel density values on a supplied grid."""

    grid: object
    values: np.ndarray
    bandwidth: np.ndarray


def _autocovariance(x, max_lag):
    """Biased (normalized-by-N) autocovariance via FFT."""
    n = x.size
    centered = x - x.mean()
    var0 = float(centered @ centered) / n
    scale = float(np.max(np.abs(centered))) if n else 0.0
    if var0 <= (1e-15 * max(scale, 1.0)) ** 2:
        raise DegenerateSeriesError("series is constant; autocorrelation is undefined")
    m = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(centered, m)
    acov = np.fft.irfft(spec * np.conj(spec), m)[: max_lag + 1] / n
    return acov


def acf(series, max_lag):
    """Autocorrelation of a scalar series up to ``max_lag``.

    Uses the biased autocovariance estimator (normalized by N) divided by the
    lag-0 autocovariance.
    """
    x = np.asarray(series, dtype=float).ravel()
    if x.size <= max_lag:
        raise ConfigError(f"series length {x.size} must exceed max_lag {max_lag}")
    acov = _autocovariance(x, max_lag)
    values = acov / acov[0]
    values[0] = 1.0
    return AcfSeries(lags=np.arange(max_lag + 1), values=values)


def integrated_autocorrelation(series):
    """rho = sum_{k>=1} acf(k), truncated at the first negative acf value."""
    x = np.asarray(series, dtype=float).ravel()
    acov = _autocovariance(x, x.size - 1)
    values = acov / acov[0]
    negative = np.flatnonzero(values[1:] < 0.0)
    stop = int(negative[0]) + 1 if negative.size else x.size
    return float(values[1:stop].sum())


def ess(series, truncation="first-negative"):
    """Effective sample size per coordinate.

    Parameters
    ----------
    series : (N,) or (N, d) array
    truncation : str
        Integrated-autocorrelation truncation policy; only "first-negative"
        is implemented.
    """
    if truncation != "first-negative":
        raise ConfigError(f"unknown truncation policy {truncation!r}")
    arr = np.asarray(series, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    n = arr.shape[0]
    rho = np.array([integrated_autocorrelation(arr[:, j]) for j in range(arr.shape[1])])
    return EssReport(ess=n / (1.0 + 2.0 * rho), rho=rho, n_samples=n)


def _silverman_bandwidth(samples):
    """Per-dimension Silverman rule: 0.9 min(sd, IQR/1.34) n^{-1/(d+4)}."""
    n, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    q75, q25 = np.percentile(samples, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.34)
    if np.any(spread <= 0):
        raise DegenerateSeriesError("samples are degenerate along some dimension")
    return 0.9 * spread * n ** (-1.0 / (d + 4))


def kde(samples, grid, bandwidth=None):
    """Gaussian-kernel density estimate on a grid (1D array or 2D axis pair).

    Requires at least 100 samples; the bandwidth defaults to Silverman's rule
    applied per dimension.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < 100:
        raise ConfigError(f"kernel density estimation needs at least 100 samples, got {n}")
    if d not in (1, 2):
        raise ConfigError(f"kernel density estimation supports 1 or 2 dimensions, got {d}")
    if bandwidth is None:
        bandwidth = _silverman_bandwidth(samples)
    else:
        bandwidth = np.broadcast_to(np.asarray(bandwidth, dtype=float), (d,)).copy()

    if d == 1:
        points = np.asarray(grid, dtype=float)[:, None]
        out_shape = (points.shape[0],)
    else:
        gx = np.asarray(grid[0], dtype=float)
        gy = np.asarray(grid[1], dtype=float)
        xx, yy = np.meshgrid(gx, gy, indexing="ij")
        points = np.column_stack([xx.ravel(), yy.ravel()])
        out_shape = (gx.size, gy.size)

    norm = n * np.prod(bandwidth * np.sqrt(2.0 * np.pi))
    values = np.empty(points.shape[0])
    chunk = max(1, int(2**22 // max(n, 1)))
    for start in range(0, points.shape[0], chunk):
        block = points[start:start + chunk]
        z = (block[:, None, :] - samples[None, :, :]) / bandwidth
        values[start:start + chunk] = np.exp(-0.5 * np.sum(z * z, axis=-1)).sum(axis=1)
    return DensityEstimate(grid=grid, values=(values / norm).reshape(out_shape), bandwidth=bandwidth)


def tv_distance(grid, p, q):
    """Total variation distance 0.5 * integral |p - q| on a 1D grid (trapezoid rule)."""
    grid = np.asarray(grid, dtype=float)
    return 0.5 * float(np.trapezoid(np.abs(np.asarray(p) - np.asarray(q)), grid))


@dataclass(frozen=True)
class FieldMoments:
    """Nodewise mean, standard deviation, and skewness of the log field."""

    mean: np.ndarray
    std: np.ndarray
    skewness: np.ndarray
    degenerate: np.ndarray   # True where the variance vanished (skewness forced to 0)


def field_moments(positions, basis, chunk=4096):
    """First three standardized moments of log kappa pushed through the KL basis.

    Samples are streamed in chunks; each retained coefficient vector maps to
    the log field on the basis grid and moments accumulate nodewise.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    if positions.shape[0] == 0:
        raise ConfigError("field moments need a nonempty sample set")
    if positions.shape[1] != basis.truncation:
        raise ConfigError("sample dimension does not match the basis truncation")
    scaled_modes = (np.sqrt(basis.eigenvalues)[:, None] * basis.eigenfunctions)
    n_nodes = basis.eigenfunctions.shape[1]
    s1 = np.zeros(n_nodes)
    s2 = np.zeros(n_nodes)
    s3 = np.zeros(n_nodes)
    n = positions.shape[0]
    for start in range(0, n, chunk):
        block = positions[start:start + chunk]
        fields = basis.mean_field[None, :] + block @ scaled_modes
        s1 += fields.sum(axis=0)
        s2 += (fields ** 2).sum(axis=0)
        s3 += (fields ** 3).sum(axis=0)
    mean = s1 / n
    var = np.maximum(s2 / n - mean ** 2, 0.0)
    m3 = s3 / n - 3.0 * mean * (s2 / n) + 2.0 * mean ** 3
    # Cancellation in s2/n - mean^2 leaves residue of order eps * mean-square,
    # so degeneracy is judged relative to that scale.
    degenerate = var <= 1e-13 * np.maximum(s2 / n, 1e-300)
    std = np.sqrt(np.where(degenerate, 0.0, var))
    skew = np.zeros(n_nodes)
    ok = ~degenerate
    skew[ok] = m3[ok] / std[ok] ** 3
    shape = tuple(basis.grid_shape)
    return FieldMoments(
        mean=mean.reshape(shape),
        std=std.reshape(shape),
        skewness=skew.reshape(shape),
        degenerate=degenerate.reshape(shape),
    )


def mode_occupancy(samples, modes, radius):
    """Fraction of samples within a Mahalanobis radius of each mode.

    ``modes`` is a sequence of (mean, covariance) pairs; an empty sequence
    yields an empty result.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    out = []
    for mean, cov in modes:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        inv = np.linalg.inv(cov)
        dev = samples - mean[None, :]
        maha2 = np.einsum("si,ij,sj->s", dev, inv, dev)
        out.append(float(np.mean(maha2 <= radius * radius)))
    return np.array(out)


# -- CSV / JSON emission -----------------------------------------------------

def save_acf_csv(path, acf_by_name):
    """Write lag,<name>,... columns for a dict of AcfSeries sharing lags."""
    names = list(acf_by_name)
    lags = acf_by_name[names[0]].lags
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("lag," + ",".join(names) + "\n")
        for i, lag in enumerate(lags):
            vals = ",".join(repr(float(acf_by_name[n].values[i])) for n in names)
            fh.write(f"{int(lag)},{vals}\n")


def save_ess_csv(path, report, labels=None):
    labels = labels or [f"xi_{j}" for j in range(report.ess.size)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("coordinate,ess,rho,n\n")
        for label, e, r in zip(labels, report.ess, report.rho):
            fh.write(f"{label},{float(e)!r},{float(r)!r},{report.n_samples}\n")


def save_kde_csv(path, estimate):
    with open(path, "w", encoding="utf-8") as fh:
        if estimate.values.ndim == 1:
            fh.write("x,density\n")
            for x, v in zip(np.asarray(estimate.grid, dtype=float), estimate.values):
                fh.write(f"{float(x)!r},{float(v)!r}\n")
        else:
            fh.write("x,y,density\n")
            gx = np.asarray(estimate.grid[0], dtype=float)
            gy = np.asarray(estimate.grid[1], dtype=float)
            for i, x in enumerate(gx):
                for j, y in enumerate(gy):
                    fh.write(f"{float(x)!r},{float(y)!r},{float(estimate.values[i, j])!r}\n")


def save_field_moments_csv(path, basis, moments):
    centers = basis.centers
    mean = moments.mean.ravel()
    std = moments.std.ravel()
    skew = moments.skewness.ravel()
    flag = moments.degenerate.ravel()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,mean,std,skewness,degenerate\n")
        for c, m, s, k, f in zip(centers, mean, std, skew, flag):
            coords = ",".join(repr(float(v)) for v in c)
            fh.write(f"{coords},{m!r},{s!r},{k!r},{int(f)}\n")


def save_summary_json(path, summary):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
