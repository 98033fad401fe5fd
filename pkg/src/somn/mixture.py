"""Homogeneous Gaussian mixtures: densities, posteriors and sanity checks.

Everything here is dimension-agnostic. Image-facing code always uses d = 2,
but nothing in this module assumes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateDensity, NonPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))

# Below this exponent the plain sum risks underflow, so switch to log-sum-exp.
UNDERFLOW_EXPONENT = -700.0

WEIGHT_SUM_TOL = 1e-9
SYMMETRY_TOL = 1e-12


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NonPositiveDefinite(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """One normal component: a mean vector and a covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of ``cov``, computed on first use."""
        return _cholesky(self.cov)

    @cached_property
    def half_log_det(self) -> float:
        return float(np.sum(np.log(np.diag(self.cholesky))))


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Weighted Gaussian mixture stored as stacked arrays.

    Attributes:
        means: (K, d) component means.
        covs: (K, d, d) component covariances.
        weights: (K,) mixing weights.
    """

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).reshape(-1))

    @classmethod
    def from_components(cls, components: Sequence[GaussianComponent], weights) -> "MixtureModel":
        return cls(
            means=np.stack([c.mean for c in components]),
            covs=np.stack([c.cov for c in components]),
            weights=np.asarray(weights, dtype=float),
        )

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(m, c) for m, c in zip(self.means, self.covs)]

    def copy(self) -> "MixtureModel":
        return MixtureModel(self.means.copy(), self.covs.copy(), self.weights.copy())

    def __eq__(self, other):
        if not isinstance(other, MixtureModel):
            return NotImplemented
        return (
            np.array_equal(self.means, other.means)
            and np.array_equal(self.covs, other.covs)
            and np.array_equal(self.weights, other.weights)
        )

    @cached_property
    def _factors(self) -> tuple[np.ndarray, np.ndarray]:
        # Inverse of the triangular factor (not of the covariance) plus
        # log|Sigma|/2, shared by all vectorized evaluations.
        chol = _cholesky(self.covs)
        inv_chol = np.linalg.inv(chol)
        half_log_det = np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return inv_chol, half_log_det


def gaussian_log_density(x, c: GaussianComponent) -> float:
    """Log of the normal density of ``c`` at ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != c.dimension:
        raise ValueError(f"point has dimension {x.shape[0]}, component has {c.dimension}")
    z = solve_triangular(c.cholesky, x - c.mean, lower=True)
    return float(-0.5 * c.dimension * LOG_2PI - c.half_log_det - 0.5 * np.dot(z, z))


def _log_terms(x, model: MixtureModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-component log p_i(x) and log(P_i) + log p_i(x)."""
    logp = np.array([gaussian_log_density(x, c) for c in model.components])
    with np.errstate(divide="ignore"):
        return logp, np.log(model.weights) + logp


def mixture_density(x, model: MixtureModel) -> float:
    """Mixture density at a single point."""
    logp, terms = _log_terms(x, model)
    live = model.weights > 0
    if not np.any(live):
        return 0.0
    if np.min(terms[live]) >= UNDERFLOW_EXPONENT:
        return float(np.sum(model.weights[live] * np.exp(logp[live])))
    return float(np.exp(logsumexp(terms[live])))


def posterior(x, model: MixtureModel) -> np.ndarray:
    """Responsibilities P(i|x) of every component for the point ``x``.

    Raises:
        DegenerateDensity: if no component assigns finite log density to x.
    """
    _, terms = _log_terms(x, model)
    top = np.max(terms)
    if not np.isfinite(top):
        raise DegenerateDensity(f"mixture density vanishes at {np.asarray(x).tolist()}")
    e = np.exp(terms - top)
    return e / np.sum(e)


def component_log_densities(points, model: MixtureModel, chunk: int = 4_000_000) -> np.ndarray:
    """(n, K) matrix of log p_i(x_n), vectorized over points and components."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    inv_chol, half_log_det = model._factors
    K, d = model.means.shape
    out = np.empty((X.shape[0], K))
    step = max(1, chunk // max(1, K * d))
    for lo in range(0, X.shape[0], step):
        diff = X[lo:lo + step, None, :] - model.means[None, :, :]
        z = np.einsum("kij,nkj->nki", inv_chol, diff)
        out[lo:lo + step] = -0.5 * d * LOG_2PI - half_log_det - 0.5 * np.einsum("nki,nki->nk", z, z)
    return out


def log_mixture_density_many(points, model: MixtureModel, chunk: int = 4_000_000) -> np.ndarray:
    """log p(x|Theta) for each row of ``points`` (log-sum-exp throughout)."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    K = model.n_components
    with np.errstate(divide="ignore"):
        log_w = np.log(model.weights)
    out = np.empty(X.shape[0])
    step = max(1, chunk // max(1, K * model.dimension))
    for lo in range(0, X.shape[0], step):
        terms = component_log_densities(X[lo:lo + step], model) + log_w
        out[lo:lo + step] = logsumexp(terms, axis=1)
    return out


def mixture_density_many(points, model: MixtureModel) -> np.ndarray:
    return np.exp(log_mixture_density_many(points, model))


def validate_model(model: MixtureModel) -> list[str]:
    """List every violated mixture invariant; an empty list means valid."""
    problems = []
    means, covs, w = model.means, model.covs, model.weights
    K = w.shape[0]
    if K < 1:
        problems.append("mixture has no components")
        return problems
    if means.shape[0] != K or covs.shape[0] != K:
        problems.append(
            f"length mismatch: {means.shape[0]} means, {covs.shape[0]} covariances, {K} weights"
        )
        return problems
    d = means.shape[1]
    if covs.shape[1:] != (d, d):
        problems.append(f"covariance shape {covs.shape[1:]} does not match dimension {d}")
        return problems
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        problems.append("weights must be finite and non-negative")
    total = float(np.sum(w))
    if not abs(total - 1.0) <= WEIGHT_SUM_TOL:
        problems.append(f"weights sum to {total!r}, not 1")
    if not np.all(np.isfinite(means)):
        problems.append("means must be finite")
    for i, cov in enumerate(covs):
        if not np.all(np.isfinite(cov)):
            problems.append(f"component {i}: covariance is not finite")
            continue
        if np.any(np.abs(cov - cov.T) > SYMMETRY_TOL * np.maximum(1.0, np.abs(cov))):
            problems.append(f"component {i}: covariance is not symmetric")
        if np.min(np.linalg.eigvalsh(cov)) <= 0:
            problems.append(f"component {i}: covariance is not positive definite")
    return problems


def integrate_density(model: MixtureModel, rect, resolution: int) -> float:
    """Midpoint-rule integral of the mixture density over an axis-aligned box.

    Args:
        model: the mixture.
        rect: one ``(lo, hi)`` pair per dimension.
        resolution: midpoints per axis, at least 2.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    bounds = np.asarray(rect, dtype=float).reshape(model.dimension, 2)
    axes = []
    cell = 1.0
    for lo, hi in bounds:
        h = (hi - lo) / resolution
        axes.append(lo + h * (np.arange(resolution) + 0.5))
        cell *= h
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dimension)
    return float(np.sum(mixture_density_many(grid, model)) * cell)


def floor_covariance(cov: np.ndarray, floor: float) -> np.ndarray:
    """Lift the spectrum of a symmetric matrix so its minimum is >= ``floor``."""
    lo = np.linalg.eigvalsh(cov)[0]
    if lo >= floor:
        return cov
    return cov + (floor_target(floor, cov) - lo) * np.eye(cov.shape[0])


def floor_target(floor: float, cov) -> float:
    # A hair above the floor, so rounding in the shift cannot land below it.
    return floor * (1.0 + 1e-9) + 1e-12 * abs(float(np.trace(cov)))
