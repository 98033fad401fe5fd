"""Scoring reconstructions, plus a plain EM fit used as a reference model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionMismatch, InsufficientSamples
from .imaging import MAXVAL, GrayImage, PointSampler
from .mixture import MixtureModel, component_log_densities, floor_covariance, log_mixture_density_many

CSV_HEADER = "mae,mse,psnr,avg_log_likelihood,darkness_ratio"

# Written in place of an infinite PSNR (identical images) in CSV and JSON.
PSNR_SENTINEL = 999.0

# EM may lose this much log-likelihood per iteration to rounding.
EM_SLACK = 1e-9


@dataclass
class EvalReport:
    """Image and model quality numbers.

    ``psnr`` is ``inf`` for identical images; serialized forms use
    ``PSNR_SENTINEL`` instead. Fields that were not computed are None.
    """

    mae: float
    mse: float
    psnr: float
    avg_log_likelihood: float | None = None
    darkness_ratio: float | None = None

    def to_dict(self) -> dict:
        psnr = PSNR_SENTINEL if math.isinf(self.psnr) else self.psnr
        return dict(mae=self.mae, mse=self.mse, psnr=psnr,
                    avg_log_likelihood=self.avg_log_likelihood, darkness_ratio=self.darkness_ratio)

    def to_csv_row(self) -> str:
        return ",".join("" if v is None else repr(float(v)) for v in self.to_dict().values())

    @classmethod
    def from_csv_row(cls, row: str) -> "EvalReport":
        vals = [None if v == "" else float(v) for v in row.strip().split(",")]
        if len(vals) != 5:
            raise ValueError(f"expected 5 fields, got {len(vals)}")
        if vals[2] == PSNR_SENTINEL:
            vals[2] = math.inf
        return cls(*vals)


def psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(MAXVAL * MAXVAL / mse)


def darkness_ratio(original: GrayImage, rendered: GrayImage) -> float | None:
    """Total darkness of ``rendered`` over that of ``original`` (None if the latter is 0)."""
    base = int(np.sum(MAXVAL - original.pixels.astype(np.int64)))
    if base == 0:
        return None
    return float(np.sum(MAXVAL - rendered.pixels.astype(np.int64))) / base


def compare_images(original: GrayImage, rendered: GrayImage) -> EvalReport:
    if original.pixels.shape != rendered.pixels.shape:
        raise DimensionMismatch(
            f"{original.width}x{original.height} image compared with "
            f"{rendered.width}x{rendered.height}"
        )
    diff = original.pixels.astype(np.float64) - rendered.pixels.astype(np.float64)
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    return EvalReport(mae, mse, psnr_from_mse(mse), darkness_ratio=darkness_ratio(original, rendered))


def avg_log_likelihood(model: MixtureModel, dist: PointSampler, n_samples: int, seed=0) -> float:
    """Mean log-density of ``model`` over fresh draws from ``dist``.

    Draws come from ``numpy.random.default_rng(seed)``, so a longer run with
    the same seed extends a shorter one.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    pts = dist.draw_many(np.random.default_rng(seed), n_samples)
    return float(np.mean(log_mixture_density_many(pts, model)))


# ------------------------------------------------------------------------ EM


def farthest_point_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of K seeds: a random first point, then each next point farthest
    from those already picked (lowest index on ties)."""
    chosen = [int(rng.integers(X.shape[0]))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((X - X[nxt]) ** 2, axis=1))
    return np.array(chosen)


def _expected_loglik(cov: np.ndarray, scatter: np.ndarray) -> float:
    # Per-sample expected complete-data term for one component, up to constants.
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (logdet + float(np.trace(np.linalg.solve(cov, scatter))))


def _floored_cov(scatter: np.ndarray, previous: np.ndarray, floor: float) -> np.ndarray:
    """Covariance M-step under the floor.

    The eigenvalue shift used by the online trainer is tried first. If it
    would score worse than the previous covariance, the exact constrained
    optimum (eigenvalues clipped at the floor) is used so EM stays monotone.
    """
    shifted = floor_covariance(scatter, floor)
    if shifted is scatter:
        return scatter
    if _expected_loglik(shifted, scatter) >= _expected_loglik(previous, scatter):
        return shifted
    lam, vec = np.linalg.eigh(scatter)
    return (vec * np.maximum(lam, floor * (1.0 + 1e-9))) @ vec.T


def em_fit(samples, K: int, iterations: int, seed=0, covariance_floor: float = 0.25,
           return_history: bool = False):
    """Maximum-likelihood Gaussian mixture by expectation-maximization.

    Args:
        samples: (n, d) points, n >= K.
        K: number of components.
        iterations: EM rounds, at least 1.
        seed: seeds the farthest-point initialization.
        covariance_floor: smallest allowed covariance eigenvalue.
        return_history: also return the mean training log-likelihood after
            each round.

    Raises:
        InsufficientSamples: fewer samples than components.
        ArithmeticError: the log-likelihood dropped by more than rounding.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    n, d = X.shape
    if K < 1 or n < K:
        raise InsufficientSamples(f"{n} samples cannot support {K} components")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")

    rng = np.random.default_rng(seed)
    means = X[farthest_point_init(X, K, rng)].copy()
    pooled = floor_covariance(np.atleast_2d(np.cov(X.T, bias=True)), covariance_floor)
    covs = np.tile(pooled, (K, 1, 1))
    weights = np.full(K, 1.0 / K)

    history = []
    for _ in range(iterations):
        model = MixtureModel(means, covs, weights)
        with np.errstate(divide="ignore"):
            logp = component_log_densities(X, model) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        live = nk > 0
        weights = nk / n
        new_means = means.copy()
        new_means[live] = (resp.T @ X)[live] / nk[live, None]
        new_covs = covs.copy()
        for k in np.nonzero(live)[0]:
            diff = X - new_means[k]
            scatter = (resp[:, k, None] * diff).T @ diff / nk[k]
            scatter = 0.5 * (scatter + scatter.T)
            new_covs[k] = _floored_cov(scatter, covs[k], covariance_floor)
        means, covs = new_means, new_covs
        history.append(float(np.mean(log_mixture_density_many(X, MixtureModel(means, covs, weights)))))
        _check_monotone(float(np.mean(norm)), history[-1])

    model = MixtureModel(means, covs, weights)
    return (model, history) if return_history else model


def _check_monotone(before: float, after: float):
    if after < before - EM_SLACK * max(1.0, abs(before)):
        raise ArithmeticError(f"EM log-likelihood decreased from {before!r} to {after!r}")
