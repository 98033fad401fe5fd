"""Classic Kohonen self-organizing map over the same lattice and samplers.

Serves as the comparison baseline for the mixture network and as a plain
vector quantizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.spatial import cKDTree

from .imaging import PointSampler
from .lattice import Lattice, distances_from, grid_positions, neighborhood_kernel
from .mixture import MixtureModel, floor_covariance

# Neighbourhood weights below this are not applied.
H_SKIP = 1e-12
MIN_SIGMA = 0.5


@dataclass(eq=False)
class AnchorSet:
    """Anchor vectors indexed by lattice node."""

    anchors: np.ndarray

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))

    def copy(self) -> "AnchorSet":
        return AnchorSet(self.anchors.copy())

    def __len__(self):
        return self.anchors.shape[0]


def find_winner_voronoi(x, anchors) -> int:
    """Index of the anchor nearest to ``x`` (lowest index on ties)."""
    a = anchors.anchors if isinstance(anchors, AnchorSet) else np.atleast_2d(anchors)
    d2 = np.sum(np.square(a - np.asarray(x, dtype=float)), axis=1)
    return int(np.argmin(d2))


def som_step(anchor_set: AnchorSet, lat: Lattice, x, eta: float, sigma: float) -> AnchorSet:
    """One Kohonen update; returns a new AnchorSet, the input is untouched."""
    x = np.asarray(x, dtype=float)
    a = anchor_set.anchors
    i = find_winner_voronoi(x, a)
    h = neighborhood_kernel(distances_from(lat, i) / sigma)
    h[h < H_SKIP] = 0.0
    return AnchorSet(a + (eta * h)[:, None] * (x - a))


def som_schedule(t: int, T: int, eta0: float, sigma0: float, decay: bool = True):
    """(eta, sigma) for the zero-based step ``t`` of ``T``."""
    if not decay:
        return eta0, sigma0
    frac = 1.0 - t / T
    return eta0 * frac, max(sigma0 * frac, MIN_SIGMA)


@numba.njit(cache=True)
def _som_run(anchors, width, manhattan, origins, jitter, prob, alias, uniforms,
             t0, T, eta0, sigma0, decay, min_sigma, h_skip):
    K, d = anchors.shape
    n = prob.shape[0]
    for s in range(uniforms.shape[0]):
        t = t0 + s
        b = int(uniforms[s, 0] * n)
        if b >= n:
            b = n - 1
        idx = b if uniforms[s, 1] < prob[b] else alias[b]
        x0 = origins[idx, 0] + jitter * uniforms[s, 2]
        x1 = origins[idx, 1] + jitter * uniforms[s, 3]
        if decay:
            frac = 1.0 - t / T
            eta = eta0 * frac
            sigma = max(sigma0 * frac, min_sigma)
        else:
            eta = eta0
            sigma = sigma0
        win = 0
        best = np.inf
        for k in range(K):
            e0 = x0 - anchors[k, 0]
            e1 = x1 - anchors[k, 1]
            dd = e0 * e0 + e1 * e1
            if dd < best:
                best = dd
                win = k
        wx = win % width
        wy = win // width
        for j in range(K):
            gx = abs(j % width - wx)
            gy = abs(j // width - wy)
            dist = gx + gy if manhattan else max(gx, gy)
            z = dist / sigma
            h = np.exp(-0.5 * z * z)
            if h < h_skip:
                continue
            g = eta * h
            anchors[j, 0] += g * (x0 - anchors[j, 0])
            anchors[j, 1] += g * (x1 - anchors[j, 1])


def som_train(dist: PointSampler, lat: Lattice, T: int, eta0: float = 0.5,
              sigma0: float | None = None, seed: int = 0, decay: bool = True,
              init: str = "grid", chunk: int = 65536) -> AnchorSet:
    """Train a Kohonen map on samples drawn from ``dist``.

    Args:
        dist: point sampler (usually an image's darkness distribution).
        lat: node topology.
        T: number of iterations.
        eta0: initial learning rate.
        sigma0: initial neighbourhood width; defaults to half the larger
            lattice side.
        seed: seed for the sample stream (and random initialization).
        decay: linearly decay eta and sigma; otherwise keep them constant.
        init: ``"grid"`` for an even placement over the domain, ``"random"``
            for uniform random positions.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if sigma0 is None:
        sigma0 = max(lat.width, lat.height) / 2.0
    rng = np.random.default_rng(seed)
    anchors = initial_anchors(lat, dist.domain, init, rng)
    for lo in range(0, T, chunk):
        u = rng.random((min(chunk, T - lo), 4))
        _som_run(anchors.anchors, lat.width, lat.metric == "manhattan", dist.origins, dist.jitter,
                 dist.table.prob, dist.table.alias, u, lo, T, eta0, sigma0, decay, MIN_SIGMA, H_SKIP)
    return anchors


def initial_anchors(lat: Lattice, domain, init: str = "grid", rng=None) -> AnchorSet:
    if init == "grid":
        return AnchorSet(grid_positions(lat, domain))
    if init == "random":
        x0, y0, w, h = domain
        rng = np.random.default_rng() if rng is None else rng
        return AnchorSet(np.array([x0, y0]) + rng.random((lat.size, 2)) * np.array([w, h]))
    raise ValueError(f"unknown init {init!r}")


def quantization_error(anchors: AnchorSet, points) -> float:
    """Mean distance from each point to its nearest anchor."""
    dist, _ = cKDTree(anchors.anchors).query(np.atleast_2d(points))
    return float(np.mean(dist))


def anchors_to_mixture(anchors: AnchorSet, dist: PointSampler, covariance_floor: float = 0.25) -> MixtureModel:
    """Read a trained codebook as a Gaussian mixture.

    Each anchor becomes a component centred on itself; its weight is the
    share of mass in its Voronoi cell and its covariance the mass-weighted
    scatter of that cell around the anchor (cells are integrated exactly over
    the distribution's cells, including the within-cell jitter variance).
    Empty cells get zero weight and the floor covariance.
    """
    a = anchors.anchors
    K = a.shape[0]
    centres = dist.origins + 0.5 * dist.jitter
    mass = dist.cell_masses.astype(float)
    live = mass > 0
    centres, mass = centres[live], mass[live]
    _, owner = cKDTree(a).query(centres)
    cell_mass = np.bincount(owner, weights=mass, minlength=K)
    diff = centres - a[owner]
    scatter = np.zeros((K, 2, 2))
    np.add.at(scatter, owner, mass[:, None, None] * diff[:, :, None] * diff[:, None, :])
    covs = np.empty((K, 2, 2))
    jitter_var = dist.jitter ** 2 / 12.0
    for k in range(K):
        if cell_mass[k] > 0:
            c = scatter[k] / cell_mass[k] + jitter_var * np.eye(2)
        else:
            c = np.zeros((2, 2))
        covs[k] = floor_covariance(c, covariance_floor)
    return MixtureModel(a.copy(), covs, cell_mass / cell_mass.sum())

