"""Rectangular node grids with a graph distance and a neighbourhood kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IndexOutOfRange, NonPositiveSigma

METRICS = ("chebyshev", "manhattan")


@dataclass(frozen=True)
class Lattice:
    """A non-wrapping ``width`` x ``height`` grid of nodes.

    Node ``i`` sits at grid coordinates ``(i % width, i // width)``.
    """

    width: int
    height: int
    metric: str = "chebyshev"

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"lattice must be at least 1x1, got {self.width}x{self.height}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")

    @property
    def size(self) -> int:
        return self.width * self.height

    def coords(self, i: int) -> tuple[int, int]:
        self._check(i)
        return i % self.width, i // self.width

    def index(self, gx: int, gy: int) -> int:
        if not (0 <= gx < self.width and 0 <= gy < self.height):
            raise IndexOutOfRange(f"grid position ({gx}, {gy}) outside {self.width}x{self.height}")
        return gy * self.width + gx

    def all_coords(self) -> np.ndarray:
        """(K, 2) integer grid coordinates in node order."""
        idx = np.arange(self.size)
        return np.stack([idx % self.width, idx // self.width], axis=1)

    def _check(self, i: int):
        if not 0 <= i < self.size:
            raise IndexOutOfRange(f"node {i} outside lattice of {self.size} nodes")


def grid_positions(lat: Lattice, domain) -> np.ndarray:
    """Spread the nodes evenly over a rectangle ``(x0, y0, width, height)``.

    Node (gx, gy) lands at the centre of its share of the rectangle, giving a
    (K, 2) array in node order.
    """
    x0, y0, w, h = domain
    g = lat.all_coords()
    return np.stack(
        [x0 + (g[:, 0] + 0.5) * w / lat.width, y0 + (g[:, 1] + 0.5) * h / lat.height], axis=1
    ).astype(float)


def graph_distance(lat: Lattice, i: int, j: int) -> int:
    xi, yi = lat.coords(i)
    xj, yj = lat.coords(j)
    dx, dy = abs(xi - xj), abs(yi - yj)
    return max(dx, dy) if lat.metric == "chebyshev" else dx + dy


def distances_from(lat: Lattice, i: int) -> np.ndarray:
    """Graph distance from node ``i`` to every node, as a (K,) array."""
    xi, yi = lat.coords(i)
    g = lat.all_coords()
    dx, dy = np.abs(g[:, 0] - xi), np.abs(g[:, 1] - yi)
    return np.maximum(dx, dy) if lat.metric == "chebyshev" else dx + dy


def neighbors_within(lat: Lattice, i: int, radius: float) -> list[int]:
    """Nodes within graph distance ``radius`` of ``i``, in ascending order.

    Only the clipped bounding square of the ball is visited.
    """
    xi, yi = lat.coords(i)
    r = int(np.floor(radius))
    if r < 0:
        return []
    out = []
    for gy in range(max(0, yi - r), min(lat.height, yi + r + 1)):
        span = r if lat.metric == "chebyshev" else r - abs(gy - yi)
        row = gy * lat.width
        out.extend(range(row + max(0, xi - span), row + min(lat.width, xi + span + 1)))
    return out


def neighborhood_kernel(z):
    """Strictly decreasing bump with value 1 at 0 and limit 0 at infinity."""
    return np.exp(-0.5 * np.square(z))


def neighborhood_weight(lat: Lattice, i: int, j: int, sigma: float) -> float:
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    return float(neighborhood_kernel(graph_distance(lat, i, j) / sigma))
