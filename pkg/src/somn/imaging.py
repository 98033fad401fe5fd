"""Grayscale images as 2-D probability distributions, and back again.

Probability mass lives in the *dark* pixels: a pixel of brightness ``l``
carries mass ``255 - l``. Sampling draws a pixel in O(1) from an alias table
and jitters the point uniformly inside it, so the continuous domain of an
``M x N`` image is ``[0, M) x [0, N)``. Rendering reverses the mapping by
evaluating the density at pixel centres.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numba
import numpy as np

from .errors import AllWhiteImage, MalformedHeader, PGMError, TruncatedData, UnsupportedMaxval
from .mixture import MixtureModel, _cholesky

MAXVAL = 255


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale image; ``pixels[y, x]`` is the brightness at (x, y)."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > MAXVAL):
            raise ValueError("pixel values must lie in [0, 255]")
        object.__setattr__(self, "pixels", arr.astype(np.uint8))

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "GrayImage":
        return cls(np.asarray(values).reshape(height, width))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


# --------------------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n\r]*[\r\n]\s*)*")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    pos = 2
    tokens = []
    while len(tokens) < count:
        m = _TOKEN.match(data, pos)
        pos = m.end()
        # A comment may run to end-of-file without a newline.
        if pos < len(data) and data[pos:pos + 1] == b"#":
            raise MalformedHeader("unterminated comment in header")
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeader(f"header ended after {len(tokens)} of {count} fields")
        tokens.append(data[start:pos])
    return tokens, pos


def load_pgm(data: bytes) -> GrayImage:
    """Decode an ASCII (P2) or binary (P5) PGM with maxval <= 255.

    Samples are taken verbatim; a maxval below 255 does not rescale them.
    """
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise MalformedHeader(f"unsupported magic number {magic!r}")
    tokens, pos = _header_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedHeader(f"non-integer header field in {tokens!r}") from exc
    if width < 1 or height < 1:
        raise MalformedHeader(f"invalid dimensions {width}x{height}")
    if maxval < 1:
        raise MalformedHeader(f"invalid maxval {maxval}")
    if maxval > MAXVAL:
        raise UnsupportedMaxval(f"maxval {maxval} exceeds {MAXVAL}")
    n = width * height

    if magic == b"P5":
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise MalformedHeader("missing whitespace after maxval")
        raster = data[pos + 1:pos + 1 + n]
        if len(raster) < n:
            raise TruncatedData(f"expected {n} samples, got {len(raster)}")
        values = np.frombuffer(raster, dtype=np.uint8)
    else:
        body = re.sub(rb"#[^\n\r]*", b"", data[pos:]).split()
        if len(body) < n:
            raise TruncatedData(f"expected {n} samples, got {len(body)}")
        try:
            values = np.array([int(v) for v in body[:n]], dtype=np.int64)
        except ValueError as exc:
            raise PGMError("non-integer sample in ASCII raster") from exc
    if values.max() > maxval:
        raise PGMError(f"sample {int(values.max())} exceeds maxval {maxval}")
    return GrayImage.from_flat(width, height, values)


def save_pgm(img: GrayImage, variant: str = "binary") -> bytes:
    """Encode as P5 (``variant="binary"``) or P2 (``"ascii"``), maxval 255."""
    if variant not in ("binary", "ascii"):
        raise ValueError(f"variant must be 'binary' or 'ascii', got {variant!r}")
    if variant == "binary":
        header = f"P5\n{img.width} {img.height}\n{MAXVAL}\n".encode("ascii")
        return header + img.pixels.tobytes()
    flat = img.pixels.reshape(-1)
    lines = [f"P2\n{img.width} {img.height}\n{MAXVAL}"]
    # Netpbm asks for lines of at most 70 characters.
    for lo in range(0, flat.size, 16):
        lines.append(" ".join(str(int(v)) for v in flat[lo:lo + 16]))
    return ("\n".join(lines) + "\n").encode("ascii")


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return load_pgm(fh.read())


def write_pgm(path, img: GrayImage, variant: str = "binary"):
    with open(path, "wb") as fh:
        fh.write(save_pgm(img, variant))


def total_brightness(img: GrayImage) -> int:
    return int(np.sum(img.pixels, dtype=np.int64))


# ---------------------------------------------------------------------- sampling

class AliasTable:
    """Walker/Vose alias table for O(1) draws from integer masses.

    Construction uses exact integer arithmetic, so the acceptance probability
    of every bucket is ``masses * n / total`` rounded only once.
    """

    def __init__(self, masses):
        masses = np.asarray(masses, dtype=np.int64).reshape(-1)
        if masses.size == 0 or np.any(masses < 0):
            raise ValueError("masses must be a non-empty array of non-negative integers")
        total = int(masses.sum())
        if total <= 0:
            raise ValueError("masses sum to zero")
        n = masses.size
        scaled = [int(m) * n for m in masses]
        prob = np.ones(n)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i, s in enumerate(scaled) if s < total]
        large = [i for i, s in enumerate(scaled) if s >= total]
        while small and large:
            lo = small.pop()
            hi = large.pop()
            prob[lo] = scaled[lo] / total
            alias[lo] = hi
            scaled[hi] -= total - scaled[lo]
            (small if scaled[hi] < total else large).append(hi)
        # Whatever remains is full (exactly, since arithmetic is integral).
        self.prob = prob
        self.alias = alias
        self.n = n

    def pick(self, u_bucket: float, u_coin: float) -> int:
        b = min(int(u_bucket * self.n), self.n - 1)
        return b if u_coin < self.prob[b] else int(self.alias[b])

    def pick_many(self, u_bucket: np.ndarray, u_coin: np.ndarray) -> np.ndarray:
        b = np.minimum((u_bucket * self.n).astype(np.int64), self.n - 1)
        return np.where(u_coin < self.prob[b], b, self.alias[b])


class PointSampler:
    """Discrete distribution over cells, each cell an origin plus uniform jitter.

    One draw consumes exactly four uniforms from the generator: bucket, coin,
    and the two jitter offsets.
    """

    def __init__(self, origins, masses, jitter: float, domain):
        self.origins = np.ascontiguousarray(origins, dtype=float)
        self.cell_masses = np.asarray(masses, dtype=np.int64).reshape(-1)
        self.table = AliasTable(self.cell_masses)
        self.jitter = float(jitter)
        # (x0, y0, width, height) of the region the samples live in.
        self.domain = tuple(float(v) for v in domain)

    def points_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        idx = self.table.pick_many(u[:, 0], u[:, 1])
        return self.origins[idx] + self.jitter * u[:, 2:4]

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        return self.points_from_uniforms(rng.random(4))[0]

    def draw_many(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.points_from_uniforms(rng.random((n, 4)))


class PixelDistribution(PointSampler):
    """Darkness mass of an image, with an O(1) pixel sampler.

    Attributes:
        masses: (height, width) integer darkness ``255 - brightness``.
        total_mass: sum of ``masses`` (the normaliser L').
    """

    def __init__(self, img: GrayImage):
        self.width = img.width
        self.height = img.height
        self.masses = MAXVAL - img.pixels.astype(np.int64)
        self.total_mass = int(self.masses.sum())
        if self.total_mass == 0:
            raise AllWhiteImage("image is uniformly white; it carries no darkness mass")
        ys, xs = np.divmod(np.arange(img.width * img.height), img.width)
        origins = np.stack([xs, ys], axis=1).astype(float)
        super().__init__(origins, self.masses.reshape(-1), 1.0, (0.0, 0.0, img.width, img.height))

    def to_image(self) -> GrayImage:
        return GrayImage(MAXVAL - self.masses)


class EmpiricalDistribution(PointSampler):
    """Uniform resampling of a fixed point cloud (no jitter).

    The domain is the bounding box of the points.
    """

    def __init__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        super().__init__(points, np.ones(points.shape[0], dtype=np.int64), 0.0,
                         (lo[0], lo[1], span[0], span[1]))


def darkness_mass(img: GrayImage) -> PixelDistribution:
    return PixelDistribution(img)


def sample_point(dist: PointSampler, rng: np.random.Generator) -> np.ndarray:
    """Draw one continuous point from ``dist``."""
    return dist.draw(rng)


# --------------------------------------------------------------------- rendering

# exp() of anything below this is exactly 0.0 in double precision.
_EXP_ZERO = -746.0


@numba.njit(cache=True)
def _splat(out, means, inv11, l21, inv22, log_pref):
    height, width = out.shape
    for k in range(means.shape[0]):
        # Quadratic forms above qmax contribute exp(...) == 0.
        qmax = 2.0 * (log_pref[k] - _EXP_ZERO)
        if qmax <= 0.0:
            continue
        l11 = 1.0 / inv11[k]
        l22 = 1.0 / inv22[k]
        reach_x = np.sqrt(qmax) * l11
        reach_y = np.sqrt(qmax) * np.sqrt(l21[k] * l21[k] + l22 * l22)
        mx = means[k, 0]
        my = means[k, 1]
        if mx + reach_x < 0.0 or mx - reach_x > width or my + reach_y < 0.0 or my - reach_y > height:
            continue
        x_lo = max(0, int(np.floor(mx - reach_x - 0.5)))
        x_hi = min(width - 1, int(np.ceil(mx + reach_x - 0.5)))
        y_lo = max(0, int(np.floor(my - reach_y - 0.5)))
        y_hi = min(height - 1, int(np.ceil(my + reach_y - 0.5)))
        for py in range(y_lo, y_hi + 1):
            dy = py + 0.5 - my
            for px in range(x_lo, x_hi + 1):
                z1 = (px + 0.5 - mx) * inv11[k]
                z2 = (dy - l21[k] * z1) * inv22[k]
                e = log_pref[k] - 0.5 * (z1 * z1 + z2 * z2)
                if e > _EXP_ZERO:
                    out[py, px] += np.exp(e)


def density_grid(model: MixtureModel, width: int, height: int) -> np.ndarray:
    """Mixture density at every pixel centre, as a (height, width) array."""
    if model.dimension != 2:
        raise ValueError("rendering needs a 2-D mixture")
    chol = _cholesky(model.covs)
    l11, l21, l22 = chol[:, 0, 0], chol[:, 1, 0], chol[:, 1, 1]
    with np.errstate(divide="ignore"):
        log_pref = np.log(model.weights) - np.log(2.0 * np.pi) - np.log(l11) - np.log(l22)
    out = np.zeros((height, width))
    _splat(out, np.ascontiguousarray(model.means), 1.0 / l11, np.ascontiguousarray(l21),
           1.0 / l22, log_pref)
    return out


def render(model: MixtureModel, width: int, height: int, target_mass: float) -> GrayImage:
    """Turn a mixture into an image whose total darkness is ~``target_mass``."""
    if target_mass < 0:
        raise ValueError("target_mass must be non-negative")
    if target_mass == 0:
        return GrayImage(np.full((height, width), MAXVAL))
    dark = np.clip(np.rint(target_mass * density_grid(model, width, height)), 0, MAXVAL)
    return GrayImage(MAXVAL - dark.astype(np.int64))
