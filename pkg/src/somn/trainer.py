"""Online training of a self-organizing mixture network (SOMN).

Each lattice node is a full Gaussian component. Per iteration the trainer
draws one point, picks the node with the largest posterior as the winner,
and moves every node within the current lattice radius of the winner toward
the point in proportion to that node's own posterior: means, covariances and
(damped) weights alike. Weights are then renormalized over the whole network.

The per-iteration work runs in the compiled kernel of ``somn._kernel``.
Posterior shares below 1e-12 of the winner's count as exactly zero, and
whole lattice tiles whose score bound cannot reach that cutoff are skipped.
Weights are kept unnormalized with a tracked total, so renormalizing costs
O(1) per iteration.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import _kernel
from .errors import DegenerateDensity, MalformedCheckpoint, SomnError, VersionMismatch
from .imaging import PointSampler
from .lattice import Lattice, grid_positions
from .mixture import MixtureModel, posterior
from .som import find_winner_voronoi

LEARN_RANGE = (0.01, 1.00)
WEIGHT_RANGE = (0.00001, 0.00100)


class ConfigError(SomnError, ValueError):
    """A training parameter is out of range. ``field`` names the offender."""

    def __init__(self, field_name: str, message: str):
        super().__init__(message)
        self.field = field_name


@dataclass
class TrainConfig:
    """Everything that determines a training run.

    ``learn`` scales the mean/covariance learning rate and ``weight`` further
    damps the rate applied to mixing weights. ``initial_radius`` defaults to
    half the larger grid side. With ``sequential`` the covariance update sees
    the already-moved mean; ``undamped_weights`` drops the ``weight`` factor.
    """

    grid_width: int = 10
    grid_height: int = 10
    iterations: int = 100_000
    learn: float = 0.15
    weight: float = 0.00005
    seed: int = 0
    cooling_floor: float = 0.01
    initial_radius: Optional[float] = None
    covariance_floor: float = 0.25
    metric: str = "chebyshev"
    sequential: bool = False
    undamped_weights: bool = False

    def __post_init__(self):
        if self.grid_width < 1 or self.grid_height < 1:
            raise ConfigError("grid", f"grid must be at least 1x1, got {self.grid_width}x{self.grid_height}")
        if self.iterations < 1:
            raise ConfigError("iterations", f"iterations must be >= 1, got {self.iterations}")
        lo, hi = LEARN_RANGE
        if not lo <= self.learn <= hi:
            raise ConfigError("learn", f"learn must be in [{lo:.2f}, {hi:.2f}], got {self.learn}")
        lo, hi = WEIGHT_RANGE
        if not lo <= self.weight <= hi:
            raise ConfigError("weight", f"weight must be in [{lo:.5f}, {hi:.5f}], got {self.weight}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if not 0.0 <= self.cooling_floor <= 1.0:
            raise ConfigError("cooling_floor", f"cooling_floor must be in [0, 1], got {self.cooling_floor}")
        if self.initial_radius is not None and not self.initial_radius >= 0:
            raise ConfigError("initial_radius", f"initial_radius must be >= 0, got {self.initial_radius}")
        if not self.covariance_floor > 0:
            raise ConfigError("covariance_floor", f"covariance_floor must be > 0, got {self.covariance_floor}")
        if self.metric not in ("chebyshev", "manhattan"):
            raise ConfigError("metric", f"metric must be chebyshev or manhattan, got {self.metric!r}")

    @property
    def radius0(self) -> float:
        if self.initial_radius is None:
            return max(self.grid_width, self.grid_height) / 2.0
        return float(self.initial_radius)

    def lattice(self) -> Lattice:
        return Lattice(self.grid_width, self.grid_height, self.metric)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_radius"] = self.radius0
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def learning_rate(t: int, cfg: TrainConfig) -> float:
    """Mean/covariance rate a(t) for the 1-based iteration ``t``."""
    return cfg.learn * max(1.0 - (t - 1) / cfg.iterations, cfg.cooling_floor)


def weight_rate(t: int, cfg: TrainConfig) -> float:
    a = learning_rate(t, cfg)
    return a if cfg.undamped_weights else a * cfg.weight


def radius(t: int, cfg: TrainConfig) -> float:
    """Lattice radius of the update ball; reaches exactly 0 at t = T."""
    T = cfg.iterations
    if T == 1:
        return 0.0
    return cfg.radius0 * (1.0 - (t - 1) / (T - 1))


# --------------------------------------------------------------------- state

@dataclass(eq=False)
class SomnState:
    """Running mixture estimate on a lattice, plus the iteration counter.

    ``t`` counts completed iterations. ``rng_state`` is the sample stream's
    generator state after those iterations (set by :func:`fit`). Means and
    covariances are live arrays; ``weights`` is a normalized copy because
    the kernel keeps unnormalized weights internally.
    """

    lattice: Lattice
    means: np.ndarray
    covs: np.ndarray
    raw_weights: np.ndarray
    t: int = 0
    config: Optional[TrainConfig] = None
    rng_state: Optional[dict] = None
    _work: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.means = np.ascontiguousarray(self.means, dtype=float)
        self.covs = np.ascontiguousarray(self.covs, dtype=float)
        self.raw_weights = np.ascontiguousarray(self.raw_weights, dtype=float)
        lat = self.lattice
        K = self.raw_weights.shape[0]
        if self.means.shape != (K, 2) or self.covs.shape != (K, 2, 2) or K != lat.size:
            raise ValueError("state arrays do not match the lattice")
        tile_w = _kernel.tile_size(lat.width, lat.height)
        ntx = -(-lat.width // tile_w)
        nt = ntx * -(-lat.height // tile_w)
        self._work = dict(
            totals=np.zeros(1),
            fac=np.empty((K, 3)),
            lognorm=np.empty(K),
            lammax=np.empty(K),
            post=np.zeros(K),
            cand_idx=np.zeros(K, dtype=np.int64),
            cand_s=np.empty(K),
            tiles=np.empty((nt, _kernel.TILE_COLS)),
            ub=np.empty(nt),
            dirty=np.zeros(nt, dtype=np.bool_),
            dirty_list=np.zeros(nt, dtype=np.int64),
            tile_w=tile_w,
            ntx=ntx,
        )
        w = self._work
        _kernel.refresh_all(self.means, self.covs, self.raw_weights, w["totals"], w["fac"],
                            w["lognorm"], w["lammax"], w["tiles"], tile_w, ntx, lat.width, lat.height)

    @property
    def weights(self) -> np.ndarray:
        return self.raw_weights / np.sum(self.raw_weights)

    @property
    def weight_total(self) -> float:
        """Tracked sum of ``raw_weights`` as the kernel sees it."""
        return float(self._work["totals"][0])

    @property
    def model(self) -> MixtureModel:
        """Snapshot copy of the current mixture."""
        return MixtureModel(self.means.copy(), self.covs.copy(), self.weights)

    def copy(self) -> "SomnState":
        out = SomnState(self.lattice, self.means.copy(), self.covs.copy(), self.raw_weights.copy(),
                        self.t, self.config, self.rng_state)
        out._work["totals"][0] = self._work["totals"][0]
        return out

    def _kernel_args(self, cfg: TrainConfig) -> tuple:
        w = self._work
        lat = self.lattice
        return (self.means, self.covs, self.raw_weights, w["totals"], w["fac"], w["lognorm"],
                w["lammax"], w["post"], w["cand_idx"], w["cand_s"], w["tiles"], w["ub"],
                w["dirty"], w["dirty_list"], w["tile_w"], w["ntx"], lat.width, lat.height,
                lat.metric == "manhattan", cfg.learn, cfg.weight, cfg.cooling_floor, cfg.radius0,
                cfg.covariance_floor, cfg.sequential, cfg.undamped_weights)


def initialize(cfg: TrainConfig, domain) -> SomnState:
    """Fresh network spread evenly over ``domain = (x0, y0, width, height)``.

    Every covariance starts isotropic with the node spacing as standard
    deviation (never below the covariance floor); weights start uniform.
    """
    lat = cfg.lattice()
    _, _, w, h = domain
    s = max(w / lat.width, h / lat.height)
    var = max(s * s, cfg.covariance_floor)
    K = lat.size
    covs = np.tile(var * np.eye(2), (K, 1, 1))
    return SomnState(lat, grid_positions(lat, domain), covs, np.full(K, 1.0 / K), 0, cfg)


def find_winner_posterior(x, state: SomnState) -> int:
    """Node with the largest posterior for ``x`` (lowest index on ties)."""
    try:
        return int(np.argmax(posterior(x, state.model)))
    except DegenerateDensity:
        return find_winner_voronoi(x, state.means)


def somn_step(state: SomnState, x, t: int, cfg: TrainConfig) -> SomnState:
    """Apply iteration ``t`` (1-based) for the point ``x``, in place.

    Returns the same state object with ``state.t`` set to ``t``.
    """
    if not 1 <= t <= cfg.iterations:
        raise ValueError(f"iteration {t} outside schedule 1..{cfg.iterations}")
    x0, x1 = (float(v) for v in np.asarray(x, dtype=float).reshape(2))
    _kernel.step(x0, x1, t, cfg.iterations, *state._kernel_args(cfg))
    state.t = t
    return state


@dataclass
class TrainProgress:
    """Snapshot handed to progress callbacks. ``state`` is live; do not mutate."""

    t: int
    learning_rate: float
    radius: float
    weight_sum: float
    min_weight: float
    min_cov_eigenvalue: float
    state: SomnState


def _progress(state: SomnState, cfg: TrainConfig) -> TrainProgress:
    t = max(state.t, 1)
    weights = state.weights
    return TrainProgress(
        t=state.t,
        learning_rate=learning_rate(t, cfg),
        radius=radius(t, cfg),
        weight_sum=float(np.sum(weights)),
        min_weight=float(np.min(weights)),
        min_cov_eigenvalue=float(np.min(np.linalg.eigvalsh(state.covs))),
        state=state,
    )


def fit(cfg: TrainConfig, dist: PointSampler,
        progress: Callable[[int, TrainProgress], None] | None = None,
        progress_every: int | None = None,
        state: SomnState | None = None,
        rng: np.random.Generator | None = None,
        checkpoint: Callable[[SomnState], None] | None = None,
        checkpoint_every: int | None = None,
        chunk: int = 65536) -> SomnState:
    """Run (or resume) training and return the final state.

    Args:
        cfg: training parameters; ``cfg.seed`` seeds the sample stream.
        dist: where samples come from.
        progress: called as ``progress(t, snapshot)`` every
            ``progress_every`` iterations (default ``max(T // 100, 1)``) and
            after the last one.
        state: resume from this state (e.g. a loaded checkpoint). Its
            ``rng_state`` restores the sample stream.
        rng: explicit generator; overrides seed and any saved stream.
        checkpoint: called with the live state every ``checkpoint_every``
            iterations.
    """
    T = cfg.iterations
    if state is None:
        state = initialize(cfg, dist.domain)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state
    state.config = cfg
    every = progress_every or max(T // 100, 1)
    table = dist.table

    t = state.t
    while t < T:
        n = min(chunk, T - t)
        if progress is not None:
            n = min(n, every - t % every)
        if checkpoint is not None and checkpoint_every:
            n = min(n, checkpoint_every - t % checkpoint_every)
        u = rng.random((n, 4))
        _kernel.run(u, dist.origins, dist.jitter, table.prob, table.alias, t + 1, T,
                    *state._kernel_args(cfg))
        t += n
        state.t = t
        state.rng_state = rng.bit_generator.state
        if progress is not None and (t % every == 0 or t == T):
            progress(t, _progress(state, cfg))
        if checkpoint is not None and checkpoint_every and t % checkpoint_every == 0:
            checkpoint(state)
    return state


def train(cfg: TrainConfig, dist: PointSampler, progress=None, **kwargs) -> MixtureModel:
    """Train from scratch and return the fitted mixture."""
    return fit(cfg, dist, progress=progress, **kwargs).model


# --------------------------------------------------------------- checkpoints

CHECKPOINT_HEADER = "SOMN-CHECKPOINT v1"


def save_checkpoint(state: SomnState) -> bytes:
    """Serialize a training state.

    The body is the model text format, except that its weight column holds
    the kernel's unnormalized weights; ``weight_total`` is their tracked sum.
    Both are stored so that a resumed run continues bit-for-bit.
    """
    from .serialization import _fmt, dumps_model

    cfg = None if state.config is None else state.config.to_dict()
    lines = [
        CHECKPOINT_HEADER,
        f"iteration {state.t}",
        f"metric {state.lattice.metric}",
        f"weight_total {_fmt(state.weight_total)}",
        "config " + json.dumps(cfg, sort_keys=True),
        "rng " + json.dumps(state.rng_state, sort_keys=True),
    ]
    raw = MixtureModel(state.means, state.covs, state.raw_weights)
    body = dumps_model(raw, (state.lattice.width, state.lattice.height))
    return ("\n".join(lines) + "\n" + body).encode("utf-8")


def load_checkpoint(data: bytes) -> SomnState:
    from .serialization import loads_model

    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedCheckpoint("checkpoint is not UTF-8 text") from exc
    lines = text.split("\n", 6)
    if not lines[0].startswith("SOMN-CHECKPOINT"):
        raise MalformedCheckpoint("missing checkpoint header")
    if lines[0].strip() != CHECKPOINT_HEADER:
        raise VersionMismatch(f"unsupported checkpoint version {lines[0].strip()!r}")
    if len(lines) < 7:
        raise MalformedCheckpoint("checkpoint truncated in its header")
    try:
        fields_ = {}
        for ln, key in zip(lines[1:6], ("iteration", "metric", "weight_total", "config", "rng")):
            tag, _, value = ln.partition(" ")
            if tag != key:
                raise ValueError(f"expected {key!r} line, got {tag!r}")
            fields_[key] = value
        t = int(fields_["iteration"])
        total = float(fields_["weight_total"])
        cfg = json.loads(fields_["config"])
        rng_state = json.loads(fields_["rng"])
        lattice = Lattice(*_grid_of(lines[6]), fields_["metric"])
    except ValueError as exc:
        raise MalformedCheckpoint(f"bad checkpoint header: {exc}") from exc
    model, _ = loads_model(lines[6])
    if model.dimension != 2:
        raise MalformedCheckpoint("checkpoints hold 2-D mixtures only")
    config = None if cfg is None else TrainConfig.from_dict(cfg)
    state = SomnState(lattice, model.means, model.covs, model.weights, t, config, rng_state)
    state._work["totals"][0] = total
    return state


def _grid_of(model_text: str) -> tuple[int, int]:
    parts = model_text.split("\n", 2)
    if len(parts) < 2:
        raise ValueError("model body truncated")
    tag, w, h = parts[1].split()
    if tag != "grid":
        raise ValueError("expected 'grid' line in model body")
    return int(w), int(h)
