"""Versioned text format for mixture models.

::

    SOMN-MODEL v1
    grid W H
    dim d
    <index> <weight> <mean: d values> <cov row-major: d*d values>
    ...                                   (W*H node lines)

Reals are written with 17 significant digits, which round-trips every
64-bit float exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import MalformedCheckpoint, VersionMismatch
from .mixture import MixtureModel

MODEL_HEADER = "SOMN-MODEL v1"


def _fmt(v: float) -> str:
    return "%.17g" % v


def dumps_model(model: MixtureModel, grid: tuple[int, int] | None = None) -> str:
    """Serialize ``model``; ``grid`` defaults to ``(K, 1)``."""
    K, d = model.means.shape
    w, h = grid if grid is not None else (K, 1)
    if w * h != K:
        raise ValueError(f"grid {w}x{h} does not hold {K} components")
    out = [MODEL_HEADER, f"grid {w} {h}", f"dim {d}"]
    for i in range(K):
        vals = [model.weights[i], *model.means[i], *model.covs[i].reshape(-1)]
        out.append(f"{i} " + " ".join(_fmt(v) for v in vals))
    return "\n".join(out) + "\n"


def loads_model(text: str) -> tuple[MixtureModel, tuple[int, int]]:
    """Parse the text format; returns the model and its ``(W, H)`` grid."""
    lines = text.splitlines()
    if not lines:
        raise MalformedCheckpoint("empty model file")
    if lines[0].strip() != MODEL_HEADER:
        raise VersionMismatch(f"unsupported model header {lines[0].strip()!r}")
    try:
        tag, w, h = lines[1].split()
        if tag != "grid":
            raise ValueError("expected 'grid' line")
        tag, d = lines[2].split()
        if tag != "dim":
            raise ValueError("expected 'dim' line")
        w, h, d = int(w), int(h), int(d)
    except (IndexError, ValueError) as exc:
        raise MalformedCheckpoint(f"bad model preamble: {exc}") from exc
    if w < 1 or h < 1 or d < 1:
        raise MalformedCheckpoint(f"bad model preamble: grid {w}x{h}, dim {d}")
    K = w * h
    body = [ln for ln in lines[3:] if ln.strip()]
    if len(body) != K:
        raise MalformedCheckpoint(f"expected {K} node lines, found {len(body)}")
    arity = 2 + d + d * d
    rows = np.empty((K, arity - 1))
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != arity:
            raise MalformedCheckpoint(f"node line {i} has {len(parts)} fields, expected {arity}")
        try:
            if int(parts[0]) != i:
                raise MalformedCheckpoint(f"node line {i} is labelled {parts[0]}")
            rows[i] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise MalformedCheckpoint(f"node line {i}: {exc}") from exc
    model = MixtureModel(rows[:, 1:1 + d], rows[:, 1 + d:].reshape(K, d, d), rows[:, 0])
    return model, (w, h)


def save_model(path, model: MixtureModel, grid=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model, grid))


def load_model(path) -> tuple[MixtureModel, tuple[int, int]]:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())
