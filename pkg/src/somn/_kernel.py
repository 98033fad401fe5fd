"""Compiled inner loop of the SOMN trainer.

Layout of the working set (all arrays owned by ``SomnState``):

* ``u``: unnormalized weights. The mixing weights are ``u / sum(u)``; the
  running sum is tracked in ``totals[0]`` so renormalizing after each
  iteration is O(1). Every ``FOLD_EVERY`` iterations (absolute count) ``u``
  is divided through by its exact sum.
* ``fac``: per-node quadratic-form coefficients ``(P00, 2 P01, P11)`` of the
  precision matrix ``P = S^-1``; ``lognorm`` is ``-log(2 pi) - log|S| / 2``;
  ``lammax`` the largest covariance eigenvalue.
* ``tiles``: the lattice is cut into square tiles. Each tile keeps the
  bounding box of its means and the maxima of lognorm, lammax and log(u),
  which bound every member's log-posterior score from above. Tiles whose
  bound falls below the cutoff are skipped without touching their nodes.

A node's score is ``log u + log N(x | m, S)``. Nodes more than
``POSTERIOR_CUTOFF`` nats below the winner get posterior exactly 0.
"""

import math

import numba
import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
# Posterior shares below 1e-12 are dropped (the same skip threshold the SOM
# baseline applies to its neighbourhood weights).
POSTERIOR_CUTOFF = math.log(1e-12)
MIN_SHARE = math.exp(POSTERIOR_CUTOFF)
FOLD_EVERY = 1024
# Largest alpha for which outside-the-ball scaling is used; bounds the
# growth of u between folds by exp(FOLD_EVERY * alpha) or so.
COMPLEMENT_MAX_ALPHA = 0.01
# Absorbs rounding in the tile bounds; only ever admits extra candidates.
BOUND_SLACK = 1e-6

# Columns of the tile table.
X0, X1, Y0, Y1, LN, LAM, LOGU = 0, 1, 2, 3, 4, 5, 6
TILE_COLS = 7


def tile_size(width: int, height: int) -> int:
    return max(4, int(round(math.sqrt(max(width, height)))))


@numba.njit(cache=True)
def factor(j, covs, fac, lognorm, lammax):
    c00 = covs[j, 0, 0]
    c01 = covs[j, 1, 0]
    c11 = covs[j, 1, 1]
    det = c00 * c11 - c01 * c01
    idet = 1.0 / det
    fac[j, 0] = c11 * idet
    fac[j, 1] = -2.0 * c01 * idet
    fac[j, 2] = c00 * idet
    lognorm[j] = -LOG_2PI - 0.5 * math.log(det)
    half = 0.5 * (c00 - c11)
    lammax[j] = 0.5 * (c00 + c11) + math.sqrt(half * half + c01 * c01)


@numba.njit(cache=True)
def refresh_tile(b, means, u, lognorm, lammax, tiles, tile_w, ntx, width, height):
    tx = b % ntx
    ty = b // ntx
    bx0 = np.inf
    bx1 = -np.inf
    by0 = np.inf
    by1 = -np.inf
    ln = -np.inf
    lam = 0.0
    umax = 0.0
    for gy in range(ty * tile_w, min(height, (ty + 1) * tile_w)):
        for gx in range(tx * tile_w, min(width, (tx + 1) * tile_w)):
            k = gy * width + gx
            bx0 = min(bx0, means[k, 0])
            bx1 = max(bx1, means[k, 0])
            by0 = min(by0, means[k, 1])
            by1 = max(by1, means[k, 1])
            ln = max(ln, lognorm[k])
            lam = max(lam, lammax[k])
            umax = max(umax, u[k])
    tiles[b, X0] = bx0
    tiles[b, X1] = bx1
    tiles[b, Y0] = by0
    tiles[b, Y1] = by1
    tiles[b, LN] = ln
    tiles[b, LAM] = lam
    tiles[b, LOGU] = math.log(umax) if umax > 0.0 else -np.inf


@numba.njit(cache=True)
def refresh_all(means, covs, u, totals, fac, lognorm, lammax, tiles, tile_w, ntx, width, height):
    for j in range(u.shape[0]):
        factor(j, covs, fac, lognorm, lammax)
    s = 0.0
    for j in range(u.shape[0]):
        s += u[j]
    totals[0] = s
    for b in range(tiles.shape[0]):
        refresh_tile(b, means, u, lognorm, lammax, tiles, tile_w, ntx, width, height)


@numba.njit(cache=True, fastmath=True)
def _decay_span(u, post, j0, j1, alpha, total):
    # Weight update over a contiguous run of ball nodes; returns the change in sum(u).
    d = 0.0
    for j in range(j0, j1):
        uo = u[j]
        un = uo + alpha * (post[j] * total - uo)
        u[j] = un
        d += un - uo
    return d


@numba.njit(cache=True, fastmath=True)
def _scale_span(u, j0, j1, c):
    # Multiplies a contiguous run of weights by c; returns the change in sum(u).
    d = 0.0
    for j in range(j0, j1):
        uo = u[j]
        un = uo * c
        u[j] = un
        d += un - uo
    return d


@numba.njit(cache=True)
def step(x0, x1, t, T, means, covs, u, totals, fac, lognorm, lammax, post, cand_idx, cand_s,
         tiles, ub, dirty, dirty_list, tile_w, ntx, width, height, manhattan,
         learn, weight, cooling_floor, delta0, cov_floor, sequential, undamped):
    """One SOMN iteration for the point (x0, x1) at 1-based iteration t.

    Returns the winner index.
    """
    K = u.shape[0]
    nt = tiles.shape[0]
    a = learn * max(1.0 - (t - 1) / T, cooling_floor)
    alpha = a if undamped else a * weight
    delta = delta0 * (1.0 - (t - 1) / (T - 1)) if T > 1 else 0.0

    # Upper bound on the best score inside each tile.
    top = 0
    topv = -np.inf
    for b in range(nt):
        dx = max(tiles[b, X0] - x0, 0.0, x0 - tiles[b, X1])
        dy = max(tiles[b, Y0] - x1, 0.0, x1 - tiles[b, Y1])
        v = tiles[b, LN] + tiles[b, LOGU] - 0.5 * (dx * dx + dy * dy) / tiles[b, LAM] + BOUND_SLACK
        ub[b] = v
        if v > topv:
            topv = v
            top = b

    # Scan the most promising tile first so the running best prunes the rest.
    # log(u) is only taken for nodes that might beat the current best.
    best = -np.inf
    win = -1
    nc = 0
    for i in range(-1, nt):
        if i < 0:
            b = top
        else:
            b = i
            if b == top or ub[b] < best + POSTERIOR_CUTOFF:
                continue
        logu_b = tiles[b, LOGU] + BOUND_SLACK
        tx = b % ntx
        ty = b // ntx
        for gy in range(ty * tile_w, min(height, (ty + 1) * tile_w)):
            for gx in range(tx * tile_w, min(width, (tx + 1) * tile_w)):
                k = gy * width + gx
                e0 = x0 - means[k, 0]
                e1 = x1 - means[k, 1]
                q = e0 * (fac[k, 0] * e0 + fac[k, 1] * e1) + fac[k, 2] * e1 * e1
                r = lognorm[k] - 0.5 * q
                if r + logu_b < best + POSTERIOR_CUTOFF or not u[k] > 0.0:
                    continue
                cand_idx[nc] = k
                cand_s[nc] = r
                nc += 1
                if r + logu_b >= best:
                    s = r + math.log(u[k])
                    if s > best or (s == best and k < win):
                        best = s
                        win = k

    if win < 0:
        # Nothing has a finite score: nearest mean wins with a crisp posterior.
        dbest = np.inf
        for k in range(K):
            e0 = x0 - means[k, 0]
            e1 = x1 - means[k, 1]
            dd = e0 * e0 + e1 * e1
            if dd < dbest:
                dbest = dd
                win = k
        nc = 1
        cand_idx[0] = win
        post[win] = 1.0
    else:
        # exp(s_k - best) = (u_k / u_win) * exp(r_k - r_win)
        rw = best - math.log(u[win])
        iu = 1.0 / u[win]
        total = 0.0
        m = 0
        for c in range(nc):
            k = cand_idx[c]
            e = math.exp(cand_s[c] - rw) * (u[k] * iu)
            if e > MIN_SHARE:
                post[k] = e
                total += e
                cand_idx[m] = k
                m += 1
        nc = m
        itot = 1.0 / total
        for c in range(nc):
            post[cand_idx[c]] *= itot

    # Weights of every node in the ball. When the ball covers most of the
    # lattice it is cheaper to scale the nodes outside it by 1 / (1 - alpha)
    # instead, which leaves the normalized weights unchanged.
    wx = win % width
    wy = win // width
    rad = int(math.floor(delta))
    total_u = totals[0]
    y0 = max(0, wy - rad)
    y1 = min(height, wy + rad + 1)
    inside = 0
    for gy in range(y0, y1):
        span = rad - abs(gy - wy) if manhattan else rad
        inside += min(width, wx + span + 1) - max(0, wx - span)
    complement = alpha <= COMPLEMENT_MAX_ALPHA and 2 * inside > K
    du = 0.0
    gain = 0.0
    if complement:
        cg = 1.0 / (1.0 - alpha)
        du += _scale_span(u, 0, y0 * width, cg)
        du += _scale_span(u, y1 * width, K, cg)
        for gy in range(y0, y1):
            span = rad - abs(gy - wy) if manhattan else rad
            row = gy * width
            du += _scale_span(u, row, row + max(0, wx - span), cg)
            du += _scale_span(u, row + min(width, wx + span + 1), row + width, cg)
        # Outside nodes grew: keep every tile's log(u) maximum an upper bound.
        if inside < K:
            lc = math.log(cg)
            for b in range(nt):
                tiles[b, LOGU] += lc
        gain = alpha * cg * total_u
    else:
        for gy in range(y0, y1):
            span = rad - abs(gy - wy) if manhattan else rad
            row = gy * width
            du += _decay_span(u, post, row + max(0, wx - span), row + min(width, wx + span + 1),
                              alpha, total_u)

    # Means and covariances of ball nodes with a non-zero posterior.
    nd = 0
    for c in range(nc):
        k = cand_idx[c]
        p = post[k]
        post[k] = 0.0
        if not p > 0.0:
            continue
        gx = abs(k % width - wx)
        gy = abs(k // width - wy)
        if (gx + gy if manhattan else max(gx, gy)) > rad:
            continue
        if complement:
            uo = u[k]
            u[k] = uo + gain * p
            du += u[k] - uo
        g = a * p
        v0 = x0 - means[k, 0]
        v1 = x1 - means[k, 1]
        means[k, 0] += g * v0
        means[k, 1] += g * v1
        if sequential:
            v0 = x0 - means[k, 0]
            v1 = x1 - means[k, 1]
        c00 = covs[k, 0, 0]
        c01 = covs[k, 0, 1]
        c11 = covs[k, 1, 1]
        c00 = c00 + g * (v0 * v0 - c00)
        c01 = c01 + g * (v0 * v1 - c01)
        c11 = c11 + g * (v1 * v1 - c11)
        # Shift the spectrum up to a hair above the floor when needed. The
        # eigenvalue solve is skipped when S - target * I is clearly positive.
        tr = c00 + c11
        target = cov_floor * (1.0 + 1e-9) + 1e-12 * abs(tr)
        d0 = c00 - target
        d1 = c11 - target
        if not (d0 > 0.0 and d0 * d1 > c01 * c01):
            half = 0.5 * (c00 - c11)
            lam = 0.5 * tr - math.sqrt(half * half + c01 * c01)
            if lam < target:
                c00 += target - lam
                c11 += target - lam
        covs[k, 0, 0] = c00
        covs[k, 0, 1] = c01
        covs[k, 1, 0] = c01
        covs[k, 1, 1] = c11
        factor(k, covs, fac, lognorm, lammax)
        b = (k // width) // tile_w * ntx + (k % width) // tile_w
        if not dirty[b]:
            dirty[b] = True
            dirty_list[nd] = b
            nd += 1

    totals[0] = total_u + du

    if t % FOLD_EVERY == 0:
        s = 0.0
        for k in range(K):
            s += u[k]
        for k in range(K):
            u[k] /= s
        s = 0.0
        for k in range(K):
            s += u[k]
        totals[0] = s
        for b in range(nt):
            if not dirty[b]:
                dirty[b] = True
                dirty_list[nd] = b
                nd += 1

    for i in range(nd):
        b = dirty_list[i]
        refresh_tile(b, means, u, lognorm, lammax, tiles, tile_w, ntx, width, height)
        dirty[b] = False
    return win


@numba.njit(cache=True)
def run(uniforms, origins, jitter, prob, alias, t0, T, means, covs, u, totals, fac, lognorm,
        lammax, post, cand_idx, cand_s, tiles, ub, dirty, dirty_list, tile_w, ntx, width,
        height, manhattan, learn, weight, cooling_floor, delta0, cov_floor, sequential,
        undamped):
    """Draw one point per row of ``uniforms`` and apply iterations t0, t0+1, ..."""
    n = prob.shape[0]
    for s in range(uniforms.shape[0]):
        b = int(uniforms[s, 0] * n)
        if b >= n:
            b = n - 1
        idx = b if uniforms[s, 1] < prob[b] else alias[b]
        x0 = origins[idx, 0] + jitter * uniforms[s, 2]
        x1 = origins[idx, 1] + jitter * uniforms[s, 3]
        step(x0, x1, t0 + s, T, means, covs, u, totals, fac, lognorm, lammax, post, cand_idx,
             cand_s, tiles, ub, dirty, dirty_list, tile_w, ntx, width, height, manhattan,
             learn, weight, cooling_floor, delta0, cov_floor, sequential, undamped)
