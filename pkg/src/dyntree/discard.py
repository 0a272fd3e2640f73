"""Retirement policies and active-discarding statistics.

Policies: ``historical`` (oldest first), ``random``, ``alc`` (smallest
integrated variance reduction, regression) and ``entropy`` (lowest
predictive entropy, classification).

Statistics are cached per particle and per pool slot in :class:`ADCache`,
with particle-averaged tallies maintained incrementally: resampling swaps
whole rows, and after propagation only the leaves touched by the move are
recomputed. Retiring a point with ``lam == 1`` leaves every leaf posterior
unchanged, so no statistic needs recomputing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numba import njit

from . import leaf as lf
from . import tree as tr

if TYPE_CHECKING:
    from .smc import ParticleCloud

POLICIES = ("historical", "random", "alc", "entropy")


@dataclass(frozen=True)
class DiscardPolicy:
    tag: str = "historical"
    lam: float = 1.0

    def __post_init__(self):
        if self.tag not in POLICIES:
            raise ValueError(f"unknown discard policy {self.tag!r}; choose from {POLICIES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"forgetting factor {self.lam} outside [0, 1]")

    def check_model(self, kind: int) -> None:
        if self.tag == "alc" and kind == lf.MULTINOMIAL:
            raise ValueError("alc discarding needs regression leaves")
        if self.tag == "entropy" and kind != lf.MULTINOMIAL:
            raise ValueError("entropy discarding needs multinomial leaves")


# ---------------------------------------------------------------------------
# ALC

@njit(cache=True)
def _rect_integral(lo, hi, g, c):
    m = lo.shape[0]
    w = np.empty(m)
    A = 1.0
    for i in range(m):
        w[i] = hi[i] - lo[i]
        if not w[i] > 0.0:
            return 0.0
        A *= w[i]
    out = A * c * c
    for i in range(m):
        Ai = A / w[i]
        sq = hi[i] * hi[i] - lo[i] * lo[i]
        cu = hi[i] * hi[i] * hi[i] - lo[i] * lo[i] * lo[i]
        out += c * Ai * g[i] * sq
        out += Ai * g[i] * g[i] * cu / 3.0
        for j in range(i):
            sqj = hi[j] * hi[j] - lo[j] * lo[j]
            out += A / (w[i] * w[j]) * 0.5 * g[i] * g[j] * sq * sqj
    return out


def rect_integral(rect: np.ndarray, gx: np.ndarray, c: float) -> float:
    """Exact ``integral over rect of (c + gx . z)^2 dz``.

    ``rect`` is ``(m, 2)`` with rows ``(a_i, b_i)``. Degenerate rectangles
    integrate to zero.
    """
    rect = np.asarray(rect, dtype=np.float64).reshape(-1, 2)
    gx = np.asarray(gx, dtype=np.float64).ravel()
    if gx.shape[0] != rect.shape[0]:
        raise ValueError("gx and rect disagree on dimension")
    if np.any(rect[:, 0] > rect[:, 1]):
        raise ValueError("rectangle needs a_i <= b_i")
    return float(_rect_integral(rect[:, 0].copy(), rect[:, 1].copy(), gx, float(c)))


@njit(cache=True)
def _alc_leaf(spec, S, lo, hi, xs, n, out, chol, beta):
    """ALC statistic for ``n`` inputs ``xs`` sharing one leaf (``S``, rect)."""
    mode, nu, rss, logdet, proper = lf.fit(spec, S, chol, beta)
    if not proper or nu <= 2.0:
        for k in range(n):
            out[k] = np.inf
        return
    sig2 = rss / (nu - 2.0)
    m = lo.shape[0]
    g = np.zeros(m)
    if mode == lf.MODE_CONSTANT:
        c = 1.0 / S[0]
        val = sig2 * _rect_integral(lo, hi, g, c) / (1.0 + c)
        for k in range(n):
            out[k] = val
        return
    p = spec.p
    xt = np.empty(p)
    tmp = np.empty(p)
    v = np.empty(p)
    for k in range(n):
        xt[0] = 1.0
        for a in range(1, p):
            xt[a] = xs[k, a - 1]
        lf._forward(chol, xt, tmp, p)
        lf._backward(chol, tmp, v, p)
        q = 0.0
        for a in range(p):
            q += xt[a] * v[a]
        for a in range(m):
            g[a] = v[a + 1]
        out[k] = sig2 * _rect_integral(lo, hi, g, v[0]) / (1.0 + q)


def alc_reduction(post: lf.LeafPosterior, rect: np.ndarray, x: np.ndarray) -> float:
    """Integrated variance reduction over ``rect`` from having ``x`` in the leaf.

    Infinite when the leaf is improper or has too few degrees of freedom for
    a finite posterior variance.
    """
    spec = post.spec
    if spec.kind == lf.MULTINOMIAL:
        raise ValueError("ALC is defined for regression leaves only")
    rect = np.asarray(rect, dtype=np.float64).reshape(-1, 2)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    p = spec.p
    out = np.empty(1)
    _alc_leaf(spec, post.stats, rect[:, 0].copy(), rect[:, 1].copy(), x.reshape(1, -1), 1, out,
              np.zeros((p, p)), np.zeros(p))
    return float(out[0])


# ---------------------------------------------------------------------------
# cache kernels

@njit(cache=True)
def _leaf_stats(F, pool, i, node, idx, S):
    n = tr.gather(F, i, node, idx)
    S[:] = F.prior[i, node]
    tr.add_stats(pool, idx, n, S)
    return n


@njit(cache=True)
def _alc_refresh_node(F, pool, spec, i, node, bmin, bmax, ad, fsum, fcnt, idx, S, xs, vals,
                      chol, beta):
    n = _leaf_stats(F, pool, i, node, idx, S)
    d = bmin.shape[0]
    lo = np.empty(d)
    hi = np.empty(d)
    for a in range(d):
        lo[a], hi[a] = tr.interval(F, i, node, a, bmin, bmax)
    for k in range(n):
        xs[k] = pool.x[idx[k]]
    _alc_leaf(spec, S, lo, hi, xs, n, vals, chol, beta)
    for k in range(n):
        s = idx[k]
        old = ad[i, s]
        if np.isfinite(old):
            fsum[s] -= old
            fcnt[s] -= 1
        new = vals[k]
        ad[i, s] = new
        if np.isfinite(new):
            fsum[s] += new
            fcnt[s] += 1


@njit(cache=True)
def _alc_refresh(F, pool, spec, nodes, bmin, bmax, ad, fsum, fcnt):
    N = nodes.shape[0]
    P = pool.y.shape[0]
    p = max(spec.p, 1)
    idx = np.empty(P, dtype=np.int64)
    S = np.empty(spec.L)
    xs = np.empty((P, bmin.shape[0]))
    vals = np.empty(P)
    chol = np.zeros((p, p))
    beta = np.zeros(p)
    for i in range(N):
        for k in range(nodes.shape[1]):
            node = nodes[i, k]
            if node >= 0:
                _alc_refresh_node(F, pool, spec, i, node, bmin, bmax, ad, fsum, fcnt, idx, S,
                                  xs, vals, chol, beta)


@njit(cache=True)
def _ent_refresh(F, pool, spec, nodes, probs, psum):
    N = nodes.shape[0]
    P = pool.y.shape[0]
    K = spec.K
    idx = np.empty(P, dtype=np.int64)
    S = np.empty(spec.L)
    pr = np.empty(K)
    for i in range(N):
        for k in range(nodes.shape[1]):
            node = nodes[i, k]
            if node < 0:
                continue
            n = _leaf_stats(F, pool, i, node, idx, S)
            lf.class_probs(spec, S, pr)
            for q in range(n):
                s = idx[q]
                for j in range(K):
                    psum[s, j] += pr[j] - probs[i, s, j]
                    probs[i, s, j] = pr[j]


@njit(cache=True)
def _all_leaves(F):
    """``(N, M)`` table of every leaf of every tree, padded with -1."""
    N, M = F.left.shape
    out = np.full((N, M), -1, dtype=np.int64)
    stack = np.empty(M, dtype=np.int64)
    for i in range(N):
        stack[0] = 0
        top = 1
        k = 0
        while top > 0:
            top -= 1
            node = stack[top]
            if F.left[i, node] >= 0:
                stack[top] = F.left[i, node]
                stack[top + 1] = F.right[i, node]
                top += 2
            else:
                out[i, k] = node
                k += 1
    return out


@njit(cache=True)
def _swap_rows_1d(ad, fsum, fcnt, src, dst, live):
    for k in range(src.shape[0]):
        a = src[k]
        b = dst[k]
        for s in range(ad.shape[1]):
            if not live[s]:
                continue
            old = ad[b, s]
            if np.isfinite(old):
                fsum[s] -= old
                fcnt[s] -= 1
            new = ad[a, s]
            if np.isfinite(new):
                fsum[s] += new
                fcnt[s] += 1
        ad[b] = ad[a]


@njit(cache=True)
def _swap_rows_2d(probs, psum, src, dst, live):
    for k in range(src.shape[0]):
        a = src[k]
        b = dst[k]
        for s in range(probs.shape[1]):
            if not live[s]:
                continue
            for j in range(probs.shape[2]):
                psum[s, j] += probs[a, s, j] - probs[b, s, j]
        probs[b] = probs[a]


# ---------------------------------------------------------------------------
# cache

class ADCache:
    """Per-particle, per-slot discard statistics plus particle averages.

    ``kind`` is ``"alc"`` or ``"entropy"``. For ALC, infinite entries (leaf
    not saturated in that particle) are left out of the particle average; a
    slot whose statistic is infinite in every particle averages to +inf.
    """

    def __init__(self, kind: str, n_particles: int, capacity: int, n_classes: int = 0):
        self.kind = kind
        self.N = n_particles
        self.resync_every = 1000
        self._events = 0
        if kind == "alc":
            self.values = np.full((n_particles, capacity), np.inf)
            self.fsum = np.zeros(capacity)
            self.fcnt = np.zeros(capacity, dtype=np.int64)
        elif kind == "entropy":
            self.values = np.zeros((n_particles, capacity, n_classes))
            self.psum = np.zeros((capacity, n_classes))
        else:
            raise ValueError(f"no cached statistic for {kind!r}")

    @property
    def capacity(self) -> int:
        return self.values.shape[1]

    def resize(self, capacity: int) -> None:
        extra = capacity - self.capacity
        if extra <= 0:
            return
        N = self.N
        if self.kind == "alc":
            self.values = np.concatenate([self.values, np.full((N, extra), np.inf)], axis=1)
            self.fsum = np.concatenate([self.fsum, np.zeros(extra)])
            self.fcnt = np.concatenate([self.fcnt, np.zeros(extra, dtype=np.int64)])
        else:
            K = self.values.shape[2]
            self.values = np.concatenate([self.values, np.zeros((N, extra, K))], axis=1)
            self.psum = np.concatenate([self.psum, np.zeros((extra, K))])

    # events -------------------------------------------------------------

    def on_resample(self, src: np.ndarray, dst: np.ndarray, live: np.ndarray) -> None:
        """Particle ``dst[k]`` was overwritten by a copy of ``src[k]``."""
        if len(src) == 0:
            return
        if self.kind == "alc":
            _swap_rows_1d(self.values, self.fsum, self.fcnt, src, dst, live)
        else:
            _swap_rows_2d(self.values, self.psum, src, dst, live)
        self._tick()

    def on_leaves_changed(self, cloud: ParticleCloud, nodes: np.ndarray) -> None:
        """Recompute statistics for every active point of the listed leaves.

        ``nodes`` is ``(N, k)``, one row per particle, padded with -1.
        """
        F = cloud.forest.arrays
        pool = cloud.forest.pool.arrays
        spec = cloud.spec
        nodes = np.ascontiguousarray(nodes, dtype=np.int64)
        if self.kind == "alc":
            _alc_refresh(F, pool, spec, nodes, cloud.bmin, cloud.bmax,
                         self.values, self.fsum, self.fcnt)
        else:
            _ent_refresh(F, pool, spec, nodes, self.values, self.psum)
        self._tick()

    def on_new_point(self, cloud: ParticleCloud, nodes: np.ndarray) -> None:
        """The new point joined leaf ``nodes[i]`` of particle ``i``."""
        self.on_leaves_changed(cloud, np.asarray(nodes).reshape(self.N, -1))

    def on_retire(self, slot: int) -> None:
        if self.kind == "alc":
            self.values[:, slot] = np.inf
            self.fsum[slot] = 0.0
            self.fcnt[slot] = 0
        else:
            self.values[:, slot] = 0.0
            self.psum[slot] = 0.0

    def _tick(self) -> None:
        self._events += 1
        if self._events % self.resync_every == 0:
            self.resync()

    # tallies ------------------------------------------------------------

    def resync(self) -> None:
        """Rebuild particle tallies from the per-particle table."""
        if self.kind == "alc":
            fin = np.isfinite(self.values)
            self.fsum = np.where(fin, self.values, 0.0).sum(axis=0)
            self.fcnt = fin.sum(axis=0).astype(np.int64)
        else:
            self.psum = self.values.sum(axis=0)

    def recompute_all(self, cloud: ParticleCloud) -> None:
        """From-scratch evaluation of every statistic."""
        live = cloud.forest.pool.arrays.live
        if self.kind == "alc":
            self.values[:] = np.inf
            self.fsum[:] = 0.0
            self.fcnt[:] = 0
        else:
            self.values[:] = 0.0
            self.psum[:] = 0.0
        self.on_leaves_changed(cloud, _all_leaves(cloud.forest.arrays))
        self.resync()
        if self.kind == "alc":
            self.values[:, ~live] = np.inf

    def averaged(self, live: np.ndarray) -> np.ndarray:
        """Particle-averaged statistic per slot (+inf for dead slots)."""
        out = np.full(self.capacity, np.inf)
        if self.kind == "alc":
            ok = live & (self.fcnt > 0)
            out[ok] = self.fsum[ok] / self.fcnt[ok]
        else:
            p = np.clip(self.psum[live] / self.N, 0.0, 1.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                out[live] = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
        return out


# ---------------------------------------------------------------------------
# policy operations

def entropy_stat(cloud: ParticleCloud, x: np.ndarray) -> float:
    """Entropy of the particle-averaged class probabilities at ``x``."""
    p = cloud.predict(np.atleast_2d(x)).probs[0]
    return entropy(p)


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def argmin_oldest(stat: np.ndarray, tin: np.ndarray, slots: np.ndarray) -> int:
    """Slot with the smallest statistic; ties go to the earliest arrival."""
    order = np.lexsort((tin[slots], stat[slots]))
    return int(slots[order[0]])


def select_retiree(cloud: ParticleCloud, policy: DiscardPolicy | None = None) -> int:
    """Pool slot to retire next under ``policy`` (defaults to the cloud's)."""
    policy = policy or cloud.policy
    pool = cloud.forest.pool.arrays
    live = np.flatnonzero(pool.live)
    if len(live) == 0:
        raise ValueError("cannot select a retiree from an empty pool")
    if policy.tag == "historical":
        return int(live[np.argmin(pool.tin[live])])
    if policy.tag == "random":
        return int(live[cloud.rng.integers(len(live))])
    if cloud.cache is None or cloud.cache.kind != policy.tag:
        raise ValueError(f"cloud does not maintain {policy.tag} statistics")
    stat = cloud.cache.averaged(pool.live)
    return argmin_oldest(stat, pool.tin, live)


@njit(cache=True)
def _retire_kernel(F, pool, s, lam, nodes):
    N = F.left.shape[0]
    st = pool.stat[s]
    for i in range(N):
        node = F.leaf_of[i, s]
        nodes[i] = node
        pr = F.prior[i, node]
        for a in range(pr.shape[0]):
            pr[a] = lam * pr[a] + st[a]
        F.leaf_of[i, s] = -1


def retire(cloud: ParticleCloud, slot: int, lam: float | None = None) -> ParticleCloud:
    """Fold pool slot ``slot`` into its leaf prior in every particle and drop it.

    With ``lam < 1`` the leaf posteriors change, so the touched leaves'
    discard statistics are refreshed; with ``lam == 1`` nothing is recomputed.
    """
    lam = cloud.policy.lam if lam is None else lam
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"forgetting factor {lam} outside [0, 1]")
    pool = cloud.forest.pool
    if not (0 <= slot < pool.capacity) or not pool.arrays.live[slot]:
        raise KeyError(f"pool slot {slot} is not live")
    nodes = np.empty(cloud.N, dtype=np.int64)
    _retire_kernel(cloud.forest.arrays, pool.arrays, slot, float(lam), nodes)
    pool.remove(slot)
    if cloud.cache is not None:
        cloud.cache.on_retire(slot)
        if lam != 1.0:
            cloud.cache.on_leaves_changed(cloud, nodes.reshape(-1, 1))
    return cloud
