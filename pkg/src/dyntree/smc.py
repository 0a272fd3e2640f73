"""Particle learning for dynamic trees.

Each update weights particles by their one-step predictive density of the
new pair, resamples, then propagates every particle through one stochastic
local move (stay, prune or grow around the new input) chosen with
probability proportional to the move's proposal mass times the resulting
posterior (leaf marginal likelihoods times tree prior). When the active pool
exceeds its budget ``w`` one point is retired into the leaf priors.

All randomness is drawn from a single seeded :class:`numpy.random.Generator`
outside the kernels, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from numba import njit

from . import discard as dc
from . import leaf as lf
from . import tree as tr

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CloudConfig:
    """Engine settings.

    ``w`` is the active-pool budget (``math.inf`` keeps every point);
    ``lam`` the forgetting factor applied at retirement; ``n_init`` the
    size of the initial batch used by :func:`run_stream`.
    """

    n_particles: int = 100
    w: float = math.inf
    lam: float = 1.0
    model: str = "constant"
    n_classes: int = 2
    policy: str = "historical"
    alpha: float = 0.95
    beta: float = 2.0
    min_leaf: int = 5
    min_pts: float = lf.MIN_POINTS
    resampling: str = "multinomial"
    n_init: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if self.model not in lf.KIND_CODES:
            raise ValueError(f"unknown leaf model {self.model!r}")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError(f"unknown resampling scheme {self.resampling!r}")
        if self.w < self.min_leaf:
            raise ValueError(f"w={self.w} is smaller than min_leaf={self.min_leaf}")
        if self.n_init < self.min_leaf:
            raise ValueError(f"n_init={self.n_init} is smaller than min_leaf={self.min_leaf}")
        self.tree_prior  # validates alpha, beta, min_leaf
        dc.DiscardPolicy(self.policy, self.lam).check_model(lf.KIND_CODES[self.model])

    @property
    def tree_prior(self) -> tr.TreePriorConfig:
        return tr.TreePriorConfig(self.alpha, self.beta, self.min_leaf)

    @property
    def task(self) -> str:
        return "classification" if self.model == "multinomial" else "regression"


@dataclass
class Prediction:
    """Particle-averaged predictive at a batch of inputs.

    Regression: ``mean`` and mixture ``var``; ``density`` holds the averaged
    predictive density of ``y`` when responses were supplied. Classification:
    ``probs`` (``n x K``) and, given labels, ``density`` is the averaged
    probability of the true class.
    """

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    probs: np.ndarray | None = None
    density: np.ndarray | None = None


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True)
def _weights(F, pool, spec, x, y, out):
    N = F.left.shape[0]
    P = pool.y.shape[0]
    p = max(spec.p, 1)
    idx = np.empty(P, dtype=np.int64)
    S = np.empty(spec.L)
    chol = np.zeros((p, p))
    beta = np.zeros(p)
    for i in range(N):
        node = tr.find_leaf(F, i, x)
        n = tr.gather(F, i, node, idx)
        S[:] = F.prior[i, node]
        tr.add_stats(pool, idx, n, S)
        out[i] = lf.log_predictive(spec, S, x, y, chol, beta)


@njit(cache=True)
def _propagate(F, pool, spec, slot, x, U, alpha, beta_, min_leaf, bmin, bmax, moves, touched):
    N = F.left.shape[0]
    P = pool.y.shape[0]
    d = x.shape[0]
    p = max(spec.p, 1)
    L = spec.L
    idx = np.empty(P, dtype=np.int64)
    idx2 = np.empty(P, dtype=np.int64)
    S = np.empty(L)
    Ss = np.empty(L)
    SL = np.empty(L)
    SR = np.empty(L)
    chol = np.zeros((p, p))
    beta = np.zeros(p)
    third = math.log(1.0 / 3.0)
    for i in range(N):
        node = tr.find_leaf(F, i, x)
        F.leaf_of[i, slot] = node
        n = tr.gather(F, i, node, idx)
        S[:] = F.prior[i, node]
        tr.add_stats(pool, idx, n, S)
        l_stay = lf.logml(spec, S, chol, beta)
        D = F.depth[i, node]
        n_avail = 0

        par = tr.sibling_leaf(F, i, node)
        l_sib = 0.0
        l_prune = -np.inf
        if par >= 0:
            sib = F.right[i, par] if F.left[i, par] == node else F.left[i, par]
            ns = tr.gather(F, i, sib, idx2)
            Ss[:] = F.prior[i, sib]
            tr.add_stats(pool, idx2, ns, Ss)
            l_sib = lf.logml(spec, Ss, chol, beta)
            Ss += S
            l_prune = (lf.logml(spec, Ss, chol, beta) + tr.log_pstop(alpha, beta_, D - 1)
                       - tr.log_psplit(alpha, beta_, D - 1) - 2.0 * tr.log_pstop(alpha, beta_, D))
            n_avail += 1

        j = min(int(U[i, 1] * d), d - 1)
        lo, hi = tr.interval(F, i, node, j, bmin, bmax)
        xi = lo + U[i, 2] * (hi - lo)
        l_grow = -np.inf
        nl = 0
        if hi > lo and xi > lo:
            nl = tr.count_left(pool, idx, n, j, xi)
        if nl >= min_leaf and n - nl >= min_leaf:
            frac = nl / n
            SL[:] = frac * F.prior[i, node]
            SR[:] = (1.0 - frac) * F.prior[i, node]
            for k in range(n):
                s = idx[k]
                if pool.x[s, j] < xi:
                    SL += pool.stat[s]
                else:
                    SR += pool.stat[s]
            l_grow = (lf.logml(spec, SL, chol, beta) + lf.logml(spec, SR, chol, beta) + l_sib
                      + tr.log_psplit(alpha, beta_, D) + 2.0 * tr.log_pstop(alpha, beta_, D + 1)
                      - tr.log_pstop(alpha, beta_, D))
            n_avail += 1

        s_stay = math.log(1.0 - n_avail / 3.0) + l_stay + l_sib
        s_grow = third + l_grow
        s_prune = third + l_prune
        top = max(s_stay, max(s_grow, s_prune))
        e_stay = math.exp(s_stay - top)
        e_grow = math.exp(s_grow - top) if l_grow > -np.inf else 0.0
        e_prune = math.exp(s_prune - top) if l_prune > -np.inf else 0.0
        u = U[i, 0] * (e_stay + e_grow + e_prune)
        touched[i, 1] = -1
        if u < e_grow:
            l, r = tr.grow(F, pool, i, node, j, xi, idx, n)
            moves[i] = 1
            touched[i, 0] = l
            touched[i, 1] = r
        elif u < e_grow + e_prune:
            tr.prune(F, i, par)
            moves[i] = 2
            touched[i, 0] = par
        else:
            moves[i] = 0
            touched[i, 0] = node


@njit(cache=True)
def _predict(F, pool, spec, X, Y, has_y, mean, m2, dens, probs, fin):
    """Accumulate per-particle leaf predictives at each row of ``X``."""
    N, M = F.left.shape
    L = spec.L
    p = max(spec.p, 1)
    K = spec.K
    P = pool.y.shape[0]
    nt = X.shape[0]
    Sn = np.zeros((M, L))
    need = np.zeros(M, dtype=np.bool_)
    where = np.empty(nt, dtype=np.int64)
    chol = np.zeros((p, p))
    beta = np.zeros(p)
    pr = np.empty(max(K, 1))
    for i in range(N):
        # only the leaves that hold test points get their statistics built
        need[:] = False
        for k in range(nt):
            node = tr.find_leaf(F, i, X[k])
            where[k] = node
            if not need[node]:
                need[node] = True
                Sn[node] = F.prior[i, node]
        for s in range(P):
            node = F.leaf_of[i, s]
            if node >= 0 and need[node]:
                Sn[node] += pool.stat[s]
        for k in range(nt):
            node = where[k]
            if spec.kind == lf.MULTINOMIAL:
                lf.class_probs(spec, Sn[node], pr)
                for j in range(K):
                    probs[k, j] += pr[j]
                if has_y:
                    dens[k] += pr[int(Y[k])]
                continue
            loc, scale2, nu, proper = lf.pred_moments(spec, Sn[node], X[k], chol, beta)
            mean[k] += loc
            if nu == np.inf:
                v = scale2
            elif nu > 2.0:
                v = scale2 * nu / (nu - 2.0)
            else:
                v = np.inf
            if np.isfinite(v):
                m2[k] += v + loc * loc
            else:
                fin[k] = False
            if has_y:
                dens[k] += math.exp(lf.t_logpdf(Y[k], loc, scale2, nu))


@njit(cache=True)
def _heights(F):
    N = F.left.shape[0]
    out = np.empty(N)
    for i in range(N):
        out[i] = tr.tree_height(F, i)
    return out


def resample_indices(w: np.ndarray, rng: np.random.Generator, scheme: str = "multinomial") -> np.ndarray:
    """Ancestor index for each of ``len(w)`` offspring."""
    N = len(w)
    c = np.cumsum(w)
    c /= c[-1]
    if scheme == "systematic":
        u = (rng.random() + np.arange(N)) / N
    else:
        u = rng.random(N)
    return np.minimum(np.searchsorted(c, u, side="right"), N - 1)


def placement(ancestors: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Turn ancestor draws into in-place row copies.

    Surviving particles keep their row; each extra copy of a survivor is
    written over the row of a particle that drew no offspring. Returns
    ``(src, dst)``.
    """
    counts = np.bincount(ancestors, minlength=N)
    dead = np.flatnonzero(counts == 0)
    extra = np.repeat(np.arange(N), np.maximum(counts - 1, 0))
    return extra.astype(np.int64), dead.astype(np.int64)


def ess(weights: np.ndarray) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=np.float64)
    s2 = np.sum(w * w)
    if s2 == 0.0:
        return 0.0
    return float(np.sum(w) ** 2 / s2)


# ---------------------------------------------------------------------------

def _as_xy(obs: Any) -> tuple[np.ndarray, float]:
    if isinstance(obs, tuple):
        x, y = obs
    else:
        x, y = obs.x, obs.y
    return np.atleast_1d(np.asarray(x, dtype=np.float64)), float(y)


class ParticleCloud:
    """``N`` dynamic-tree particles over a shared active pool."""

    def __init__(self, config: CloudConfig, forest: tr.Forest, spec: lf.ModelSpec,
                 rng: np.random.Generator, bmin: np.ndarray, bmax: np.ndarray, t: int):
        self.config = config
        self.forest = forest
        self.spec = spec
        self.rng = rng
        self.bmin = bmin
        self.bmax = bmax
        self.t = t
        self.policy = dc.DiscardPolicy(config.policy, config.lam)
        self.cache: dc.ADCache | None = None
        if config.policy in ("alc", "entropy"):
            self.cache = dc.ADCache(config.policy, config.n_particles, forest.pool.capacity,
                                    spec.K)
        self.last_weights = np.ones(config.n_particles)
        self.last_moves = np.zeros(config.n_particles, dtype=np.int64)
        self.degenerate_steps = 0

    @property
    def N(self) -> int:
        return self.config.n_particles

    @property
    def pool_size(self) -> int:
        return self.forest.pool.size

    # construction -------------------------------------------------------

    @classmethod
    def init(cls, first_obs: Any, config: CloudConfig) -> ParticleCloud:
        """Single-leaf particles over an initial batch.

        ``first_obs`` is ``(X, y)`` or a sequence of observations; it needs
        at least ``min_leaf`` points.
        """
        X, y = lf._as_arrays(first_obs)
        if len(y) < config.min_leaf:
            raise ValueError(f"need at least {config.min_leaf} observations, got {len(y)}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("initial batch contains non-finite values")
        d = X.shape[1]
        kind = lf.KIND_CODES[config.model]
        if kind == lf.MULTINOMIAL:
            if np.any((y < 0) | (y >= config.n_classes) | (y != np.round(y))):
                raise ValueError(f"labels must be integers in [0, {config.n_classes})")
            spec = lf.make_spec(kind, d, K=config.n_classes, min_pts=config.min_pts)
        else:
            var = float(np.var(y, ddof=1)) if len(y) > 1 else 1.0
            spec = lf.make_spec(kind, d, min_pts=config.min_pts,
                                baseline=(float(np.mean(y)), var if var > 0 else 1.0))
        cap = len(y) + 1 if math.isinf(config.w) else int(max(config.w, len(y))) + 1
        pool = tr.ActivePool(d, spec, capacity=cap)
        for k in range(len(y)):
            pool.add(X[k], y[k], k + 1)
        forest = tr.Forest(config.n_particles, pool)
        forest.assign_all_to_root()
        rng = np.random.default_rng(config.seed)
        cloud = cls(config, forest, spec, rng, X.min(axis=0), X.max(axis=0), len(y))
        if cloud.cache is not None:
            cloud.cache.recompute_all(cloud)
        while cloud.pool_size > config.w:
            dc.retire(cloud, dc.select_retiree(cloud), config.lam)
        return cloud

    # updating -----------------------------------------------------------

    def _add_point(self, x: np.ndarray, y: float) -> int:
        pool = self.forest.pool
        cap = pool.capacity
        slot = pool.add(x, y, self.t)
        if pool.capacity != cap:
            self.forest.sync_pool()
            if self.cache is not None:
                self.cache.resize(pool.capacity)
        return slot

    def update(self, obs: Any) -> ParticleCloud:
        """Assimilate one observation: weight, resample, propagate, retire."""
        x, y = _as_xy(obs)
        if x.shape != self.bmin.shape or not np.all(np.isfinite(x)) or not math.isfinite(y):
            raise ValueError(f"bad observation x={x!r}, y={y!r}")
        if self.spec.kind == lf.MULTINOMIAL and not (0 <= y < self.spec.K and y == int(y)):
            raise ValueError(f"label {y} outside [0, {self.spec.K})")
        self.t += 1
        logw = np.empty(self.N)
        _weights(self.forest.arrays, self.forest.pool.arrays, self.spec, x, y, logw)
        self._resample(logw)

        expanded = bool(np.any(x < self.bmin) or np.any(x > self.bmax))
        if expanded:
            self.bmin = np.minimum(self.bmin, x)
            self.bmax = np.maximum(self.bmax, x)
        slot = self._add_point(x, y)
        self.forest.ensure_free(2)
        if self.cache is not None and self.cache.capacity < self.forest.pool.capacity:
            self.cache.resize(self.forest.pool.capacity)
        U = self.rng.random((self.N, 3))
        touched = np.empty((self.N, 2), dtype=np.int64)
        cfg = self.config
        _propagate(self.forest.arrays, self.forest.pool.arrays, self.spec, slot, x, U,
                   cfg.alpha, cfg.beta, cfg.min_leaf, self.bmin, self.bmax,
                   self.last_moves, touched)
        if self.cache is not None:
            if expanded and self.cache.kind == "alc":
                self.cache.recompute_all(self)
            else:
                self.cache.on_leaves_changed(self, touched)
        while self.pool_size > cfg.w:
            dc.retire(self, dc.select_retiree(self), cfg.lam)
        return self

    def _resample(self, logw: np.ndarray) -> None:
        top = np.max(logw)
        if not np.isfinite(top):
            self.degenerate_steps += 1
            log.warning("t=%d: all particle weights vanished; resampling uniformly", self.t)
            w = np.ones(self.N)
        else:
            w = np.exp(logw - top)
        self.last_weights = w
        anc = resample_indices(w, self.rng, self.config.resampling)
        src, dst = placement(anc, self.N)
        if len(src):
            tr.copy_rows(self.forest.arrays, src, dst)
            if self.cache is not None:
                self.cache.on_resample(src, dst, self.forest.pool.arrays.live)

    def ess(self, weights: np.ndarray | None = None) -> float:
        return ess(self.last_weights if weights is None else weights)

    # prediction ---------------------------------------------------------

    def predict(self, X: np.ndarray, y: np.ndarray | None = None) -> Prediction:
        """Average the particles' leaf predictives at each row of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.bmin.shape[0]:
            raise ValueError(f"X has {X.shape[1]} columns, model expects {self.bmin.shape[0]}")
        n = X.shape[0]
        has_y = y is not None
        Y = np.asarray(y, dtype=np.float64).ravel() if has_y else np.zeros(n)
        K = max(self.spec.K, 1)
        mean, m2, dens = np.zeros(n), np.zeros(n), np.zeros(n)
        probs = np.zeros((n, K))
        fin = np.ones(n, dtype=np.bool_)
        _predict(self.forest.arrays, self.forest.pool.arrays, self.spec, X, Y, has_y,
                 mean, m2, dens, probs, fin)
        N = self.N
        if self.spec.kind == lf.MULTINOMIAL:
            return Prediction(probs=probs / N, density=dens / N if has_y else None)
        mean /= N
        var = np.where(fin, m2 / N - mean ** 2, np.inf)
        return Prediction(mean=mean, var=np.maximum(var, 0.0), density=dens / N if has_y else None)

    # diagnostics --------------------------------------------------------

    def heights(self) -> np.ndarray:
        return _heights(self.forest.arrays)

    def mean_height(self) -> float:
        return float(np.mean(self.heights()))

    def tree(self, i: int) -> tr.Tree:
        return self.forest.tree(i, self.config.tree_prior)

    # persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Write a lossless checkpoint (``.npz`` with embedded JSON metadata)."""
        pool = self.forest.pool
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "t": self.t,
            "rng": self.rng.bit_generator.state,
            "pool_free": pool._free,
            "pool_size": pool.size,
            "degenerate_steps": self.degenerate_steps,
            "spec": {"base_mean": self.spec.base_mean, "base_var": self.spec.base_var},
        }
        meta["config"]["w"] = None if math.isinf(self.config.w) else self.config.w
        arrays = {f"forest_{k}": v for k, v in self.forest.arrays._asdict().items()}
        arrays.update({f"pool_{k}": v for k, v in pool.arrays._asdict().items()})
        arrays.update(bmin=self.bmin, bmax=self.bmax, last_weights=self.last_weights,
                      last_moves=self.last_moves)
        if self.cache is not None:
            arrays["cache_values"] = self.cache.values
            if self.cache.kind == "alc":
                arrays.update(cache_fsum=self.cache.fsum, cache_fcnt=self.cache.fcnt)
            else:
                arrays["cache_psum"] = self.cache.psum
            meta["cache_events"] = self.cache._events
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> ParticleCloud:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta["version"] != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta['version']}")
            conf = meta["config"]
            conf["w"] = math.inf if conf["w"] is None else conf["w"]
            config = CloudConfig(**conf)
            pool_arr = tr.PoolArrays(*(z[f"pool_{k}"] for k in tr.PoolArrays._fields))
            d = pool_arr.x.shape[1]
            kind = lf.KIND_CODES[config.model]
            spec = lf.make_spec(kind, d, K=config.n_classes, min_pts=config.min_pts,
                                baseline=(meta["spec"]["base_mean"], meta["spec"]["base_var"]))
            pool = tr.ActivePool(d, spec, capacity=1)
            pool.arrays = pool_arr
            pool._free = list(meta["pool_free"])
            pool.size = meta["pool_size"]
            forest = tr.Forest(config.n_particles, pool)
            forest.arrays = tr.ForestArrays(*(z[f"forest_{k}"] for k in tr.ForestArrays._fields))
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng"]
            cloud = cls(config, forest, spec, rng, z["bmin"], z["bmax"], meta["t"])
            cloud.last_weights = z["last_weights"]
            cloud.last_moves = z["last_moves"]
            cloud.degenerate_steps = meta["degenerate_steps"]
            if cloud.cache is not None:
                cloud.cache.values = z["cache_values"]
                if cloud.cache.kind == "alc":
                    cloud.cache.fsum = z["cache_fsum"]
                    cloud.cache.fcnt = z["cache_fcnt"]
                else:
                    cloud.cache.psum = z["cache_psum"]
                cloud.cache._events = meta["cache_events"]
        return cloud


def init(first_obs: Any, config: CloudConfig) -> ParticleCloud:
    return ParticleCloud.init(first_obs, config)


def update(cloud: ParticleCloud, obs: Any) -> ParticleCloud:
    return cloud.update(obs)


def predict(cloud: ParticleCloud, X: np.ndarray, y: np.ndarray | None = None) -> Prediction:
    return cloud.predict(X, y)
