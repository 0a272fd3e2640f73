"""Conjugate leaf models: constant, linear and multinomial.

Every leaf summary (retired prior or active data) is a flat statistic vector
that is *linear* in the data, so retirement, forgetting, prior splitting and
prior pooling are all plain vector arithmetic. Layouts:

regression (``p`` = 1 for constant, ``d + 1`` for linear)::

    [n, sum(y^2), X'y (p), X'X (p*p)]

multinomial with ``K`` classes::

    [n, counts (K)]

The baseline non-informative prior is the zero vector for regression
(reference prior ``1/sigma^2``) and Dirichlet ``a0`` for the multinomial;
only informative mass above the baseline is stored.

The numba kernels at the top are used directly by the tree and SMC engines;
the dataclasses and functions below wrap them for interactive use.
"""

from __future__ import annotations

import math
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numba import njit

CONSTANT = 0
LINEAR = 1
MULTINOMIAL = 2

KIND_NAMES = {CONSTANT: "constant", LINEAR: "linear", MULTINOMIAL: "multinomial"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

# fit modes returned by the kernels
MODE_IMPROPER = -1
MODE_CONSTANT = 0
MODE_LINEAR = 1
MODE_MULTINOMIAL = 2

MIN_POINTS = 5.0
COND_MAX = 1e10

LOG_2PI = math.log(2.0 * math.pi)

ModelSpec = namedtuple(
    "ModelSpec",
    ["kind", "p", "K", "L", "min_pts", "cond_max", "base_mean", "base_var", "a0"],
)
ModelSpec.__doc__ = """Numeric description of a leaf model, passed into kernels.

``p`` is the augmented regression dimension (1 for constant leaves), ``K``
the class count, ``L`` the statistic length. ``base_mean``/``base_var``
define the vague Gaussian used by improper regression leaves.
"""


def stat_length(kind: int, p: int, K: int) -> int:
    if kind == MULTINOMIAL:
        return 1 + K
    return 2 + p + p * p


def make_spec(
    kind: str | int,
    d: int = 0,
    K: int = 2,
    min_pts: float = MIN_POINTS,
    cond_max: float = COND_MAX,
    baseline: tuple[float, float] = (0.0, 1.0),
    a0: np.ndarray | None = None,
) -> ModelSpec:
    """Build a :class:`ModelSpec` for input dimension ``d``."""
    kind = KIND_CODES[kind] if isinstance(kind, str) else int(kind)
    if kind == MULTINOMIAL:
        p = 0
        a0 = np.ones(K) if a0 is None else np.asarray(a0, dtype=np.float64)
        if a0.shape != (K,) or np.any(a0 <= 0):
            raise ValueError("a0 must be a positive vector of length K")
    else:
        p = 1 if kind == CONSTANT else d + 1
        K = 0
        a0 = np.ones(1)
    if baseline[1] <= 0:
        raise ValueError("baseline variance must be positive")
    return ModelSpec(
        kind, p, K, stat_length(kind, p, K), float(min_pts), float(cond_max),
        float(baseline[0]), float(baseline[1]), a0,
    )


# ---------------------------------------------------------------------------
# kernels

@njit(cache=True)
def point_stat(spec, x, y, out):
    """Write the statistic vector of a single observation into ``out``."""
    out[:] = 0.0
    out[0] = 1.0
    if spec.kind == MULTINOMIAL:
        out[1 + int(y)] = 1.0
        return
    p = spec.p
    out[1] = y * y
    xy = 2
    g = 2 + p
    for a in range(p):
        xa = 1.0 if a == 0 else x[a - 1]
        out[xy + a] = xa * y
        for b in range(p):
            xb = 1.0 if b == 0 else x[b - 1]
            out[g + a * p + b] = xa * xb


@njit(cache=True)
def _cholesky(A, p):
    """In-place lower Cholesky of the leading p x p block; False if not PD."""
    for j in range(p):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if not s > 0.0:
            return False
        A[j, j] = math.sqrt(s)
        for i in range(j + 1, p):
            t = A[i, j]
            for k in range(j):
                t -= A[i, k] * A[j, k]
            A[i, j] = t / A[j, j]
        for i in range(j):
            A[i, j] = 0.0
    return True


@njit(cache=True)
def _forward(Lc, b, out, p):
    for i in range(p):
        t = b[i]
        for k in range(i):
            t -= Lc[i, k] * out[k]
        out[i] = t / Lc[i, i]


@njit(cache=True)
def _backward(Lc, b, out, p):
    for i in range(p - 1, -1, -1):
        t = b[i]
        for k in range(i + 1, p):
            t -= Lc[k, i] * out[k]
        out[i] = t / Lc[i, i]


@njit(cache=True)
def fit(spec, S, chol, beta):
    """Fit the leaf posterior from combined statistics ``S``.

    Fills ``chol`` (Cholesky factor of the Gram matrix actually used) and
    ``beta``. Returns ``(mode, nu, rss, logdet, proper)``; for constant mode
    only ``chol[0, 0]`` and ``beta[0]`` are meaningful.
    """
    n = S[0]
    if spec.kind == MULTINOMIAL:
        return MODE_MULTINOMIAL, n, 0.0, 0.0, True
    p = spec.p
    r = S[1]
    mode = MODE_IMPROPER
    nu = 0.0
    rss = 0.0
    logdet = 0.0
    if spec.kind == LINEAR and p > 1 and n - p >= 1.0:
        g = 2 + p
        for a in range(p):
            for b in range(p):
                chol[a, b] = S[g + a * p + b]
        if _cholesky(chol, p):
            dmax = 0.0
            dmin = np.inf
            for a in range(p):
                dmax = max(dmax, chol[a, a])
                dmin = min(dmin, chol[a, a])
            if (dmax / dmin) ** 2 <= spec.cond_max:
                tmp = np.empty(p)
                _forward(chol, S[2:2 + p], tmp, p)
                _backward(chol, tmp, beta, p)
                R = 0.0
                for a in range(p):
                    R += S[2 + a] * beta[a]
                    logdet += 2.0 * math.log(chol[a, a])
                rss = r - R
                nu = n - p
                mode = MODE_LINEAR
    if mode == MODE_IMPROPER and n - 1.0 >= 1.0:
        sy = S[2]
        chol[0, 0] = math.sqrt(n)
        beta[0] = sy / n
        rss = r - sy * sy / n
        nu = n - 1.0
        logdet = math.log(n)
        mode = MODE_CONSTANT
    if mode != MODE_IMPROPER:
        floor = 1e-12 * (abs(r) + 1e-12)
        if rss < floor:
            rss = floor
    proper = mode != MODE_IMPROPER and n >= spec.min_pts
    return mode, nu, rss, logdet, proper


@njit(cache=True)
def logml(spec, S, chol, beta):
    """Log marginal likelihood of all data summarised in ``S``.

    Regression leaves use the reference prior ``1/sigma^2`` on the intercept
    and variance; linear leaves add a unit-information g-prior (``g = n``) on
    the slopes so that evidence is comparable across partitions. Multinomial
    leaves use the Dirichlet baseline. Improper regression leaves fall back to
    the vague Gaussian baseline likelihood of the same statistics.
    """
    n = S[0]
    if spec.kind == MULTINOMIAL:
        A0 = 0.0
        out = 0.0
        for j in range(spec.K):
            A0 += spec.a0[j]
            out += math.lgamma(spec.a0[j] + S[1 + j]) - math.lgamma(spec.a0[j])
        return out + math.lgamma(A0) - math.lgamma(A0 + n)
    mode, nu, rss, logdet, proper = fit(spec, S, chol, beta)
    if not proper:
        m0 = spec.base_mean
        v0 = spec.base_var
        sq = S[1] - 2.0 * m0 * S[2] + n * m0 * m0
        return -0.5 * n * (LOG_2PI + math.log(v0)) - 0.5 * sq / v0
    rss0 = S[1] - S[2] * S[2] / n
    floor = 1e-12 * (abs(S[1]) + 1e-12)
    if rss0 < floor:
        rss0 = floor
    h0 = 0.5 * (n - 1.0)
    out = -h0 * LOG_2PI - 0.5 * math.log(n) + math.lgamma(h0) - h0 * math.log(0.5 * rss0)
    if mode == MODE_LINEAR:
        # unit-information g-prior on the slopes: scale-free Bayes factor
        # against the intercept-only fit of the same data
        g = n
        ratio = min(rss / rss0, 1.0)
        out += 0.5 * (n - spec.p) * math.log1p(g) - h0 * math.log1p(g * ratio)
    return out


@njit(cache=True)
def pred_moments(spec, S, x, chol, beta):
    """Student-t predictive at ``x``: ``(loc, scale2, nu, proper)``.

    Improper leaves return the Gaussian baseline with ``nu = inf``.
    """
    mode, nu, rss, logdet, proper = fit(spec, S, chol, beta)
    if not proper:
        return spec.base_mean, spec.base_var, np.inf, False
    s2 = rss / nu
    if mode == MODE_CONSTANT:
        return beta[0], s2 * (1.0 + 1.0 / S[0]), nu, True
    p = spec.p
    xt = np.empty(p)
    xt[0] = 1.0
    for a in range(1, p):
        xt[a] = x[a - 1]
    loc = 0.0
    for a in range(p):
        loc += xt[a] * beta[a]
    v = np.empty(p)
    _forward(chol, xt, v, p)
    q = 0.0
    for a in range(p):
        q += v[a] * v[a]
    return loc, s2 * (1.0 + q), nu, True


@njit(cache=True)
def t_logpdf(y, loc, scale2, nu):
    z = (y - loc) * (y - loc) / scale2
    if nu == np.inf:
        return -0.5 * (LOG_2PI + math.log(scale2) + z)
    return (
        math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
        - 0.5 * math.log(nu * math.pi * scale2)
        - 0.5 * (nu + 1.0) * math.log1p(z / nu)
    )


@njit(cache=True)
def log_predictive(spec, S, x, y, chol, beta):
    """Log one-step predictive density (or probability) of ``y`` at ``x``."""
    if spec.kind == MULTINOMIAL:
        A = S[0]
        for j in range(spec.K):
            A += spec.a0[j]
        c = int(y)
        return math.log((spec.a0[c] + S[1 + c]) / A)
    loc, scale2, nu, proper = pred_moments(spec, S, x, chol, beta)
    return t_logpdf(y, loc, scale2, nu)


@njit(cache=True)
def class_probs(spec, S, out):
    A = S[0]
    for j in range(spec.K):
        A += spec.a0[j]
    for j in range(spec.K):
        out[j] = (spec.a0[j] + S[1 + j]) / A


# ---------------------------------------------------------------------------
# Python-level priors and posteriors

@dataclass
class RegressionPrior:
    """Retired-data summary for a Gaussian leaf.

    ``G`` is the retired Gram matrix over augmented rows ``[1, x']`` (1 x 1
    for the constant model), ``Xy`` the retired cross-moments, ``r`` the
    retired sum of squared responses and ``n_eff`` the (possibly fractional)
    retired count.
    """

    n_eff: float
    G: np.ndarray
    Xy: np.ndarray
    r: float

    @classmethod
    def empty(cls, d: int = 0, linear: bool = True) -> RegressionPrior:
        p = d + 1 if linear else 1
        return cls(0.0, np.zeros((p, p)), np.zeros(p), 0.0)

    @property
    def p(self) -> int:
        return self.Xy.shape[0]

    @property
    def kind(self) -> str:
        return "linear" if self.p > 1 else "constant"

    def stats(self) -> np.ndarray:
        return np.concatenate(([self.n_eff, self.r], self.Xy, self.G.ravel()))

    @classmethod
    def from_stats(cls, S: np.ndarray, p: int) -> RegressionPrior:
        S = np.asarray(S, dtype=np.float64)
        return cls(float(S[0]), S[2 + p:].reshape(p, p).copy(), S[2:2 + p].copy(), float(S[1]))


@dataclass
class MultinomialPrior:
    """Dirichlet leaf prior ``a = a0 + retired pseudo-counts``."""

    a: np.ndarray
    baseline: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.baseline is None:
            self.baseline = np.ones_like(self.a)
        self.baseline = np.asarray(self.baseline, dtype=np.float64)

    @classmethod
    def empty(cls, K: int, baseline: np.ndarray | None = None) -> MultinomialPrior:
        base = np.ones(K) if baseline is None else np.asarray(baseline, dtype=np.float64)
        return cls(base.copy(), base)

    @property
    def kind(self) -> str:
        return "multinomial"

    @property
    def n_eff(self) -> float:
        return float(np.sum(self.a - self.baseline))

    def stats(self) -> np.ndarray:
        c = self.a - self.baseline
        return np.concatenate(([c.sum()], c))

    @classmethod
    def from_stats(cls, S: np.ndarray, baseline: np.ndarray) -> MultinomialPrior:
        baseline = np.asarray(baseline, dtype=np.float64)
        return cls(baseline + np.asarray(S[1:], dtype=np.float64), baseline)


Prior = RegressionPrior | MultinomialPrior


def _spec_for(prior: Prior, **kw: Any) -> ModelSpec:
    if isinstance(prior, MultinomialPrior):
        return make_spec("multinomial", K=prior.a.shape[0], a0=prior.baseline,
                         min_pts=kw.get("min_pts", MIN_POINTS))
    return make_spec(
        prior.kind, d=prior.p - 1,
        min_pts=kw.get("min_pts", MIN_POINTS),
        cond_max=kw.get("cond_max", COND_MAX),
        baseline=kw.get("baseline", (0.0, 1.0)),
    )


def _rebuild(prior: Prior, S: np.ndarray) -> Prior:
    if isinstance(prior, MultinomialPrior):
        return MultinomialPrior.from_stats(S, prior.baseline)
    return RegressionPrior.from_stats(S, prior.p)


def _as_arrays(active: Any) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(X, y)`` or a sequence of objects with ``.x`` and ``.y``."""
    if isinstance(active, tuple) and len(active) == 2:
        X, y = active
        return np.atleast_2d(np.asarray(X, dtype=np.float64)), np.asarray(y, dtype=np.float64).ravel()
    active = list(active)
    if not active:
        return np.zeros((0, 0)), np.zeros(0)
    X = np.array([np.atleast_1d(o.x) for o in active], dtype=np.float64)
    y = np.array([o.y for o in active], dtype=np.float64)
    return X, y


def data_stats(spec: ModelSpec, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sum of point statistics over rows of ``X`` / entries of ``y``."""
    S = np.zeros(spec.L)
    buf = np.empty(spec.L)
    for i in range(len(y)):
        xi = X[i] if X.shape[1] else np.zeros(0)
        point_stat(spec, xi, y[i], buf)
        S += buf
    return S


def _check_obs(prior: Prior, x: np.ndarray, y: float) -> None:
    if isinstance(prior, MultinomialPrior):
        K = prior.a.shape[0]
        if not (0 <= int(y) < K) or int(y) != y:
            raise ValueError(f"class label {y!r} outside [0, {K})")
    elif prior.p > 1 and np.asarray(x).shape != (prior.p - 1,):
        raise ValueError(f"x has shape {np.shape(x)}, prior expects ({prior.p - 1},)")


def retire_into_prior(prior: Prior, obs: Any, lam: float = 1.0) -> Prior:
    """Fold one observation into ``prior``, downweighting history by ``lam``.

    ``obs`` is an ``(x, y)`` pair or any object with ``x`` and ``y``.

    Regression: ``G <- lam*G + x x'``, ``Xy <- lam*Xy + x y``,
    ``r <- lam*r + y^2``, ``n_eff <- lam*n_eff + 1``. Multinomial:
    ``a <- a0 + lam*(a - a0) + z``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"forgetting factor {lam} outside [0, 1]")
    x, y = obs if isinstance(obs, tuple) else (obs.x, obs.y)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    _check_obs(prior, x, y)
    spec = _spec_for(prior)
    buf = np.empty(spec.L)
    point_stat(spec, x, float(y), buf)
    return _rebuild(prior, lam * prior.stats() + buf)


def _check_pair(left: Prior, right: Prior) -> None:
    if type(left) is not type(right):
        raise ValueError("cannot combine priors of different model types")
    if isinstance(left, MultinomialPrior):
        if left.a.shape != right.a.shape or not np.array_equal(left.baseline, right.baseline):
            raise ValueError("multinomial priors differ in classes or baseline")
    elif left.p != right.p:
        raise ValueError(f"dimension mismatch: p={left.p} vs p={right.p}")


def pool_priors(left: Prior, right: Prior) -> Prior:
    """Additively pool two sibling priors (used on prune)."""
    _check_pair(left, right)
    return _rebuild(left, left.stats() + right.stats())


def split_prior(prior: Prior, alpha: float) -> tuple[Prior, Prior]:
    """Share ``prior`` between two children in proportions ``alpha`` / ``1-alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"split fraction {alpha} outside [0, 1]")
    S = prior.stats()
    return _rebuild(prior, alpha * S), _rebuild(prior, (1.0 - alpha) * S)


@dataclass
class LeafPosterior:
    """Leaf posterior from combined (retired + active) statistics.

    For regression leaves ``beta`` is the coefficient vector over ``[1, x']``
    (so ``beta[0]`` is the intercept, or the mean for constant leaves),
    ``s2`` the residual scale and ``nu`` the degrees of freedom. ``kind``
    records the model actually used, which may be ``"constant"`` for a
    linear leaf whose Gram matrix is singular or too small.
    """

    kind: str
    stats: np.ndarray
    spec: ModelSpec
    proper: bool
    n: float
    nu: float = 0.0
    beta: np.ndarray | None = None
    s2: float = 0.0
    rss: float = 0.0
    G: np.ndarray | None = None
    probs: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(self.beta[0]) if self.beta is not None else float("nan")

    @property
    def Ginv(self) -> np.ndarray:
        return np.linalg.inv(self.G)


def posterior(prior: Prior, active: Any = (), **kw: Any) -> LeafPosterior:
    """Combine ``prior`` with active observations and fit the leaf.

    ``active`` is ``(X, y)`` or a sequence of observations. Keyword options
    ``min_pts``, ``cond_max`` and ``baseline`` (mean, variance of the vague
    fallback) override the defaults.
    """
    spec = _spec_for(prior, **kw)
    X, y = _as_arrays(active)
    S = prior.stats() + (data_stats(spec, X, y) if len(y) else 0.0)
    return _posterior_from_stats(spec, S)


def _posterior_from_stats(spec: ModelSpec, S: np.ndarray) -> LeafPosterior:
    if spec.kind == MULTINOMIAL:
        probs = np.empty(spec.K)
        class_probs(spec, S, probs)
        return LeafPosterior("multinomial", S, spec, True, float(S[0]), probs=probs)
    p = spec.p
    chol = np.zeros((p, p))
    beta = np.zeros(p)
    mode, nu, rss, logdet, proper = fit(spec, S, chol, beta)
    if mode == MODE_IMPROPER:
        return LeafPosterior("constant", S, spec, False, float(S[0]))
    if mode == MODE_CONSTANT:
        kind = "constant"
        beta = beta[:1].copy()
        G = np.array([[S[0]]])
    else:
        kind = "linear"
        G = S[2 + p:].reshape(p, p).copy()
    return LeafPosterior(kind, S, spec, bool(proper), float(S[0]), nu=float(nu), beta=beta,
                         s2=float(rss / nu), rss=float(rss), G=G)


@dataclass
class Predictive:
    """Leaf predictive distribution at one input.

    Regression: Student-t with location ``mean``, squared scale ``scale2``
    and ``df`` degrees of freedom (``df = inf`` marks the Gaussian baseline
    used by improper leaves). Multinomial: ``probs``.
    """

    mean: float = float("nan")
    scale2: float = float("nan")
    df: float = float("nan")
    probs: np.ndarray | None = None
    proper: bool = True

    @property
    def var(self) -> float:
        if self.df == np.inf:
            return self.scale2
        return self.scale2 * self.df / (self.df - 2.0) if self.df > 2.0 else np.inf

    def logpdf(self, y: float) -> float:
        if self.probs is not None:
            return float(np.log(self.probs[int(y)]))
        return float(t_logpdf(float(y), self.mean, self.scale2, self.df))

    def pdf(self, y: float) -> float:
        return math.exp(self.logpdf(y))


def predictive(post: LeafPosterior, x: Sequence[float] | np.ndarray = ()) -> Predictive:
    """Posterior predictive of ``post`` at input ``x``."""
    spec = post.spec
    if spec.kind == MULTINOMIAL:
        return Predictive(probs=post.probs.copy())
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if spec.p > 1 and x.shape != (spec.p - 1,):
        raise ValueError(f"x has shape {x.shape}, leaf expects ({spec.p - 1},)")
    p = spec.p
    loc, scale2, nu, proper = pred_moments(spec, post.stats, x if p > 1 else np.zeros(1),
                                           np.zeros((p, p)), np.zeros(p))
    return Predictive(float(loc), float(scale2), float(nu), proper=bool(proper))


def log_marginal_likelihood(prior: Prior, active: Any = (), **kw: Any) -> float:
    """Log marginal likelihood of retired plus active data under the baseline prior.

    Because the value depends only on combined statistics, moving a point
    from ``active`` into ``prior`` (with no forgetting) leaves it unchanged.
    """
    spec = _spec_for(prior, **kw)
    X, y = _as_arrays(active)
    S = prior.stats() + (data_stats(spec, X, y) if len(y) else 0.0)
    p = max(spec.p, 1)
    return float(logml(spec, S, np.zeros((p, p)), np.zeros(p)))
