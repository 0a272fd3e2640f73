"""Fast self-checks against independent oracles.

Each check draws random cases from a seeded generator and returns a
:class:`CheckResult`; :func:`run_all` runs them in order. They cover the
identities the engine relies on: retirement leaves predictives unchanged,
prior splitting is undone by pooling, the closed-form ALC integral matches
numerical quadrature, and retired-plus-active statistics reproduce the batch
posterior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from . import discard as dc
from . import leaf as lf
from . import tree as tr


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    cases: int

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: worst {self.worst:.3g} (tol {self.tol:g}, {self.cases} cases)"


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def _random_data(rng: np.random.Generator, n: int, d: int, linear: bool):
    X = rng.uniform(-1, 1, (n, d))
    y = rng.normal(X @ rng.normal(size=d) if linear else 0.0, rng.uniform(0.1, 2.0), n)
    return X, y


def retirement_invariance(cases: int = 200, seed: int = 0) -> CheckResult:
    """Retiring an active point with no forgetting keeps the predictive density."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in range(cases):
        kind = ("constant", "linear", "multinomial")[c % 3]
        d = int(rng.integers(1, 4))
        n = int(rng.integers(8, 30))
        X, y = _random_data(rng, n, d, kind == "linear")
        if kind == "multinomial":
            K = int(rng.integers(2, 5))
            y = rng.integers(K, size=n).astype(float)
            prior = lf.MultinomialPrior.empty(K)
        else:
            prior = lf.RegressionPrior.empty(d, linear=kind == "linear")
        k = int(rng.integers(n))
        before = lf.posterior(prior, (X, y))
        after = lf.posterior(lf.retire_into_prior(prior, (X[k], y[k]), 1.0),
                             (np.delete(X, k, 0), np.delete(y, k)))
        for _ in range(3):
            xt = rng.uniform(-1, 1, d)
            yt = float(rng.integers(prior.a.shape[0])) if kind == "multinomial" else rng.normal()
            worst = max(worst, _rel(lf.predictive(before, xt).pdf(yt),
                                    lf.predictive(after, xt).pdf(yt)))
    return CheckResult("retirement invariance", worst <= 1e-9, worst, 1e-9, cases)


def split_pool_reversibility(cases: int = 200, seed: int = 1) -> CheckResult:
    """Grow followed by prune restores every leaf prior."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 4))
        X, y = _random_data(rng, 40, d, True)
        spec = lf.make_spec(lf.LINEAR, d)
        t = tr.Tree.from_data(X, y, spec)
        # random informative priors in every leaf, built from retired data
        t.set_prior(0, lf.RegressionPrior.from_stats(lf.data_stats(spec, *_random_data(rng, 20, d, True)), spec.p))
        for _ in range(int(rng.integers(1, 6))):
            leaves = t.leaves()
            node = leaves[int(rng.integers(len(leaves)))]
            r = t.rectangle(node, clamp=False)
            j = int(rng.integers(d))
            lo, hi = max(r[j, 0], -1.0), min(r[j, 1], 1.0)
            if hi - lo < 1e-6:
                continue
            before = t.prior_stats(node)
            t = tr.apply_move(t, tr.Move("grow", node, 1.0, tr.SplitRule(j, float(rng.uniform(lo, hi)))))
            t = tr.apply_move(t, tr.Move("prune", node, 1.0))
            after = t.prior_stats(node)
            worst = max(worst, float(np.max(np.abs(after - before) / np.maximum(np.abs(before), 1.0))))
            t = tr.apply_move(t, tr.Move("grow", node, 1.0, tr.SplitRule(j, float(rng.uniform(lo, hi)))))
    return CheckResult("split/pool reversibility", worst <= 1e-12, worst, 1e-12, cases)


def alc_quadrature(cases: int = 60, seed: int = 2) -> CheckResult:
    """Closed-form rectangle integral against adaptive quadrature."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for c in range(cases):
        m = 1 + c % 3
        lo = rng.uniform(-2, 1, m)
        hi = lo + rng.uniform(0.1, 2, m)
        g = rng.normal(size=m)
        c0 = float(rng.normal())
        exact = dc.rect_integral(np.stack([lo, hi], 1), g, c0)
        f = lambda *z: (c0 + g @ np.array(z)) ** 2  # noqa: E731
        num = integrate.nquad(f, list(zip(lo, hi)), opts={"epsrel": 1e-11})[0]
        worst = max(worst, _rel(exact, num))
    return CheckResult("ALC closed form vs quadrature", worst <= 1e-6, worst, 1e-6, cases)


def batch_equivalence(cases: int = 200, seed: int = 3) -> CheckResult:
    """Retired-plus-active posterior equals the batch posterior on all data."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d = int(rng.integers(1, 4))
        n = int(rng.integers(12, 40))
        X, y = _random_data(rng, n, d, True)
        k = int(rng.integers(1, n - d - 2))
        prior = lf.RegressionPrior.empty(d)
        for i in range(k):
            prior = lf.retire_into_prior(prior, (X[i], y[i]), 1.0)
        seq = lf.posterior(prior, (X[k:], y[k:]))
        bat = lf.posterior(lf.RegressionPrior.empty(d), (X, y))
        A = np.column_stack([np.ones(n), X])
        beta, *_ = np.linalg.lstsq(A, y, rcond=None)
        worst = max(worst, float(np.max(np.abs(seq.beta - bat.beta) / np.maximum(np.abs(beta), 1e-12))),
                    _rel(seq.s2, bat.s2), float(np.max(np.abs(bat.beta - beta) / np.maximum(np.abs(beta), 1e-3))))
    return CheckResult("retired+active vs batch posterior", worst <= 1e-9, worst, 1e-9, cases)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "retirement": retirement_invariance,
    "reversibility": split_pool_reversibility,
    "alc": alc_quadrature,
    "batch": batch_equivalence,
}


def run_all(names: list[str] | None = None) -> list[CheckResult]:
    out = []
    for name in names or list(CHECKS):
        out.append(CHECKS[name]())
    return out
