import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as hst
from scipy import integrate, stats
from scipy.special import gammaln

from dyntree import leaf as lf


def linear_data(rng, n, d, sd=0.5):
    X = rng.uniform(-1, 1, (n, d))
    return X, 1.0 + X @ rng.normal(size=d) + sd * rng.standard_normal(n)


# ---------------------------------------------------------------------------
# statistics layout and small worked examples

def test_constant_prior_after_two_points():
    prior = lf.RegressionPrior.empty(0, linear=False)
    for y in (1.0, 3.0):
        prior = lf.retire_into_prior(prior, (np.zeros(0), y))
    assert prior.n_eff == 2.0
    assert prior.G[0, 0] == 2.0 and prior.Xy[0] == 4.0 and prior.r == 10.0
    post = lf.posterior(prior)
    assert post.mean == pytest.approx(2.0)
    assert post.rss == pytest.approx(2.0)


def test_perfect_line_recovers_coefficients():
    X = np.linspace(0, 1, 8)[:, None]
    post = lf.posterior(lf.RegressionPrior.empty(1), (X, 1 + 2 * X[:, 0]))
    np.testing.assert_allclose(post.beta, [1.0, 2.0], atol=1e-10)
    assert post.s2 < 1e-10


def test_multinomial_sequential_probability():
    # two classes, uniform Dirichlet(1, 1): P(0) * P(0 | 0) = 1/2 * 2/3
    prior = lf.MultinomialPrior.empty(2)
    got = lf.log_marginal_likelihood(prior, (np.zeros((2, 1)), np.array([0.0, 0.0])))
    assert got == pytest.approx(math.log(0.5 * 2 / 3))


def test_forgetting_zero_keeps_only_new_point():
    prior = lf.RegressionPrior.empty(1)
    prior = lf.retire_into_prior(prior, (np.array([0.3]), 2.0))
    prior = lf.retire_into_prior(prior, (np.array([0.7]), -1.0), lam=0.0)
    fresh = lf.retire_into_prior(lf.RegressionPrior.empty(1), (np.array([0.7]), -1.0))
    np.testing.assert_array_equal(prior.stats(), fresh.stats())


def test_forgetting_bounds_effective_size():
    prior = lf.RegressionPrior.empty(1)
    rng = np.random.default_rng(0)
    for _ in range(400):
        prior = lf.retire_into_prior(prior, (rng.random(1), rng.normal()), lam=0.9)
    assert prior.n_eff == pytest.approx(1 / (1 - 0.9), rel=1e-6)


def test_multinomial_forgetting_decays_towards_baseline():
    prior = lf.MultinomialPrior.empty(3)
    for _ in range(50):
        prior = lf.retire_into_prior(prior, (np.zeros(1), 1.0), lam=0.5)
    # counts above the Dirichlet baseline converge to 1 / (1 - lam) = 2
    np.testing.assert_allclose(prior.a, [1.0, 3.0, 1.0], atol=1e-9)


@pytest.mark.parametrize("bad", [-0.1, 1.5])
def test_invalid_forgetting_factor(bad):
    with pytest.raises(ValueError):
        lf.retire_into_prior(lf.RegressionPrior.empty(1), (np.zeros(1), 0.0), lam=bad)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        lf.retire_into_prior(lf.RegressionPrior.empty(2), (np.zeros(3), 0.0))
    with pytest.raises(ValueError):
        lf.pool_priors(lf.RegressionPrior.empty(1), lf.RegressionPrior.empty(2))
    with pytest.raises(ValueError):
        lf.retire_into_prior(lf.MultinomialPrior.empty(2), (np.zeros(1), 2.0))


# ---------------------------------------------------------------------------
# posterior and predictive against batch oracles

@pytest.mark.parametrize("d", [1, 2, 4])
def test_linear_posterior_matches_least_squares(d):
    rng = np.random.default_rng(d)
    X, y = linear_data(rng, 30, d)
    post = lf.posterior(lf.RegressionPrior.empty(d), (X, y))
    A = np.column_stack([np.ones(len(y)), X])
    beta, *_ = np.linalg.lstsq(A, y, rcond=None)
    rss = float(np.sum((y - A @ beta) ** 2))
    np.testing.assert_allclose(post.beta, beta, rtol=1e-9)
    assert post.rss == pytest.approx(rss, rel=1e-9)
    assert post.nu == len(y) - d - 1
    # Student-t predictive with the textbook scale
    xt = rng.uniform(-1, 1, d)
    at = np.r_[1.0, xt]
    s2 = rss / post.nu
    scale = math.sqrt(s2 * (1 + at @ np.linalg.solve(A.T @ A, at)))
    pred = lf.predictive(post, xt)
    for yt in (-1.0, 0.3, 2.0):
        ref = stats.t.pdf(yt, df=post.nu, loc=at @ beta, scale=scale)
        assert pred.pdf(yt) == pytest.approx(ref, rel=1e-10)
    assert pred.var == pytest.approx(scale ** 2 * post.nu / (post.nu - 2), rel=1e-10)


def test_constant_predictive_matches_student_t():
    rng = np.random.default_rng(3)
    y = rng.normal(2.0, 1.5, 12)
    post = lf.posterior(lf.RegressionPrior.empty(0, linear=False), (np.zeros((12, 0)), y))
    n = len(y)
    scale = math.sqrt(np.var(y, ddof=1) * (1 + 1 / n))
    pred = lf.predictive(post)
    assert pred.pdf(1.0) == pytest.approx(stats.t.pdf(1.0, n - 1, y.mean(), scale), rel=1e-10)


def test_linear_falls_back_to_constant_when_singular():
    X = np.ones((10, 2))  # collinear with the intercept
    y = np.arange(10.0)
    post = lf.posterior(lf.RegressionPrior.empty(2), (X, y))
    assert post.kind == "constant"
    assert post.mean == pytest.approx(4.5)


def test_few_points_are_improper_and_use_the_baseline():
    post = lf.posterior(lf.RegressionPrior.empty(1), (np.array([[0.1], [0.2]]), np.array([1.0, 2.0])),
                        baseline=(0.0, 4.0))
    assert not post.proper
    pred = lf.predictive(post, [0.5])
    assert pred.df == np.inf
    assert pred.pdf(1.0) == pytest.approx(stats.norm.pdf(1.0, 0.0, 2.0))


def test_multinomial_predictive_is_posterior_mean():
    prior = lf.MultinomialPrior.empty(3)
    post = lf.posterior(prior, (np.zeros((4, 1)), np.array([0, 2, 2, 2.0])))
    np.testing.assert_allclose(lf.predictive(post).probs, [2 / 7, 1 / 7, 4 / 7])


# ---------------------------------------------------------------------------
# marginal likelihoods against numerical integration

def test_constant_log_ml_matches_numerical_integral():
    rng = np.random.default_rng(5)
    y = rng.normal(1.0, 0.7, 7)
    n = len(y)

    # integrate N(y; mu, s2 I) over mu (flat) and s2 (density 1/s2)
    def inner(s2):
        rss = np.sum((y - y.mean()) ** 2)
        return (2 * math.pi * s2) ** (-(n - 1) / 2) * n ** -0.5 * math.exp(-rss / (2 * s2)) / s2

    ref = math.log(integrate.quad(inner, 0, np.inf, limit=200)[0])
    got = lf.log_marginal_likelihood(lf.RegressionPrior.empty(0, linear=False), (np.zeros((n, 0)), y))
    assert got == pytest.approx(ref, rel=1e-7)


def test_linear_log_ml_matches_numerical_integral():
    # flat intercept, 1/s2 on the variance and a unit-information g-prior on
    # the slopes: y | mu, s2 ~ N(mu 1, s2 (I + g P)) with P the projection on
    # the centred inputs
    rng = np.random.default_rng(11)
    n, d = 9, 2
    X, y = linear_data(rng, n, d, sd=0.8)
    Xc = X - X.mean(0)
    P = Xc @ np.linalg.solve(Xc.T @ Xc, Xc.T)
    g = n
    C = np.eye(n) + g * P
    Ci = np.linalg.inv(C)
    _, logdetC = np.linalg.slogdet(C)
    one = np.ones(n)
    a = one @ Ci @ one
    mu_hat = one @ Ci @ y / a
    q = (y - mu_hat) @ Ci @ (y - mu_hat)

    def inner(s2):
        # mu integrated analytically: Gaussian in mu with precision a / s2
        logv = (-(n - 1) / 2 * math.log(2 * math.pi * s2) - 0.5 * logdetC - 0.5 * math.log(a)
                - q / (2 * s2) - math.log(s2))
        return math.exp(logv)

    ref = math.log(integrate.quad(inner, 0, np.inf, limit=400, epsrel=1e-11)[0])
    got = lf.log_marginal_likelihood(lf.RegressionPrior.empty(d), (X, y))
    assert got == pytest.approx(ref, rel=1e-7)


def test_linear_evidence_is_scale_free():
    # rescaling the inputs changes nothing; rescaling y shifts every leaf's
    # log evidence by the same per-point Jacobian
    rng = np.random.default_rng(2)
    X, y = linear_data(rng, 20, 2)
    prior = lf.RegressionPrior.empty(2)
    base = lf.log_marginal_likelihood(prior, (X, y))
    assert lf.log_marginal_likelihood(prior, (10 * X + 3, y)) == pytest.approx(base, rel=1e-9)
    c = 7.0
    shifted = lf.log_marginal_likelihood(prior, (X, c * y))
    assert shifted == pytest.approx(base - (len(y) - 1) * math.log(c), rel=1e-9)


def test_linear_data_does_not_reward_splitting():
    rng = np.random.default_rng(0)
    X, y = linear_data(rng, 200, 3, sd=1.0)
    prior = lf.RegressionPrior.empty(3)
    m = X[:, 0] < 0
    whole = lf.log_marginal_likelihood(prior, (X, y))
    split = (lf.log_marginal_likelihood(prior, (X[m], y[m]))
             + lf.log_marginal_likelihood(prior, (X[~m], y[~m])))
    assert split < whole


@pytest.mark.parametrize("kind", ["constant", "multinomial"])
def test_log_ml_chain_rule(kind):
    # marginal likelihood = product of one-step predictives once proper
    rng = np.random.default_rng(4)
    n = 25
    X = rng.random((n, 1))
    if kind == "multinomial":
        y = rng.integers(3, size=n).astype(float)
        prior = lf.MultinomialPrior.empty(3)
        start = 0
    else:
        y = rng.normal(size=n)
        prior = lf.RegressionPrior.empty(0, linear=False)
        X = np.zeros((n, 0))
        start = 6
    total = lf.log_marginal_likelihood(prior, (X[:start], y[:start])) if start else 0.0
    for k in range(start, n):
        post = lf.posterior(prior, (X[:k], y[:k]))
        total += lf.predictive(post, X[k]).logpdf(y[k])
    assert total == pytest.approx(lf.log_marginal_likelihood(prior, (X, y)), rel=1e-9)


def test_dirichlet_multinomial_closed_form():
    counts = np.array([3, 0, 5])
    a0 = np.ones(3)
    ref = (gammaln(a0.sum()) - gammaln(a0.sum() + counts.sum())
           + np.sum(gammaln(a0 + counts) - gammaln(a0)))
    y = np.repeat([0.0, 1.0, 2.0], counts)
    got = lf.log_marginal_likelihood(lf.MultinomialPrior.empty(3), (np.zeros((len(y), 1)), y))
    assert got == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------------------
# properties

@settings(max_examples=150, deadline=None)
@given(seed=hst.integers(0, 2**32 - 1), kind=hst.sampled_from(["constant", "linear", "multinomial"]),
       d=hst.integers(1, 3), n=hst.integers(3, 30))
def test_retirement_preserves_predictive(seed, kind, d, n):
    rng = np.random.default_rng(seed)
    X, y = linear_data(rng, n, d)
    if kind == "multinomial":
        y = rng.integers(3, size=n).astype(float)
        prior = lf.MultinomialPrior.empty(3)
    else:
        prior = lf.RegressionPrior.empty(d, linear=kind == "linear")
    k = int(rng.integers(n))
    before = lf.posterior(prior, (X, y))
    after = lf.posterior(lf.retire_into_prior(prior, (X[k], y[k])), (np.delete(X, k, 0), np.delete(y, k)))
    xt = rng.uniform(-1, 1, d)
    yt = 1.0 if kind == "multinomial" else float(rng.normal())
    a, b = lf.predictive(before, xt).logpdf(yt), lf.predictive(after, xt).logpdf(yt)
    assert abs(math.exp(a - b) - 1) <= 1e-9
    assert lf.log_marginal_likelihood(prior, (X, y)) == pytest.approx(
        lf.log_marginal_likelihood(lf.retire_into_prior(prior, (X[k], y[k])),
                                   (np.delete(X, k, 0), np.delete(y, k))), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(seed=hst.integers(0, 2**32 - 1), alpha=hst.floats(0, 1), d=hst.integers(1, 3))
def test_split_then_pool_restores_prior(seed, alpha, d):
    rng = np.random.default_rng(seed)
    prior = lf.RegressionPrior.empty(d)
    X, y = linear_data(rng, 15, d)
    for k in range(15):
        prior = lf.retire_into_prior(prior, (X[k], y[k]), lam=float(rng.uniform(0.5, 1)))
    left, right = lf.split_prior(prior, alpha)
    back = lf.pool_priors(left, right)
    np.testing.assert_allclose(back.stats(), prior.stats(), rtol=1e-12, atol=1e-12)
    assert left.n_eff == pytest.approx(alpha * prior.n_eff)


@settings(max_examples=100, deadline=None)
@given(seed=hst.integers(0, 2**32 - 1), d=hst.integers(1, 3), k=hst.integers(0, 20))
def test_retired_plus_active_equals_batch(seed, d, k):
    rng = np.random.default_rng(seed)
    X, y = linear_data(rng, 25, d)
    prior = lf.RegressionPrior.empty(d)
    for i in range(k):
        prior = lf.retire_into_prior(prior, (X[i], y[i]))
    seq = lf.posterior(prior, (X[k:], y[k:]))
    bat = lf.posterior(lf.RegressionPrior.empty(d), (X, y))
    np.testing.assert_allclose(seq.beta, bat.beta, rtol=1e-9, atol=1e-12)
    assert seq.s2 == pytest.approx(bat.s2, rel=1e-9)
