import numpy as np
import pytest
from scipy import stats

from scout.rng import (
    NoiseFamily,
    NoiseKind,
    Rng,
    logistic_quantile,
    sample_logistic,
    sample_noise,
    sample_poisson,
)

EULER_GAMMA = 0.5772156649015329


def test_gaussian_variance_matches_protocol():
    rng = Rng(0).substream("gauss")
    x = sample_noise(NoiseFamily(NoiseKind.GAUSSIAN, 0.0, 0.25), 10**6, rng)
    assert 0.248 <= x.var() <= 0.252
    assert abs(x.mean()) < 2e-3


def test_exponential_mean_matches_protocol():
    rng = Rng(0).substream("expo")
    x = sample_noise(NoiseFamily(NoiseKind.EXPONENTIAL, 2.0), 10**6, rng)
    assert 0.498 <= x.mean() <= 0.502


def test_gumbel_mean_is_location_plus_scale_gamma():
    rng = Rng(0).substream("gumbel")
    x = sample_noise(NoiseFamily(NoiseKind.GUMBEL, 0.0, 0.5), 10**6, rng)
    assert abs(x.mean() - 0.5 * EULER_GAMMA) < 1e-2


@pytest.mark.parametrize(
    "family,cdf",
    [
        (NoiseFamily(NoiseKind.GAUSSIAN, 0.0, 0.25), stats.norm(0.0, 0.5).cdf),
        (NoiseFamily(NoiseKind.EXPONENTIAL, 2.0), stats.expon(scale=0.5).cdf),
        (NoiseFamily(NoiseKind.GUMBEL, 0.0, 0.5), stats.gumbel_r(0.0, 0.5).cdf),
    ],
)
def test_kolmogorov_smirnov_below_threshold(family, cdf):
    rng = Rng(123).substream(f"ks/{family.kind.value}")
    x = sample_noise(family, 10**5, rng)
    ks = stats.kstest(x, cdf).statistic
    assert ks < 0.01


@pytest.mark.parametrize(
    "family",
    [
        dict(kind=NoiseKind.GAUSSIAN, param1=0.0, param2=0.0),
        dict(kind=NoiseKind.GAUSSIAN, param1=0.0, param2=-1.0),
        dict(kind=NoiseKind.EXPONENTIAL, param1=0.0),
        dict(kind=NoiseKind.EXPONENTIAL, param1=-2.0),
        dict(kind=NoiseKind.GUMBEL, param1=0.0, param2=-0.5),
    ],
)
def test_invalid_noise_parameters_rejected(family):
    with pytest.raises(ValueError):
        NoiseFamily(**family)


def test_logistic_quantile_at_half_is_zero():
    assert logistic_quantile(0.5) == 0.0


def test_logistic_sample_statistics():
    rng = Rng(7).substream("logistic")
    x = sample_logistic(rng, 10**6)
    assert abs(np.median(x)) < 1e-2
    assert abs(x.var() / (np.pi**2 / 3.0) - 1.0) < 0.02


def test_poisson_mean_four():
    rng = Rng(11).substream("poisson")
    n = sample_poisson(4.0, rng, 10**6)
    assert 3.99 <= n.mean() <= 4.01
    # P(N >= 1) = 1 - e^-4, checked against the analytic CDF
    p1 = 1.0 - np.exp(-4.0)
    assert stats.poisson.sf(0, 4.0) == pytest.approx(p1, rel=1e-12)
    freq = (n >= 1).mean()
    se = np.sqrt(p1 * (1 - p1) / len(n))
    assert abs(freq - p1) < 4 * se


def test_poisson_degenerate_mean_guarded_to_one():
    rng = Rng(3).substream("poisson-tiny")
    n = sample_poisson(1e-12, rng, 1000)
    assert np.all(n == 0)
    assert np.all(np.maximum(n, 1) == 1)


def test_poisson_rejects_nonpositive_mean():
    with pytest.raises(ValueError):
        sample_poisson(0.0, Rng(0))
    with pytest.raises(ValueError):
        sample_poisson(-1.0, Rng(0))


def test_equal_seeds_reproduce_bitwise():
    a = Rng(42).substream("x").normal(size=1000)
    b = Rng(42).substream("x").normal(size=1000)
    assert np.array_equal(a, b)


def test_named_substreams_do_not_interact():
    root = Rng(5)
    a1 = root.substream("a").normal(size=100)
    # consuming stream b in between must not change stream a
    root2 = Rng(5)
    _ = root2.substream("b").normal(size=57)
    a2 = root2.substream("a").normal(size=100)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, root.substream("b").normal(size=100))


def test_nested_substreams_are_stable():
    a = Rng(9).substream("data-gen/3").random(10)
    b = Rng(9).substream("data-gen/3").random(10)
    c = Rng(9).substream("data-gen/4").random(10)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
