import numpy as np
import pytest
from scipy import stats

from lcm4rec.distributions import (
    GaussianMixture,
    Gumbel,
    EXPERIMENT_LAWS,
    SignedExponential,
    error_law_from_dict,
    named_law,
)

LAWS = [Gumbel(0.0, 0.75), Gumbel(-1.0, 2.0), SignedExponential(0.0, 0.75), SignedExponential(0.5, 1.3),
        GaussianMixture()]


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_cdf_monotone_with_unit_limits(law):
    lo, hi = law.support(1e-12)
    x = np.linspace(lo - 5, hi + 5, 5001)
    F = law.cdf(x)
    assert np.all(np.diff(F) >= 0)
    assert F[0] < 1e-9 and F[-1] > 1 - 1e-9


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_pdf_integrates_to_one(law):
    lo, hi = law.support(1e-12)
    x = np.sort(np.concatenate([np.linspace(lo, hi, 400_001), list(law.kinks())]))
    assert abs(np.trapezoid(law.pdf(x), x) - 1.0) < 1e-3


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_samples_follow_cdf(law):
    draws = law.sample(np.random.default_rng(3), 200_000)
    assert stats.kstest(draws, law.cdf).statistic < 0.01


def test_gumbel_matches_scipy():
    x = np.linspace(-4, 8, 101)
    np.testing.assert_allclose(Gumbel(0.3, 0.75).cdf(x), stats.gumbel_r(0.3, 0.75).cdf(x), rtol=1e-12)
    np.testing.assert_allclose(Gumbel(0.3, 0.75).pdf(x), stats.gumbel_r(0.3, 0.75).pdf(x), rtol=1e-12)


def test_signed_exponential_is_mirrored_exponential():
    law = SignedExponential(0.0, 0.75)
    x = np.linspace(-6, 2, 81)
    np.testing.assert_allclose(law.cdf(x), stats.expon(scale=0.75).sf(-x), atol=1e-14)
    assert law.pdf(np.array([0.1, 3.0])).max() == 0.0
    assert law.kinks() == (0.0,)


def test_gaussian_mixture_matches_scipy():
    law = GaussianMixture()
    x = np.linspace(-3, 3, 61)
    ref = stats.norm(-0.75, 0.25).pdf(x) / 3 + 2 * stats.norm(0.75, 0.25).pdf(x) / 3
    np.testing.assert_allclose(law.pdf(x), ref, rtol=1e-10)


def test_named_laws_and_round_trip():
    assert set(EXPERIMENT_LAWS) == {"gumbel", "signed_exponential", "gaussian_mixture"}
    for name in EXPERIMENT_LAWS:
        law = named_law(name)
        assert error_law_from_dict(law.to_dict()) == law
    with pytest.raises(ValueError):
        named_law("cauchy")


def test_invalid_scales_rejected():
    with pytest.raises(ValueError):
        Gumbel(0, 0)
    with pytest.raises(ValueError):
        SignedExponential(0, -1)
