import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit, softmax
from scipy.stats import logistic

from lcm4rec.choice import (
    NegConfig,
    binary_loss_from_scores,
    binary_losses,
    bl_set_probs,
    bl_set_scores,
    calibrate_enl_scale,
    enl_probs,
    enl_probs_quadrature,
    generic_probs,
    is_simplex,
    mnl_probs,
    sample_negatives,
)
from lcm4rec.data import ChoiceObservation, UtilityParams, utility
from lcm4rec.distributions import GaussianMixture, Gumbel, SignedExponential
from lcm4rec.quadrature import IntegrationError, choice_probs

utilities = st.lists(st.floats(-5, 5), min_size=2, max_size=6)
LAWS = [Gumbel(0.0, 1.0), Gumbel(0.0, 0.75), SignedExponential(0.0, 0.75), GaussianMixture()]


class _Logistic:
    """Logistic errors via scipy, an independent law for the quadrature."""

    def logcdf(self, x):
        return logistic.logcdf(x)

    def logpdf(self, x):
        return logistic.logpdf(x)

    def support(self, eps=1e-12):
        return float(logistic.ppf(eps)), float(logistic.ppf(1 - eps))

    def kinks(self):
        return ()


# -- utility ------------------------------------------------------------------


def test_utility_by_hand():
    s = np.sqrt(2.0)
    up = UtilityParams([[s, 0, 0]], [[s, 0, 0], [0, 1, 0]], [0.5, 0.3])
    assert utility(up, 0, 0) == pytest.approx(2.5)
    assert utility(up, 0, 1) == pytest.approx(0.3)


def test_utility_matches_elementwise_sum(rng):
    up = UtilityParams(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.random(6))
    for i in range(4):
        for j in range(6):
            brute = sum(up.user_embeddings[i, d] * up.item_embeddings[j, d] for d in range(3))
            assert utility(up, i, j) == pytest.approx(brute + up.item_constants[j], rel=1e-12)


def test_utility_unknown_ids():
    up = UtilityParams(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(KeyError):
        utility(up, 2, 0)
    with pytest.raises(KeyError):
        utility(up, 0, -1)


# -- MNL ------------------------------------------------------------------------


def test_mnl_known_rows():
    np.testing.assert_allclose(mnl_probs([3, 1]), [0.881, 0.119], atol=5e-4)
    np.testing.assert_allclose(mnl_probs([3, 1, 2]), [0.665, 0.090, 0.245], atol=5e-4)
    np.testing.assert_allclose(mnl_probs([0, 0, 0, 0]), 0.25)


def test_mnl_is_stable_for_huge_utilities():
    p = mnl_probs([1000.0, 999.0])
    assert is_simplex(p)
    assert p[0] == pytest.approx(expit(1.0))


@given(utilities, st.floats(-100, 100))
def test_mnl_translation_invariance(V, shift):
    np.testing.assert_allclose(mnl_probs(V), mnl_probs(np.asarray(V) + shift), atol=1e-12)


@given(utilities)
def test_mnl_matches_scipy_softmax(V):
    p = mnl_probs(V)
    assert is_simplex(p)
    np.testing.assert_allclose(p, softmax(V), atol=1e-12)


def test_rejects_bad_utilities():
    for bad in ([1.0], [], [0.0, np.nan], [[1.0, 2.0]]):
        with pytest.raises(ValueError):
            mnl_probs(bad)


# -- quadrature ----------------------------------------------------------------


def test_generic_gumbel_matches_mnl_on_many_lists():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        V = rng.uniform(-3, 3, rng.integers(2, 6))
        worst = max(worst, np.max(np.abs(generic_probs(V, Gumbel(0.0, 1.0)) - mnl_probs(V))))
    assert worst < 1e-5


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_generic_equal_utilities_uniform(law):
    np.testing.assert_allclose(generic_probs([0.4] * 4, law), 0.25, atol=1e-7)


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_generic_dominance(law):
    assert generic_probs([20.0, 0.0], law)[0] > 0.999


def test_generic_logistic_binary_is_logistic_cdf_of_difference():
    # two iid logistic errors differ by a variable whose cdf has no closed form,
    # so compare against direct 2-d Monte Carlo instead
    rng = np.random.default_rng(3)
    e = rng.logistic(size=(2, 2_000_000))
    mc = np.mean(1.3 + e[0] > e[1])
    p = choice_probs(np.array([1.3, 0.0]), _Logistic())
    assert abs(p[0] - mc) < 4 * np.sqrt(mc * (1 - mc) / e.shape[1])


def test_generic_gaussian_mixture_matches_simulation():
    law = GaussianMixture()
    rng = np.random.default_rng(11)
    V = np.array([0.3, 0.0, -0.4])
    n = 400_000
    e = law.sample(rng, (n, 3))
    freq = np.bincount(np.argmax(V + e, axis=1), minlength=3) / n
    np.testing.assert_allclose(generic_probs(V, law), freq, atol=4e-3)


def test_quadrature_failure_is_reported():
    with pytest.raises(IntegrationError):
        choice_probs(np.array([0.0, 1.0]), Gumbel(0.0, 1.0), n_max=32)


# -- exponomial ----------------------------------------------------------------


def test_enl_calibrated_binary():
    s = calibrate_enl_scale(0.881, 2.0)
    assert 1 - 0.5 * np.exp(-2 / s) == pytest.approx(0.881)
    np.testing.assert_allclose(enl_probs([3, 1], s), [0.881, 0.119], atol=5e-4)


def test_enl_closed_form_matches_quadrature():
    rng = np.random.default_rng(5)
    for _ in range(50):
        V = rng.uniform(-2, 2, rng.integers(2, 7))
        s = rng.uniform(0.3, 2.0)
        np.testing.assert_allclose(enl_probs(V, s), enl_probs_quadrature(V, s), atol=1e-6)


def test_enl_matches_simulation():
    rng = np.random.default_rng(9)
    V = np.array([3.0, 1.0, 2.0])
    n = 400_000
    eps = -rng.exponential(0.9, size=(n, 3))
    freq = np.bincount(np.argmax(V + eps, axis=1), minlength=3) / n
    np.testing.assert_allclose(enl_probs(V, 0.9), freq, atol=4e-3)


def test_enl_equal_utilities_uniform():
    np.testing.assert_allclose(enl_probs([1.0, 1.0, 1.0], 0.7), 1 / 3, atol=1e-12)


def test_enl_rejects_bad_scale():
    with pytest.raises(ValueError):
        enl_probs([1.0, 2.0], 0.0)


@given(utilities, st.floats(0.2, 3.0))
def test_enl_simplex(V, s):
    assert is_simplex(enl_probs(V, s))


# -- cannibalization -------------------------------------------------------------


@pytest.mark.parametrize("law", LAWS, ids=lambda d: d.kind)
def test_adding_alternative_cannibalizes_both(law):
    two = generic_probs([3.0, 1.0], law)
    three = generic_probs([3.0, 1.0, 2.0], law)
    assert three[0] < two[0] and three[1] < two[1]


def test_enl_conservative_mnl_proportional():
    s = calibrate_enl_scale()
    e2, e3 = enl_probs([3, 1], s), enl_probs([3, 1, 2], s)
    # the low-utility item loses relatively more under the exponomial model
    assert e2[1] / e3[1] > e2[0] / e3[0]
    m2, m3 = mnl_probs([3, 1]), mnl_probs([3, 1, 2])
    assert m2[1] / m3[1] == pytest.approx(m2[0] / m3[0], rel=1e-12)


# -- binary logit ------------------------------------------------------------------


def test_bl_set_probs_examples():
    np.testing.assert_allclose(bl_set_probs([0.0, 0.0]), [0.5, 0.5])
    assert bl_set_probs([2.0, -50.0])[0] == pytest.approx(1.0, abs=1e-12)
    V = np.array([1.0, 2.0, 3.0])
    s = expit(V)
    raw = np.array([s[0] * (1 - s[1]) * (1 - s[2]), s[1] * (1 - s[0]) * (1 - s[2]), s[2] * (1 - s[0]) * (1 - s[1])])
    np.testing.assert_allclose(bl_set_scores(V), raw, rtol=1e-12)
    np.testing.assert_allclose(bl_set_probs(V), raw / raw.sum(), rtol=1e-12)


@given(utilities)
def test_bl_simplex(V):
    assert is_simplex(bl_set_probs(V))


def test_binary_loss_saturated_and_zero():
    loss, _, _ = binary_loss_from_scores(np.array([50.0]), np.array([[-50.0, -50.0, -50.0]]))
    assert loss < 1e-20
    loss, _, _ = binary_loss_from_scores(np.zeros(5), np.zeros((5, 3)))
    assert loss == pytest.approx(np.log(2))


def test_binary_loss_gradient_matches_finite_difference(rng):
    pos, neg = rng.normal(size=4), rng.normal(size=(4, 3))
    for beta in (1.0, 0.4):
        _, g_pos, g_neg = binary_loss_from_scores(pos, neg, beta)
        h = 1e-6
        for n in range(4):
            up, dn = pos.copy(), pos.copy()
            up[n] += h
            dn[n] -= h
            fd = (binary_loss_from_scores(up, neg, beta)[0] - binary_loss_from_scores(dn, neg, beta)[0]) / (2 * h)
            assert g_pos[n] == pytest.approx(fd, rel=1e-6)
            up, dn = neg.copy(), neg.copy()
            up[n, 1] += h
            dn[n, 1] -= h
            fd = (binary_loss_from_scores(pos, up, beta)[0] - binary_loss_from_scores(pos, dn, beta)[0]) / (2 * h)
            assert g_neg[n, 1] == pytest.approx(fd, rel=1e-6)


def _toy_batch(rng, n_users=3, n_items=8, n=20):
    obs = []
    for _ in range(n):
        items = rng.choice(n_items, 4, replace=False)
        obs.append(ChoiceObservation(int(rng.integers(n_users)), int(items[0]), tuple(int(j) for j in items)))
    up = UtilityParams(rng.normal(size=(n_users, 3)), rng.normal(size=(n_items, 3)), rng.random(n_items))
    return obs, up


def test_bl_loss_zero_scores_is_log2():
    obs = [ChoiceObservation(0, 0, (0, 1, 2, 3))]
    up = UtilityParams(np.zeros((1, 3)), np.zeros((4, 3)), np.zeros(4))
    assert binary_losses(obs, up, "BL") == pytest.approx(np.log(2))


def test_gbce_with_unit_power_equals_bce(rng):
    obs, up = _toy_batch(rng)
    bce = binary_losses(obs, up, "BCE", NegConfig(3), rng=np.random.default_rng(1))
    g1 = binary_losses(obs, up, "gBCE", NegConfig(3, beta=1.0), rng=np.random.default_rng(1))
    assert g1 == pytest.approx(bce, rel=1e-12)


def test_gbce_beta_convention():
    cfg = NegConfig(3, t=1.0)
    assert cfg.gbce_beta(100) == pytest.approx(3 / 99)
    assert NegConfig(3, t=0.0).gbce_beta(100) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        cfg.gbce_beta(1)


def test_binary_losses_rejects_unknown_kind(rng):
    obs, up = _toy_batch(rng)
    with pytest.raises(ValueError):
        binary_losses(obs, up, "MNL")


def test_sample_negatives_excludes_positive_and_stays_in_pool():
    rng = np.random.default_rng(0)
    pools = {0: np.arange(0, 20, 2), 1: np.arange(5, 9)}
    users = rng.integers(0, 2, 3000)
    positives = np.array([rng.choice(pools[u]) for u in users])
    neg = sample_negatives(rng, users, positives, pools.__getitem__, 3)
    assert neg.shape == (3000, 3)
    assert not np.any(neg == positives[:, None])
    for u in (0, 1):
        assert np.isin(neg[users == u], pools[u]).all()
    # uniform over the remaining pool items
    rows = (users == 1) & (positives == 5)
    counts = np.bincount(neg[rows].ravel(), minlength=9)[6:9]
    assert counts.min() > 0.8 * counts.mean()


def test_sample_negatives_empty_pool():
    with pytest.raises(ValueError):
        sample_negatives(np.random.default_rng(0), [0], [1], lambda u: np.array([1]), 2)
