import time

import numpy as np
import pytest

from lcm4rec import mc
from lcm4rec.choice import generic_probs
from lcm4rec.data import ChoiceObservation
from lcm4rec.kernel import KernelCdfParams, derive
from lcm4rec.mc import (
    McEstimate,
    choice_prob_mc,
    draw_uniforms,
    loss_and_gradients,
    mc_probs,
    nll_corrected,
    nll_uncorrected,
    to_logits,
)

from conftest import random_params

BACKENDS = sorted(mc.BACKENDS)


def random_raw(rng, K=3):
    return KernelCdfParams(rng.normal(0, 0.5, K), rng.uniform(0.2, 1.5, K), rng.uniform(0.3, 1.2))


def random_batch(rng, n_users=3, n_items=5, n=6, sizes=(2, 3, 4)):
    obs = []
    for _ in range(n):
        size = int(rng.choice(sizes))
        items = rng.choice(n_items, size, replace=False)
        obs.append(ChoiceObservation(int(rng.integers(n_users)), int(rng.choice(items)), tuple(int(j) for j in items)))
    return obs


def fd_check(rng, backend=None, h=1e-5, correction="debiased"):
    """Worst relative error between analytic and central-difference gradients."""
    up = random_params(rng, 3, 5, 2)
    raw = random_raw(rng)
    batch = random_batch(rng)
    u = rng.random((len(batch), raw.K, 4)) * 0.98 + 0.01

    def _loss(batch, up, raw, u, backend):
        return loss_and_gradients(batch, up, raw, uniforms=u, backend=backend, correction=correction)[0]

    _, g = loss_and_gradients(batch, up, raw, uniforms=u, backend=backend, correction=correction)
    worst = 0.0
    pairs = [
        (up.user_embeddings, g.d_user_embeddings),
        (up.item_embeddings, g.d_item_embeddings),
        (up.item_constants, g.d_item_constants),
        (raw.alphas, g.d_alphas),
        (raw.betas, g.d_betas),
    ]
    for arr, grad in pairs:
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = _loss(batch, up, raw, u, backend)
            arr[idx] = old - h
            fm = _loss(batch, up, raw, u, backend)
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(grad[idx] - fd) / max(abs(fd), 1e-3))
    old = raw.lam
    raw.lam = old + h
    fp = _loss(batch, up, raw, u, backend)
    raw.lam = old - h
    fm = _loss(batch, up, raw, u, backend)
    raw.lam = old
    fd = (fp - fm) / (2 * h)
    return max(worst, abs(g.d_lambda - fd) / max(abs(fd), 1e-3))


# -- estimator -----------------------------------------------------------------------


def test_empty_product_gives_unit_probability(rng):
    dk = derive(random_raw(rng))
    z = to_logits(rng.random((2, dk.K, 5)))
    for backend in BACKENDS:
        np.testing.assert_allclose(mc_probs(np.zeros((2, 0)), z, dk, backend), 1.0)


def test_dominant_choice(rng):
    up = random_params(rng, 1, 3)
    up.item_constants[:] = [50.0, 0.0, 0.0]
    est = choice_prob_mc(ChoiceObservation(0, 0, (0, 1, 2)), up, derive(random_raw(rng)), 50, rng)
    assert est.mean > 0.999
    assert isinstance(est, McEstimate) and est.per_sample.shape == (50,)
    assert est.mean == pytest.approx(est.per_sample.mean())
    assert np.all((est.per_sample >= 0) & (est.per_sample <= 1))


def test_matches_quadrature_within_three_standard_errors():
    rng = np.random.default_rng(2024)
    dk = derive(random_raw(rng, K=4))
    misses = 0
    for _ in range(100):
        up = random_params(rng, 1, 4)
        obs = ChoiceObservation(0, int(rng.integers(4)), (0, 1, 2, 3))
        est = choice_prob_mc(obs, up, dk, 100_000 // dk.K, rng)
        exact = generic_probs(up.utilities(np.zeros(4, dtype=int), np.arange(4)), dk)[obs.chosen]
        se = est.per_sample.std(ddof=1) / np.sqrt(est.per_sample.size)
        misses += abs(est.mean - exact) > 3 * se
    # a 3-sigma band misses about 0.3% of the time
    assert misses <= 2


def test_rmse_shrinks_with_draws():
    rng = np.random.default_rng(8)
    dk = derive(random_raw(rng, K=3))
    cases = []
    for _ in range(20):
        up = random_params(rng, 1, 3)
        exact = generic_probs(up.utilities(np.zeros(3, dtype=int), np.arange(3)), dk)[0]
        cases.append((up, exact))
    rmse = []
    for S in (100, 1000, 10_000):
        err = [choice_prob_mc(ChoiceObservation(0, 0, (0, 1, 2)), up, dk, S, rng).mean - p for up, p in cases]
        rmse.append(np.sqrt(np.mean(np.square(err))))
    assert rmse[0] > rmse[1] > rmse[2]


def test_translation_invariance_with_fixed_draws(rng):
    up = random_params(rng)
    raw = random_raw(rng)
    batch = random_batch(rng)
    u = draw_uniforms(3, 1, len(batch), raw.K, 5)
    before = loss_and_gradients(batch, up, raw, uniforms=u)[0]
    up.item_constants += 2.5
    assert loss_and_gradients(batch, up, raw, uniforms=u)[0] == pytest.approx(before, rel=1e-12)


# -- corrected likelihood ---------------------------------------------------------------


def test_corrected_equals_plain_without_spread():
    P = np.array([[0.3] * 5, [0.8] * 5])
    assert nll_corrected(P) == pytest.approx(-np.log(0.3) - np.log(0.8))
    assert nll_corrected(np.full((1, 5), 0.5)) == pytest.approx(np.log(2))


def test_corrected_by_hand():
    p = np.array([0.2, 0.4, 0.3, 0.5, 0.1])
    S, m = p.size, p.mean()
    d = p - m
    second = (d**2).sum() / (2 * S * (S - 1) * m**2)
    third = (d**3).sum() / (3 * S * (S - 1) * (S - 2) * m**3)
    assert nll_corrected(p[None]) == pytest.approx(-np.log(m) - second + third, rel=1e-12)
    assert nll_corrected(p[None], correction="variance_penalty") == pytest.approx(-np.log(m) + second - third,
                                                                                  rel=1e-12)
    assert nll_uncorrected(p[None]) == pytest.approx(-np.log(m))


def test_corrected_needs_three_draws():
    with pytest.raises(ValueError):
        nll_corrected(np.full((1, 2), 0.5))
    with pytest.raises(ValueError):
        nll_corrected(np.full((1, 5), 0.5), correction="none")


def test_zero_probability_is_floored(caplog):
    value = nll_corrected(np.zeros((1, 4)))
    assert value == pytest.approx(-np.log(1e-12))
    assert "floored" in caplog.text


def bias_study(n_sets=10_000, S=5, seed=77, correction="debiased"):
    """Mean corrected and uncorrected NLL over repeated draw sets, and the truth."""
    rng = np.random.default_rng(seed)
    raw = KernelCdfParams(np.array([0.3, -0.2, 0.0]), np.array([0.4, 1.0, 0.2]), 0.5)
    dk = derive(raw)
    deltas = np.array([[0.5, -0.3, 1.2], [-1.5, -0.5, 0.2], [-2.5, -2.0, -1.0]])
    truth = sum(-np.log(generic_probs(np.concatenate([[0.0], -d]), dk)[0]) for d in deltas)
    u = rng.random((n_sets, len(deltas), dk.K, S))
    P = mc_probs(np.tile(deltas, (n_sets, 1)), to_logits(u.reshape(-1, dk.K, S)), dk).reshape(n_sets, len(deltas), S)
    corr = np.mean([nll_corrected(P[i], correction=correction) for i in range(n_sets)])
    unc = np.mean([nll_uncorrected(P[i]) for i in range(n_sets)])
    return corr, unc, truth


def test_bias_correction_moves_towards_truth():
    corr, unc, truth = bias_study(2000)
    # -log of an average overestimates -log P (Jensen)
    assert unc > truth
    assert abs(corr - truth) < abs(unc - truth)


def test_variance_penalty_moves_away_from_truth():
    corr, unc, truth = bias_study(2000, correction="variance_penalty")
    assert corr - truth > unc - truth > 0


# -- gradients ------------------------------------------------------------------------------


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("correction", ["debiased", "variance_penalty"])
def test_gradients_match_finite_differences(backend, correction):
    rng = np.random.default_rng(99)
    worst = max(fd_check(rng, backend, correction=correction) for _ in range(5))
    assert worst < 1e-4


def test_dead_kernel_gets_no_weight_gradient(rng):
    up = random_params(rng)
    raw = random_raw(rng)
    raw.alphas[1] = -50.0
    batch = random_batch(rng)
    _, g = loss_and_gradients(batch, up, raw, uniforms=draw_uniforms(1, 1, len(batch), raw.K, 5))
    assert abs(g.d_alphas[1]) < 1e-15


def test_untouched_ids_have_zero_gradient(rng):
    up = random_params(rng, 4, 8)
    batch = [ChoiceObservation(0, 1, (1, 2)), ChoiceObservation(1, 2, (2, 3, 1))]
    _, g = loss_and_gradients(batch, up, random_raw(rng), uniforms=draw_uniforms(0, 1, 2, 3, 5))
    assert np.all(g.d_user_embeddings[2:] == 0)
    assert np.all(g.d_item_embeddings[[0, 4, 5, 6, 7]] == 0)


def test_mean_reduction_divides_by_batch_size(rng):
    up = random_params(rng)
    raw = random_raw(rng)
    batch = random_batch(rng)
    u = draw_uniforms(0, 1, len(batch), raw.K, 5)
    s, gs = loss_and_gradients(batch, up, raw, uniforms=u)
    m, gm = loss_and_gradients(batch, up, raw, uniforms=u, reduction="mean")
    assert m == pytest.approx(s / len(batch))
    np.testing.assert_allclose(gm.d_item_embeddings, gs.d_item_embeddings / len(batch))


def test_needs_draws_or_rng(rng):
    with pytest.raises(ValueError):
        loss_and_gradients(random_batch(rng), random_params(rng), random_raw(rng))


# -- determinism and backends ---------------------------------------------------------------------


def test_uniforms_are_counter_based():
    a = draw_uniforms(5, 2, 10, 3, 4)
    np.testing.assert_array_equal(a, draw_uniforms(5, 2, 10, 3, 4))
    assert not np.array_equal(a, draw_uniforms(5, 3, 10, 3, 4))
    assert np.all((a > 0) & (a < 1))


def test_serial_runs_are_bit_identical(rng):
    up, raw, batch = random_params(rng), random_raw(rng), random_batch(rng, n=40)
    u = draw_uniforms(1, 1, len(batch), raw.K, 5)
    a = loss_and_gradients(batch, up, raw, uniforms=u)
    b = loss_and_gradients(batch, up, raw, uniforms=u)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1].d_item_embeddings, b[1].d_item_embeddings)


def test_chunked_evaluation_matches_serial(rng):
    up, raw, batch = random_params(rng), random_raw(rng), random_batch(rng, n=40)
    u = draw_uniforms(1, 1, len(batch), raw.K, 5)
    a = loss_and_gradients(batch, up, raw, uniforms=u)
    b = loss_and_gradients(batch, up, raw, uniforms=u, n_jobs=3)
    assert b[0] == pytest.approx(a[0], abs=1e-10)
    np.testing.assert_allclose(b[1].d_alphas, a[1].d_alphas, atol=1e-10)
    np.testing.assert_allclose(b[1].d_user_embeddings, a[1].d_user_embeddings, atol=1e-10)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree(rng):
    up, raw, batch = random_params(rng), random_raw(rng), random_batch(rng, n=50)
    u = draw_uniforms(2, 1, len(batch), raw.K, 5)
    a = loss_and_gradients(batch, up, raw, uniforms=u, backend="numpy")
    b = loss_and_gradients(batch, up, raw, uniforms=u, backend="cython")
    assert b[0] == pytest.approx(a[0], rel=1e-12)
    for name in ("d_alphas", "d_betas", "d_user_embeddings", "d_item_embeddings", "d_item_constants"):
        np.testing.assert_allclose(getattr(b[1], name), getattr(a[1], name), rtol=1e-9, atol=1e-12)


def _time_loss(K, rng, repeats=5):
    up = random_params(rng, 20, 40, 3)
    raw = KernelCdfParams(np.zeros(K), np.zeros(K), 0.5)
    batch = random_batch(rng, 20, 40, n=400, sizes=(4,))
    u = draw_uniforms(0, 1, len(batch), K, 5)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        loss_and_gradients(batch, up, raw, uniforms=u)
        best = min(best, time.perf_counter() - t)
    return best


def test_cost_grows_quadratically_in_k(rng):
    # log-log slope over K; per-call overhead flattens it at small K
    ks = np.array([10, 20, 40])
    times = [_time_loss(int(K), rng) for K in ks]
    slope = np.polyfit(np.log(ks), np.log(times), 1)[0]
    assert 1.6 <= slope <= 2.4
