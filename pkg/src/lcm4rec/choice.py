"""Parametric choice models and the univariate baseline losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .distributions import ErrorDistribution, SignedExponential
from .quadrature import choice_probs

SIMPLEX_ATOL = 1e-9


def is_simplex(p, atol: float = SIMPLEX_ATOL) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(np.all(p >= 0) and abs(p.sum() - 1.0) <= atol)


def _check_utilities(utilities) -> np.ndarray:
    V = np.asarray(utilities, dtype=float)
    if V.ndim != 1 or V.size < 2:
        raise ValueError("need at least two utilities")
    if not np.all(np.isfinite(V)):
        raise ValueError("utilities must be finite")
    return V


def mnl_probs(utilities) -> np.ndarray:
    """Softmax choice probabilities (Gumbel errors with unit scale)."""
    V = _check_utilities(utilities)
    e = np.exp(V - V.max())
    return e / e.sum()


def generic_probs(utilities, err: ErrorDistribution, tol: float = 1e-7) -> np.ndarray:
    """Choice probabilities for any IID error law, by quadrature."""
    return choice_probs(_check_utilities(utilities), err, tol=tol)


# -- exponomial (signed exponential errors) ---------------------------------


def _exponomial_terms(V: np.ndarray, scale: float):
    """Sorted utilities, sort order, ``E_i`` and the mixing matrix.

    With utilities sorted ascending and ``m_i = n - i`` (0-based ``i``),
    ``E_i = exp(-sum_{r>=i}(V_r - V_i) / scale)`` and the probability of
    the alternative at sorted position ``p`` is
    ``E_p / m_p - sum_{i<p} E_i / (m_i (m_i - 1))``.
    """
    n = V.shape[-1]
    order = np.argsort(V, axis=-1, kind="stable")
    Vs = np.take_along_axis(V, order, axis=-1)
    suffix = np.flip(np.cumsum(np.flip(Vs, axis=-1), axis=-1), axis=-1)
    m = np.arange(n, 0, -1, dtype=float)
    logE = -(suffix - m * Vs) / scale
    E = np.exp(logE)
    coef = np.zeros((n, n))
    for p in range(n):
        coef[p, p] = 1.0 / m[p]
        for i in range(p):
            coef[p, i] = -1.0 / (m[i] * (m[i] - 1.0))
    return Vs, order, E, coef, m


def exponomial_probs(V, scale: float = 1.0) -> np.ndarray:
    """Closed-form exponomial probabilities along the last axis."""
    V = np.asarray(V, dtype=float)
    _, order, E, coef, _ = _exponomial_terms(V, scale)
    Ps = np.maximum(E @ coef.T, 0.0)
    P = np.empty_like(Ps)
    np.put_along_axis(P, order, Ps, axis=-1)
    return P / P.sum(axis=-1, keepdims=True)


def exponomial_logprob_grad(V: np.ndarray, pos: np.ndarray, scale: float = 1.0):
    """``log P(pos)`` and its gradient w.r.t. ``V`` for a batch ``(N, n)``."""
    V = np.asarray(V, dtype=float)
    N, n = V.shape
    Vs, order, E, coef, m = _exponomial_terms(V, scale)
    sorted_pos = np.argmax(order == pos[:, None], axis=1)
    c = coef[sorted_pos]  # (N, n) weights on E_i
    P = np.maximum(np.einsum("ni,ni->n", c, E), 1e-300)
    # d log E_i / d V_r (sorted coordinates): -1/s for r > i, (m_i - 1)/s at r = i
    r = np.arange(n)
    dlogE = np.where(r[None, :] > r[:, None], -1.0, 0.0) + np.diag(m - 1.0)
    dlogE = dlogE / scale
    dP_sorted = np.einsum("ni,ni,ir->nr", c, E, dlogE)
    grad = np.empty_like(dP_sorted)
    np.put_along_axis(grad, order, dP_sorted / P[:, None], axis=1)
    return np.log(P), grad


def enl_probs(utilities, scale: float = 1.0) -> np.ndarray:
    """Exponomial choice probabilities (errors ``-Exponential(scale)``).

    Closed form; agrees with ``generic_probs(V, SignedExponential(0, scale))``.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    return exponomial_probs(_check_utilities(utilities), scale)


def enl_probs_quadrature(utilities, scale: float = 1.0) -> np.ndarray:
    return generic_probs(utilities, SignedExponential(0.0, scale))


def calibrate_enl_scale(p_binary: float = 0.8808, gap: float = 2.0) -> float:
    """Scale at which a binary exponomial choice with utility gap ``gap``
    has the winner probability ``p_binary``.

    Two mirrored exponentials differ by a Laplace variable, so
    ``P = 1 - exp(-gap / s) / 2``.
    """
    if not 0.5 < p_binary < 1.0:
        raise ValueError("p_binary must lie in (0.5, 1)")
    return gap / np.log(1.0 / (2.0 * (1.0 - p_binary)))


# -- univariate (binary) models ---------------------------------------------


def bl_set_scores(utilities) -> np.ndarray:
    """Unnormalised "choose only this one" scores sigma(V_j) prod (1 - sigma(V_j'))."""
    V = _check_utilities(utilities)
    log_reject = log_expit(-V)
    log_scores = log_expit(V) - log_reject + log_reject.sum()
    return np.exp(log_scores)


def bl_set_probs(utilities) -> np.ndarray:
    V = _check_utilities(utilities)
    log_reject = log_expit(-V)
    log_scores = log_expit(V) - log_reject
    return np.exp(log_scores - logsumexp(log_scores))


@dataclass(frozen=True)
class NegConfig:
    """Corpus negative sampling for BCE and gBCE.

    ``t`` is the gBCE calibration parameter; the sampling rate is
    ``n_negatives / (pool_size - 1)``.  ``beta`` overrides the derived
    exponent when given.
    """

    n_negatives: int = 3
    t: float = 1.0
    beta: float | None = None

    def gbce_beta(self, pool_size: int) -> float:
        if self.beta is not None:
            return float(self.beta)
        if pool_size < 2:
            raise ValueError("empty negative pool")
        alpha = min(1.0, self.n_negatives / (pool_size - 1))
        return alpha * (self.t * (1.0 - 1.0 / alpha) + 1.0 / alpha)


def binary_loss_from_scores(pos: np.ndarray, neg: np.ndarray, beta: float = 1.0):
    """Mean per-interaction logistic loss and its score gradients.

    ``pos`` has shape ``(N,)``; ``neg`` ``(N, k)``.  The positive term is
    ``-beta * log sigma(pos)`` (gBCE raises the positive probability to the
    power ``beta``; ``beta = 1`` is plain BCE / BL).  Each observation
    contributes the average over its ``1 + k`` interactions.
    """
    pos = np.asarray(pos, dtype=float)
    neg = np.asarray(neg, dtype=float)
    k1 = 1 + neg.shape[1]
    per_obs = (-beta * log_expit(pos) - log_expit(-neg).sum(axis=1)) / k1
    N = pos.shape[0]
    g_pos = -beta * expit(-pos) / k1 / N
    g_neg = expit(neg) / k1 / N
    return float(per_obs.mean()), g_pos, g_neg


def sample_negatives(rng: np.random.Generator, users, positives, pools, n_negatives: int):
    """Uniform corpus negatives per positive, excluding the positive itself.

    ``pools`` maps a user id to the array of item ids that user may be
    shown.  Sampling is with replacement across the ``n_negatives`` draws.
    """
    users = np.asarray(users, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    uniq, inv = np.unique(users, return_inverse=True)
    pool_list = [np.asarray(pools(int(i))) for i in uniq]
    sizes = np.array([p.size for p in pool_list], dtype=np.int64)
    if np.any(sizes < 2):
        raise ValueError(f"empty negative pool for user {uniq[np.argmax(sizes < 2)]}")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    flat = np.concatenate(pool_list)
    size = sizes[inv]
    draw = np.floor(rng.random((users.size, n_negatives)) * (size - 1)[:, None]).astype(np.int64)
    # skip over the positive's slot so it is never drawn
    p_idx = np.empty(users.size, dtype=np.int64)
    for g, pool in enumerate(pool_list):
        rows = inv == g
        p_idx[rows] = np.searchsorted(pool, positives[rows])
    present = (p_idx < size) & (flat[offsets[inv] + np.minimum(p_idx, size - 1)] == positives)
    draw += (present[:, None] & (draw >= p_idx[:, None]))
    return flat[offsets[inv][:, None] + draw]


def binary_losses(batch, params, loss_kind: str, neg_config: NegConfig | None = None,
                  rng: np.random.Generator | None = None, pools=None) -> float:
    """Mean univariate loss of a batch of choice observations.

    BL takes the other members of each choice set as negatives; BCE and gBCE
    draw ``neg_config.n_negatives`` items per positive from ``pools`` (a
    callable user id -> item ids, default the whole corpus) using ``rng``.
    """
    from .data import as_choice_data
    from .models import batch_loss_grad

    if loss_kind not in ("BL", "BCE", "gBCE"):
        raise ValueError(f"unknown binary loss {loss_kind!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss, _ = batch_loss_grad(loss_kind, as_choice_data(batch), params, rng=rng, pools=pools,
                              neg_config=neg_config)
    return loss
