"""Per-model losses, gradients and choice-probability rules.

Choice models (LCM4Rec, MNL, ENL) score a choice against its whole set;
univariate models (BL, BCE, gBCE) score each shown item on its own and only
become set probabilities through the "choose this one, reject the rest"
rule.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_expit, log_softmax, softmax

from . import mc
from .choice import NegConfig, binary_loss_from_scores, exponomial_logprob_grad, exponomial_probs, sample_negatives
from .data import ChoiceData, UtilityParams, scatter_utility_grad
from .kernel import KernelCdfParams, derive
from .quadrature import choice_probs, fixed_grid_set_probs

CHOICE_KINDS = ("LCM4Rec", "MNL", "ENL")
BINARY_KINDS = ("BL", "BCE", "gBCE")
MODEL_KINDS = CHOICE_KINDS + BINARY_KINDS

ENL_SCALE = 1.0


def check_kind(kind: str) -> str:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return kind


def _group_utilities(up: UtilityParams, g):
    return up.utilities(g.users[:, None], g.items)


def batch_loss_grad(kind: str, data: ChoiceData, up: UtilityParams, raw: KernelCdfParams | None = None,
                    uniforms: np.ndarray | None = None, rng: np.random.Generator | None = None,
                    pools=None, neg_config: NegConfig | None = None, backend: str | None = None,
                    correction: str = "debiased"):
    """Mean training loss over ``data`` and gradients keyed by parameter name."""
    N = len(data)
    if kind == "LCM4Rec":
        loss, gs = mc.loss_and_gradients(data, up, raw, uniforms=uniforms, backend=backend, reduction="mean",
                                          correction=correction)
        grads = {
            "user": gs.d_user_embeddings,
            "item": gs.d_item_embeddings,
            "const": gs.d_item_constants,
            "alpha": gs.d_alphas,
            "beta": gs.d_betas,
            "lam": np.asarray(gs.d_lambda),
        }
        return loss, grads

    d_user = np.zeros_like(up.user_embeddings)
    d_item = np.zeros_like(up.item_embeddings)
    d_const = np.zeros_like(up.item_constants)
    total = 0.0
    for g in data.groups():
        n = len(g.order)
        if kind in ("MNL", "ENL", "BL"):
            items = g.items
            V = _group_utilities(up, g)
            if kind == "MNL":
                logp = log_softmax(V, axis=1)
                loss_sum = -logp[:, 0].sum()
                gV = softmax(V, axis=1)
                gV[:, 0] -= 1.0
                gV /= N
            elif kind == "ENL":
                logp0, grad = exponomial_logprob_grad(V, np.zeros(n, dtype=np.int64), ENL_SCALE)
                loss_sum = -logp0.sum()
                gV = -grad / N
            else:
                loss_mean, g_pos, g_neg = binary_loss_from_scores(V[:, 0], V[:, 1:])
                loss_sum = loss_mean * n
                gV = np.concatenate([g_pos[:, None], g_neg], axis=1) * n / N
        else:  # BCE / gBCE: corpus negatives
            cfg = neg_config or NegConfig()
            if pools is None:
                all_items = np.arange(up.n_items)
                pools = lambda i: all_items  # noqa: E731
            neg = sample_negatives(rng, g.users, g.items[:, 0], pools, cfg.n_negatives)
            items = np.concatenate([g.items[:, :1], neg], axis=1)
            V = up.utilities(g.users[:, None], items)
            if kind == "BCE":
                beta = 1.0
            else:
                beta = np.array([cfg.gbce_beta(pools(int(i)).size) for i in g.users])
            loss_mean, g_pos, g_neg = binary_loss_from_scores(V[:, 0], V[:, 1:], beta)
            loss_sum = loss_mean * n
            gV = np.concatenate([g_pos[:, None], g_neg], axis=1) * n / N
        total += loss_sum
        du, di, dc = scatter_utility_grad(up, g.users, items, gV)
        d_user += du
        d_item += di
        d_const += dc
    return total / N, {"user": d_user, "item": d_item, "const": d_const}


def set_probs(kind: str, V: np.ndarray, raw: KernelCdfParams | None = None, n_grid: int = 801,
              chunk: int = 256) -> np.ndarray:
    """Choice probabilities over each row of utilities ``V`` (N, C)."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if kind == "MNL":
        return softmax(V, axis=1)
    if kind == "ENL":
        return exponomial_probs(V, ENL_SCALE)
    if kind in BINARY_KINDS:
        log_reject = log_expit(-V)
        log_scores = log_expit(V) - log_reject + log_reject.sum(axis=1, keepdims=True)
        return softmax(log_scores, axis=1)
    if kind == "LCM4Rec":
        dk = derive(raw)
        out = np.empty_like(V)
        for s in range(0, V.shape[0], chunk):
            out[s:s + chunk] = fixed_grid_set_probs(V[s:s + chunk], dk, n_grid=n_grid)
        return out
    raise ValueError(f"unknown model kind {kind!r}")


def corpus_probs(kind: str, V: np.ndarray, raw: KernelCdfParams | None = None) -> np.ndarray:
    """Choice distribution over a whole corpus treated as one big choice set."""
    V = np.asarray(V, dtype=float)
    if kind == "LCM4Rec":
        return choice_probs(V, derive(raw))
    return set_probs(kind, V[None, :], raw)[0]


def data_set_probs(kind: str, data: ChoiceData, up: UtilityParams, raw=None):
    """Per-group ``(group, probs)`` in the original choice-set column order."""
    out = []
    for g in data.groups():
        V = up.utilities(g.users[:, None], g.original_items)
        out.append((g, set_probs(kind, V, raw)))
    return out


def mean_nll(kind: str, data: ChoiceData, up: UtilityParams, raw=None, floor: float = 1e-12) -> float:
    total = 0.0
    for g, P in data_set_probs(kind, data, up, raw):
        p = P[np.arange(len(g.order)), g.chosen_pos]
        total += -np.log(np.maximum(p, floor)).sum()
    return total / len(data)
