"""Monte-Carlo choice probabilities and the bias-corrected likelihood.

For every observation and every kernel ``k`` we draw ``S`` uniforms and push
them through that kernel's inverse cdf.  The estimate

    P_ns = sum_k w_k prod_{j' != chosen} F(V_chosen + e_{nks} - V_j')

averages to the choice probability; the log of the average is corrected
for its Jensen bias with a third-order expansion.  Gradients are exact for
the fixed uniforms (reparameterised draws).

The inner loop is compiled when ``lcm4rec._mc_kernel`` is built and falls
back to numpy otherwise.  ``LCM4REC_BACKEND=numpy`` forces the fallback.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _mc_numpy
from ._mc_common import CORRECTIONS, correction_and_dP, correction_sign
from .data import ChoiceObservation, UtilityParams, as_choice_data, scatter_utility_grad
from .kernel import DerivedKernels, KernelCdfParams, chain_to_raw, derive

try:
    from . import _mc_kernel as _mc_compiled
except ImportError:  # pragma: no cover - depends on the build
    _mc_compiled = None

BACKENDS = {"numpy": _mc_numpy}
if _mc_compiled is not None:
    BACKENDS["cython"] = _mc_compiled

DEFAULT_BACKEND = os.environ.get("LCM4REC_BACKEND") or ("cython" if _mc_compiled is not None else "numpy")
if DEFAULT_BACKEND not in BACKENDS:
    raise ImportError(f"requested backend {DEFAULT_BACKEND!r} is not available; have {sorted(BACKENDS)}")

_HALF_ULP = 2.0**-54


class NonFiniteGradientError(FloatingPointError):
    pass


def get_backend(name: str | None = None):
    return BACKENDS[name or DEFAULT_BACKEND]


def draw_uniforms(seed: int, epoch: int, n_obs: int, K: int, S: int) -> np.ndarray:
    """Uniforms in the open interval (0, 1), shape ``(n_obs, K, S)``.

    Counter-based: the array is a pure function of ``(seed, epoch)``, so a
    given observation index always receives the same draws no matter how
    batches are ordered or scheduled.
    """
    bitgen = np.random.Philox(np.random.SeedSequence([int(seed), int(epoch)]))
    return np.random.Generator(bitgen).random((n_obs, K, S)) + _HALF_ULP


def to_logits(u: np.ndarray) -> np.ndarray:
    return np.log(u) - np.log1p(-u)


@dataclass
class McEstimate:
    per_sample: np.ndarray
    mean: float
    uniforms: np.ndarray


@dataclass
class GradientSet:
    d_alphas: np.ndarray
    d_betas: np.ndarray
    d_lambda: float
    d_user_embeddings: np.ndarray
    d_item_embeddings: np.ndarray
    d_item_constants: np.ndarray

    def check_finite(self):
        for name in ("d_alphas", "d_betas", "d_lambda", "d_user_embeddings",
                     "d_item_embeddings", "d_item_constants"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteGradientError(f"non-finite gradient in {name[2:]}")
        return self


def _dk_arrays(dk: DerivedKernels):
    return (
        np.ascontiguousarray(dk.weights, dtype=float),
        np.ascontiguousarray(dk.bandwidths, dtype=float),
        np.ascontiguousarray(dk.design_points + dk.location, dtype=float),
    )


def mc_probs(delta, z, dk: DerivedKernels, backend: str | None = None) -> np.ndarray:
    """Per-sample probabilities for utility gaps ``delta`` (N, C-1) and logits ``z`` (N, K, S)."""
    delta = np.ascontiguousarray(delta, dtype=float).reshape(len(z), -1)
    return get_backend(backend).mc_probs(delta, np.ascontiguousarray(z, dtype=float), *_dk_arrays(dk))


def choice_prob_mc(obs: ChoiceObservation, up: UtilityParams, dk: DerivedKernels, S: int,
                   rng: np.random.Generator, backend: str | None = None) -> McEstimate:
    if S < 1:
        raise ValueError("S must be positive")
    others = [j for j in obs.choice_set if j != obs.chosen]
    V_ch = up.utilities(obs.user, obs.chosen)
    delta = V_ch - up.utilities(np.full(len(others), obs.user), np.asarray(others, dtype=np.int64))
    u = rng.random((dk.K, S)) + _HALF_ULP
    P = mc_probs(delta[None, :], to_logits(u)[None], dk, backend)[0]
    return McEstimate(per_sample=P, mean=float(P.mean()), uniforms=u)


def nll_corrected(estimates, floor: float = 1e-12, correction: str = "debiased") -> float:
    """Summed bias-corrected NLL of a list of estimates (or an (N, S) array).

    ``correction="debiased"`` subtracts the third-order Jensen bias of
    ``-log Pbar``; ``"variance_penalty"`` adds the same terms instead.
    """
    if isinstance(estimates, np.ndarray):
        P = estimates
    else:
        P = np.array([e.per_sample for e in estimates])
    P = np.atleast_2d(np.asarray(P, dtype=float))
    loss, _ = correction_and_dP(P, floor, correction_sign(correction))
    return float(loss.sum())


def nll_uncorrected(estimates, floor: float = 1e-12) -> float:
    if isinstance(estimates, np.ndarray):
        P = estimates
    else:
        P = np.array([e.per_sample for e in estimates])
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return float(-np.log(np.maximum(P.mean(axis=1), floor)).sum())


def _run_chunks(fn, delta, z, arrays, n_jobs):
    """Evaluate ``fn`` on row chunks and reduce in chunk order."""
    N = delta.shape[0]
    if n_jobs <= 1 or N < 2 * n_jobs:
        return fn(delta, z, *arrays)
    bounds = np.linspace(0, N, n_jobs + 1).astype(int)
    pieces = [(np.ascontiguousarray(delta[a:b]), np.ascontiguousarray(z[a:b]))
              for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        results = list(ex.map(lambda p: fn(p[0], p[1], *arrays), pieces))
    loss = np.concatenate([r[0] for r in results])
    P = np.concatenate([r[1] for r in results])
    g_delta = np.concatenate([r[2] for r in results])
    g_w, g_h, g_x = (sum(r[i] for r in results) for i in (3, 4, 5))
    return loss, P, g_delta, g_w, g_h, g_x


def loss_and_gradients(batch, up: UtilityParams, raw: KernelCdfParams, S: int | None = None,
                       rng: np.random.Generator | None = None, uniforms: np.ndarray | None = None,
                       n_jobs: int = 1, backend: str | None = None, reduction: str = "sum",
                       floor: float = 1e-12, correction: str = "debiased"):
    """Corrected NLL of ``batch`` and its gradient w.r.t. every parameter.

    Draws come from ``uniforms`` (shape ``(len(batch), K, S)``, aligned with
    the batch order) or, if absent, from ``rng``.  The same draws feed the
    value and the gradient.  ``reduction="mean"`` divides both by the batch
    size.  ``correction`` is as in :func:`nll_corrected`.
    """
    data = as_choice_data(batch)
    N = len(data)
    if N == 0:
        raise ValueError("empty batch")
    K = raw.K
    if uniforms is None:
        if S is None or rng is None:
            raise ValueError("pass either uniforms or both S and rng")
        uniforms = rng.random((N, K, S)) + _HALF_ULP
    uniforms = np.asarray(uniforms, dtype=float)
    if uniforms.shape[:2] != (N, K):
        raise ValueError(f"uniforms must have shape ({N}, {K}, S), got {uniforms.shape}")
    dk = derive(raw)
    arrays = _dk_arrays(dk)
    fn = get_backend(backend).mc_loss_grad
    sign = correction_sign(correction)

    d_user = np.zeros_like(up.user_embeddings)
    d_item = np.zeros_like(up.item_embeddings)
    d_const = np.zeros_like(up.item_constants)
    g_w = np.zeros(K)
    g_h = np.zeros(K)
    g_x = np.zeros(K)
    total = 0.0
    for g in data.groups():
        up.check_ids(g.users, g.items)
        U = up.user_embeddings[g.users]  # (n, m)
        Vi = up.item_embeddings[g.items]  # (n, C, m)
        V = np.einsum("nd,ncd->nc", U, Vi) + up.item_constants[g.items]
        delta = np.ascontiguousarray(V[:, :1] - V[:, 1:])
        z = np.ascontiguousarray(to_logits(uniforms[g.order]))
        loss, _, gd, gw, gh, gx = _run_chunks(lambda *a: fn(*a, floor, sign), delta, z, arrays, n_jobs)
        total += float(loss.sum())
        g_w += gw
        g_h += gh
        g_x += gx
        gV = np.concatenate([gd.sum(axis=1, keepdims=True), -gd], axis=1)  # (n, C)
        du, di, dc = scatter_utility_grad(up, g.users, g.items, gV)
        d_user += du
        d_item += di
        d_const += dc

    g_alpha, g_beta, g_lam = chain_to_raw(raw, g_w, g_h, g_x)
    grads = GradientSet(g_alpha, g_beta, g_lam, d_user, d_item, d_const)
    if reduction == "mean":
        total /= N
        for name in ("d_alphas", "d_betas", "d_user_embeddings", "d_item_embeddings", "d_item_constants"):
            setattr(grads, name, getattr(grads, name) / N)
        grads.d_lambda /= N
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total, grads.check_finite()
