"""Vectorised numpy reference for the Monte-Carlo likelihood kernel.

Shapes: ``delta`` (N, C-1) utility gaps chosen-minus-competitor, ``z`` (N, K, S)
logits of the uniform draws, ``w``/``h``/``x`` (K,) derived kernel params.
"""

import numpy as np
from scipy.special import expit

from ._mc_common import correction_and_dP


def mc_probs(delta, z, w, h, x):
    """Per-sample probabilities ``P_ns``, shape (N, S)."""
    e = x[None, :, None] + h[None, :, None] * z  # (N, K, S)
    y = delta[:, None, None, :] + e[..., None]  # (N, K, S, Cm)
    F = expit((y[..., None] - x) / h) @ w  # (N, K, S, Cm)
    G = F.prod(axis=-1)
    return np.einsum("k,nks->ns", w, G)


def mc_loss_grad(delta, z, w, h, x, floor=1e-12, sign=-1.0):
    N, Cm = delta.shape
    K, S = z.shape[1], z.shape[2]
    e = x[None, :, None] + h[None, :, None] * z
    y = delta[:, None, None, :] + e[..., None]
    zz = (y[..., None] - x) / h  # (N, K, S, Cm, K)
    sig = expit(zz)
    F = sig @ w
    # leave-one-out products over competitors
    ones = np.ones(F.shape[:-1] + (1,))
    prefix = np.cumprod(np.concatenate([ones, F[..., :-1]], axis=-1), axis=-1)
    suffix = np.flip(np.cumprod(np.concatenate([ones, np.flip(F[..., 1:], axis=-1)], axis=-1), axis=-1), axis=-1)
    loo = prefix * suffix
    G = prefix[..., -1] * F[..., -1] if Cm else np.ones((N, K, S))
    P = np.einsum("k,nks->ns", w, G)

    loss, dP = correction_and_dP(P, floor, sign)  # (N,), (N, S)

    g_w = np.einsum("ns,nks->k", dP, G)
    gF = dP[:, None, :, None] * w[None, :, None, None] * loo  # (N, K, S, Cm)
    dsig = sig * (1.0 - sig)
    g_w += np.einsum("nksj,nksjm->m", gF, sig)
    wd = dsig * (w / h)  # d F / d y per kernel m
    g_x = -np.einsum("nksj,nksjm->m", gF, wd)
    g_h = -np.einsum("nksj,nksjm->m", gF, wd * zz)
    q = gF * wd.sum(axis=-1)  # dL/dy
    g_delta = q.sum(axis=(1, 2))
    g_x += q.sum(axis=(0, 2, 3))
    g_h += np.einsum("nksj,nks->k", q, z)
    return loss, P, g_delta, g_w, g_h, g_x
