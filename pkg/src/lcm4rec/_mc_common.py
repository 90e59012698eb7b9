"""Bias-corrected log-likelihood shared by both kernel backends."""

import logging

import numpy as np

log = logging.getLogger(__name__)


CORRECTIONS = {"debiased": -1.0, "variance_penalty": 1.0}


def correction_sign(correction: str) -> float:
    try:
        return CORRECTIONS[correction]
    except KeyError:
        raise ValueError(f"unknown correction {correction!r}; expected one of {sorted(CORRECTIONS)}") from None


def correction_and_dP(P, floor=1e-12, sign=-1.0):
    """Per-observation corrected NLL and its derivative w.r.t. each ``P_ns``.

    ``P`` has shape (N, S) with ``S >= 3``.  The NLL is

        -log Pbar + sign * (M2 / (2 S (S-1) Pbar^2) - M3 / (3 S (S-1) (S-2) Pbar^3))

    where ``M2``, ``M3`` are the summed squared and cubed deviations from
    ``Pbar``.  Since ``E[-log Pbar] ~ -log P + Var(Pbar) / (2 P^2) - ...``,
    ``sign = -1`` removes the Jensen bias to third order; ``sign = +1`` adds
    it again, acting as a variance penalty.  Observations whose mean falls
    below ``floor`` are clamped and receive zero gradient.
    """
    N, S = P.shape
    if S < 3:
        raise ValueError(f"the corrected likelihood needs S >= 3 samples, got S={S}")
    Pbar = P.mean(axis=1)
    floored = Pbar < floor
    if np.any(floored):
        log.warning("%d choice probabilities below %.0e were floored", int(floored.sum()), floor)
    Pb = np.where(floored, floor, Pbar)
    d = P - Pbar[:, None]
    M2 = (d * d).sum(axis=1)
    M3 = (d * d * d).sum(axis=1)
    c2 = sign / (2.0 * S * (S - 1))
    c3 = sign / (3.0 * S * (S - 1) * (S - 2))
    loss = -np.log(Pb) + c2 * M2 / Pb**2 - c3 * M3 / Pb**3
    dP = (
        -1.0 / (S * Pb)[:, None]
        + c2 * (2.0 * d / Pb[:, None] ** 2 - 2.0 * (M2 / (S * Pb**3))[:, None])
        - c3 * ((3.0 * d * d - 3.0 * (M2 / S)[:, None]) / Pb[:, None] ** 3 - 3.0 * (M3 / (S * Pb**4))[:, None])
    )
    dP[floored] = 0.0
    return loss, dP
