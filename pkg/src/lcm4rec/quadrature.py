"""Choice probabilities under IID errors by direct numerical integration.

With ``t = V_j + e`` the probability of choosing ``j`` is

    P_j = \\int rho(t - V_j) prod_{j' != j} F(t - V_j') dt,

so all alternatives share one ``t`` grid and the product is obtained from
the full log-product ``H(t) = sum_j log F(t - V_j)`` minus the own term.
The grid is split at every kink of the law (shifted by each utility) and
each smooth piece is integrated with the composite trapezoid rule, doubling
the resolution until successive estimates agree.
"""

from __future__ import annotations

import numpy as np

# keeps H(t) - log F_j(t) finite where some F_j underflows
_LOG_FLOOR = -700.0
_MAX_CELLS = 4_000_000
_NUDGE = 1e-10


class IntegrationError(RuntimeError):
    """Raised when the quadrature cannot reach the requested accuracy."""


def _grid(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and trapezoid weights for ``n`` intervals on every segment.

    Segment end nodes sit a hair inside the segment so a density that jumps
    at a kink contributes its one-sided limit on each side.
    """
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        t = np.linspace(a, b, n + 1)
        nudge = _NUDGE * (b - a)
        t[0] += nudge
        t[-1] -= nudge
        w = np.full(n + 1, (b - a) / n)
        w[0] *= 0.5
        w[-1] *= 0.5
        nodes.append(t)
        weights.append(w)
    return np.concatenate(nodes), np.concatenate(weights)


def _integrate(V: np.ndarray, dist, t: np.ndarray, wt: np.ndarray) -> np.ndarray:
    J = V.shape[0]
    chunk = max(1, _MAX_CELLS // max(t.size, 1))
    H = np.zeros_like(t)
    for s in range(0, J, chunk):
        H += np.maximum(dist.logcdf(t[None, :] - V[s : s + chunk, None]), _LOG_FLOOR).sum(axis=0)
    out = np.empty(J)
    for s in range(0, J, chunk):
        x = t[None, :] - V[s : s + chunk, None]
        logF = np.maximum(dist.logcdf(x), _LOG_FLOOR)
        integrand = np.exp(dist.logpdf(x) + H[None, :] - logF)
        out[s : s + chunk] = integrand @ wt
    return out


def choice_probs(
    utilities,
    dist,
    tol: float = 1e-7,
    tail_eps: float = 1e-12,
    residual_tol: float = 1e-6,
    n_start: int = 32,
    n_max: int = 2**14,
) -> np.ndarray:
    """Choice probabilities of every alternative for the law ``dist``.

    ``dist`` needs ``logcdf``, ``logpdf``, ``support`` and ``kinks``.
    Raises :class:`IntegrationError` when the refinement does not converge
    or when the probabilities miss unit mass by more than ``residual_tol``.
    """
    V = np.asarray(utilities, dtype=float)
    if V.ndim != 1 or V.size < 1 or not np.all(np.isfinite(V)):
        raise ValueError("utilities must be a finite 1-d array")
    lo, hi = dist.support(tail_eps)
    a, b = V.min() + lo, V.max() + hi
    edges = {a, b}
    for k in dist.kinks():
        edges.update(float(x) for x in V + k if a < x < b)
    edges = np.array(sorted(edges))

    # Richardson-extrapolated trapezoid (Simpson) estimates on successive
    # halvings; each segment is smooth, so the error falls at fourth order
    n = n_start
    trap = _integrate(V, dist, *_grid(edges, n))
    prev = None
    while True:
        n *= 2
        finer = _integrate(V, dist, *_grid(edges, n))
        cur = (4.0 * finer - trap) / 3.0
        trap = finer
        if prev is not None and np.max(np.abs(cur - prev)) < tol:
            break
        if n >= n_max:
            change = np.inf if prev is None else np.max(np.abs(cur - prev))
            raise IntegrationError(f"quadrature did not converge: change {change:.3g} at n={n}")
        prev = cur
    total = cur.sum()
    if abs(total - 1.0) > residual_tol:
        raise IntegrationError(f"choice probabilities sum to {total:.9f}; grid misses mass")
    return cur / total


def fixed_grid_set_probs(Vsets: np.ndarray, dist, n_grid: int = 801, tail_eps: float = 1e-12):
    """Vectorised quadrature for many equal-size sets of a *smooth* law.

    One uniform trapezoid grid per row; no kink handling, so only use it for
    laws with smooth cdf and pdf (the kernel mixture, Gumbel, Gaussian
    mixture).  Returns an array shaped like ``Vsets``.
    """
    Vsets = np.asarray(Vsets, dtype=float)
    lo, hi = dist.support(tail_eps)
    a = Vsets.min(axis=1) + lo
    b = Vsets.max(axis=1) + hi
    frac = np.linspace(0.0, 1.0, n_grid)
    t = a[:, None] + (b - a)[:, None] * frac[None, :]  # (N, G)
    wt = np.full(n_grid, 1.0 / (n_grid - 1))
    wt[0] *= 0.5
    wt[-1] *= 0.5
    x = t[:, None, :] - Vsets[:, :, None]  # (N, C, G)
    logF = np.maximum(dist.logcdf(x), _LOG_FLOOR)
    H = logF.sum(axis=1, keepdims=True)
    integrand = np.exp(dist.logpdf(x) + H - logF)
    P = (integrand @ wt) * (b - a)[:, None]
    return P / P.sum(axis=1, keepdims=True)
