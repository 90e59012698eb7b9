"""Sigmoid-kernel mixture cdf: the learnable error distribution.

``F(x) = sum_k w_k sigma((x - x_k) / h_k)`` with design points spread
uniformly over ``[-l, l]``.  Raw (unconstrained) parameters map to the
derived ones through

    w = softmax(alpha),   l = softplus(lambda),   h_k = (l / K) softplus(beta_k)

and the raw ``beta`` / ``lambda`` are kept inside fixed boxes by projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logit, logsumexp, softmax

_LOG_TINY = -600.0  # below this the direct mixture sum loses precision

BETA_BOUNDS = (-0.1, 5.0)
LAMBDA_BOUNDS = (0.1, 10.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def design_offsets(K: int) -> np.ndarray:
    """Design points for ``l = 1``: ``-1, ..., 1`` (a single kernel sits at 0)."""
    if K < 1:
        raise ValueError("need at least one kernel")
    if K == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, K)


@dataclass
class KernelCdfParams:
    alphas: np.ndarray
    betas: np.ndarray
    lam: float

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=float).copy()
        self.betas = np.asarray(self.betas, dtype=float).copy()
        self.lam = float(self.lam)
        if self.alphas.shape != self.betas.shape or self.alphas.ndim != 1:
            raise ValueError("alphas and betas must be 1-d arrays of equal length")

    @property
    def K(self) -> int:
        return self.alphas.size

    @classmethod
    def initial(cls, K: int = 5, scale: float = 2.0) -> "KernelCdfParams":
        return cls(np.zeros(K), np.zeros(K), float(inv_softplus(scale)))

    def copy(self) -> "KernelCdfParams":
        return KernelCdfParams(self.alphas, self.betas, self.lam)

    def project(self) -> "KernelCdfParams":
        """Clamp raw bandwidths and scale into their boxes (in place)."""
        np.clip(self.betas, *BETA_BOUNDS, out=self.betas)
        self.lam = float(np.clip(self.lam, *LAMBDA_BOUNDS))
        return self

    def to_dict(self) -> dict:
        return {"alphas": self.alphas.tolist(), "betas": self.betas.tolist(), "lambda": self.lam}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelCdfParams":
        return cls(d["alphas"], d["betas"], d["lambda"])


@dataclass
class DerivedKernels:
    """Constrained kernel parameters; also usable as an error distribution.

    ``location`` is zero for every learnable member; it only moves design
    points for :func:`construct_approximation` on asymmetric intervals.
    """

    weights: np.ndarray
    bandwidths: np.ndarray
    scale: float
    design_points: np.ndarray
    location: float = 0.0
    kind: str = field(default="kernel_mixture", repr=False)

    @property
    def K(self) -> int:
        return self.weights.size

    def _z(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return (x - self.design_points) / self.bandwidths

    def cdf(self, x):
        return expit(self._z(x)) @ self.weights

    def pdf(self, x):
        z = self._z(x)
        return (expit(z) * expit(-z)) @ (self.weights / self.bandwidths)

    def logcdf(self, x):
        z = self._z(x)
        with np.errstate(divide="ignore"):
            out = np.log(expit(z) @ self.weights)
        tiny = out < _LOG_TINY
        if np.any(tiny):
            out[tiny] = logsumexp(np.log(self.weights) + log_expit(z[tiny]), axis=-1)
        return out

    def logpdf(self, x):
        z = self._z(x)
        with np.errstate(divide="ignore"):
            out = np.log((expit(z) * expit(-z)) @ (self.weights / self.bandwidths))
        tiny = out < _LOG_TINY
        if np.any(tiny):
            zt = z[tiny]
            comp = np.log(self.weights / self.bandwidths) + log_expit(zt) + log_expit(-zt)
            out[tiny] = logsumexp(comp, axis=-1)
        return out

    def support(self, eps: float = 1e-12) -> tuple[float, float]:
        q = float(-logit(eps))
        return (
            float(np.min(self.design_points - q * self.bandwidths)),
            float(np.max(self.design_points + q * self.bandwidths)),
        )

    def kinks(self):
        return ()

    def sample(self, rng: np.random.Generator, size):
        k = rng.choice(self.K, size=size, p=self.weights)
        u = rng.random(size)
        u = np.clip(u, 1e-300, None)
        return self.design_points[k] + self.bandwidths[k] * (np.log(u) - np.log1p(-u))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "bandwidths": self.bandwidths.tolist(),
            "scale": self.scale,
            "design_points": self.design_points.tolist(),
            "location": self.location,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DerivedKernels":
        return cls(
            np.asarray(d["weights"], dtype=float),
            np.asarray(d["bandwidths"], dtype=float),
            float(d["scale"]),
            np.asarray(d["design_points"], dtype=float),
            float(d.get("location", 0.0)),
        )


def derive(raw: KernelCdfParams) -> DerivedKernels:
    K = raw.K
    scale = float(softplus(raw.lam))
    weights = softmax(raw.alphas)
    bandwidths = scale / K * softplus(raw.betas)
    return DerivedKernels(weights, bandwidths, scale, scale * design_offsets(K))


def cdf(dk: DerivedKernels, x):
    return dk.cdf(x)


def pdf(dk: DerivedKernels, x):
    return dk.pdf(x)


def sample(dk: DerivedKernels, kernel_index: int, uniform_draw):
    """Inverse-cdf draw from one sigmoid kernel; differentiable in ``x_k``, ``h_k``."""
    u = np.asarray(uniform_draw, dtype=float)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("uniform draw must lie strictly inside (0, 1)")
    return dk.design_points[kernel_index] + dk.bandwidths[kernel_index] * (np.log(u) - np.log1p(-u))


def chain_to_raw(raw: KernelCdfParams, g_w, g_h, g_x):
    """Map gradients w.r.t. ``(w, h, x)`` to gradients w.r.t. ``(alpha, beta, lambda)``."""
    K = raw.K
    w = softmax(raw.alphas)
    scale = float(softplus(raw.lam))
    sp_beta = softplus(raw.betas)
    g_alpha = w * (g_w - np.dot(w, g_w))
    g_beta = g_h * (scale / K) * expit(raw.betas)
    g_scale = np.dot(g_x, design_offsets(K)) + np.dot(g_h, sp_beta) / K
    g_lam = g_scale * float(expit(raw.lam))
    return g_alpha, g_beta, float(g_lam)


def cdf_raw_grad(raw: KernelCdfParams, x: float):
    """Gradient of ``F(x)`` w.r.t. the raw parameters."""
    dk = derive(raw)
    z = (x - dk.design_points) / dk.bandwidths
    s = expit(z)
    ds = s * (1.0 - s)
    g_w = s
    g_x = -dk.weights * ds / dk.bandwidths
    g_h = g_x * z
    return chain_to_raw(raw, g_w, g_h, g_x)


def construct_approximation(target_cdf, K: int, interval, bandwidth: float | None = None,
                            check_points: int = 2001) -> DerivedKernels:
    """Kernel mixture approximating ``target_cdf`` on ``interval``.

    Design points are spread uniformly over ``[a, b]`` and all kernels share
    one bandwidth (default: a tenth of the spacing).  Kernel ``k`` carries
    the target mass of its cell, so cumulative weights equal the target cdf
    at the cell boundaries midway between design points; the outermost
    kernels also absorb the tails.  The sup-norm error shrinks like the
    largest cell mass as ``K`` grows.
    """
    a, b = map(float, interval)
    if not b > a:
        raise ValueError("interval must have b > a")
    if K < 2:
        raise ValueError("need at least two kernels")
    grid = np.linspace(a, b, check_points)
    vals = np.asarray(target_cdf(grid), dtype=float)
    if np.any(np.diff(vals) < 0):
        raise ValueError("target cdf is not monotone on the interval")
    points = np.linspace(a, b, K)
    spacing = points[1] - points[0]
    h = spacing / 10.0 if bandwidth is None else float(bandwidth)
    bounds = 0.5 * (points[:-1] + points[1:])
    cum = np.concatenate([[0.0], np.asarray(target_cdf(bounds), dtype=float), [1.0]])
    weights = np.maximum(np.diff(cum), 1e-300)
    weights = weights / weights.sum()
    half = 0.5 * (b - a)
    return DerivedKernels(
        weights=weights,
        bandwidths=np.full(K, h),
        scale=half,
        design_points=points,
        location=0.5 * (a + b),
    )
