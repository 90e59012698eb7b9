"""Analytic error laws used for simulation and as quadrature oracles.

Every law exposes the same small surface: ``cdf``, ``pdf``, their logs,
``sample``, ``support`` (a bracket holding all but ``eps`` of the mass on
each side) and ``kinks`` (points where the cdf or pdf is not smooth, which
the quadrature uses as segment boundaries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class ErrorDistribution:
    """Base class; subclasses are frozen dataclasses."""

    kind = "abstract"

    def cdf(self, x):
        return np.exp(self.logcdf(x))

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def logcdf(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def logpdf(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size):  # pragma: no cover
        raise NotImplementedError

    def support(self, eps: float = 1e-12) -> tuple[float, float]:  # pragma: no cover
        raise NotImplementedError

    def kinks(self) -> tuple[float, ...]:
        return ()

    def to_dict(self) -> dict:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class Gumbel(ErrorDistribution):
    location: float = 0.0
    scale: float = 1.0

    kind = "gumbel"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"Gumbel scale must be positive, got {self.scale}")

    def logcdf(self, x):
        z = (np.asarray(x, dtype=float) - self.location) / self.scale
        return -np.exp(np.minimum(-z, 700.0))

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.location) / self.scale
        return -z - np.exp(np.minimum(-z, 700.0)) - np.log(self.scale)

    def ppf(self, q):
        return self.location - self.scale * np.log(-np.log(q))

    def sample(self, rng, size):
        return rng.gumbel(self.location, self.scale, size)

    def support(self, eps=1e-12):
        return float(self.ppf(eps)), float(self.ppf(1.0 - eps))

    def to_dict(self):
        return {"kind": self.kind, "location": self.location, "scale": self.scale}


@dataclass(frozen=True)
class SignedExponential(ErrorDistribution):
    """Mirrored exponential: ``location - Exponential(scale)``, support (-inf, location]."""

    location: float = 0.0
    scale: float = 1.0

    kind = "signed_exponential"

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"SignedExponential scale must be positive, got {self.scale}")

    def logcdf(self, x):
        z = (np.asarray(x, dtype=float) - self.location) / self.scale
        return np.minimum(z, 0.0)

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.location) / self.scale
        with np.errstate(invalid="ignore"):
            return np.where(z <= 0.0, z - np.log(self.scale), -np.inf)

    def ppf(self, q):
        return self.location + self.scale * np.log(q)

    def sample(self, rng, size):
        return self.location - rng.exponential(self.scale, size)

    def support(self, eps=1e-12):
        return float(self.ppf(eps)), float(self.location)

    def kinks(self):
        return (float(self.location),)

    def to_dict(self):
        return {"kind": self.kind, "location": self.location, "scale": self.scale}


@dataclass(frozen=True)
class GaussianMixture(ErrorDistribution):
    weights: tuple[float, ...] = (1.0 / 3.0, 2.0 / 3.0)
    means: tuple[float, ...] = (-0.75, 0.75)
    stddevs: tuple[float, ...] = (0.25, 0.25)

    kind = "gaussian_mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not (len(self.weights) == len(self.means) == len(self.stddevs)):
            raise ValueError("weights, means and stddevs must have equal length")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(np.asarray(self.stddevs) <= 0):
            raise ValueError("mixture stddevs must be positive")

    def _z(self, x):
        x = np.asarray(x, dtype=float)[..., None]
        return (x - np.asarray(self.means)) / np.asarray(self.stddevs)

    def cdf(self, x):
        # direct sum keeps the cdf monotone in floating point near 1
        return ndtr(self._z(x)) @ np.asarray(self.weights)

    def logcdf(self, x):
        return logsumexp(np.log(self.weights) + log_ndtr(self._z(x)), axis=-1)

    def logpdf(self, x):
        z = self._z(x)
        comp = np.log(self.weights) - np.log(self.stddevs) - _LOG_SQRT_2PI - 0.5 * z * z
        return logsumexp(comp, axis=-1)

    def sample(self, rng, size):
        comp = rng.choice(len(self.weights), size=size, p=np.asarray(self.weights))
        return rng.normal(np.asarray(self.means)[comp], np.asarray(self.stddevs)[comp])

    def support(self, eps=1e-12):
        q = float(ndtri(1.0 - eps))
        lo = min(m - q * s for m, s in zip(self.means, self.stddevs))
        hi = max(m + q * s for m, s in zip(self.means, self.stddevs))
        return lo, hi

    def to_dict(self):
        return {
            "kind": self.kind,
            "weights": list(self.weights),
            "means": list(self.means),
            "stddevs": list(self.stddevs),
        }


def error_law_from_dict(d: dict) -> ErrorDistribution:
    kind = d["kind"]
    if kind == Gumbel.kind:
        return Gumbel(d["location"], d["scale"])
    if kind == SignedExponential.kind:
        return SignedExponential(d["location"], d["scale"])
    if kind == GaussianMixture.kind:
        return GaussianMixture(tuple(d["weights"]), tuple(d["means"]), tuple(d["stddevs"]))
    raise ValueError(f"unknown error law kind {kind!r}")


# Error laws of the synthetic experiments, keyed by their CLI names.
EXPERIMENT_LAWS = {
    "gumbel": Gumbel(0.0, 0.75),
    "signed_exponential": SignedExponential(0.0, 0.75),
    "gaussian_mixture": GaussianMixture(),
}


def named_law(name: str) -> ErrorDistribution:
    try:
        return EXPERIMENT_LAWS[name]
    except KeyError:
        raise ValueError(
            f"unknown error law {name!r}; expected one of {sorted(EXPERIMENT_LAWS)}"
        ) from None


def normal_cdf(x):
    """Standard normal cdf (used as an approximation target)."""
    return ndtr(x)
