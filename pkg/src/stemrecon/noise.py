"""Detector noise model and data dissimilarities.

A measured value is ``g = alpha * k + n`` with ``k ~ Poisson(z)`` electron
counts and ``n ~ Normal(mu, sigma**2)`` sensor noise.  The dissimilarity
``d(z, g)`` is the negative log-likelihood of ``g`` given the predicted mean
``z``, either exactly (series over ``k``) or through its small-``sigma``
Kullback-Leibler form ``z - g_tilde * log(z)``.

Argument order throughout is ``(z, g)``: predicted intensity first, observed
value second.  All derivatives are taken in ``z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import gammaln, logsumexp

__all__ = [
    "DomainError",
    "NoiseParams",
    "DissimilarityKind",
    "Dissimilarity",
    "pdf_mixed",
    "log_pdf_mixed",
    "diss",
    "diss_d1",
    "diss_d2",
    "diss_all",
    "effective_counts",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Raised when a predicted intensity leaves the domain ``z > 0``."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class NoiseParams:
    """Gain ``alpha``, sensor offset ``mu`` and sensor noise std ``sigma``."""

    alpha: float = 1.0
    mu: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"gain alpha must be positive, got {self.alpha}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


class DissimilarityKind(str, Enum):
    KULLBACK_LEIBLER = "kl"
    MIXED_POISSON_GAUSSIAN = "mpg"


@dataclass(frozen=True)
class Dissimilarity:
    kind: DissimilarityKind = DissimilarityKind.KULLBACK_LEIBLER
    noise: NoiseParams = field(default_factory=NoiseParams)
    truncation_tolerance: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "kind", DissimilarityKind(self.kind))
        if not 0 < self.truncation_tolerance <= 1e-6:
            raise ValueError("truncation_tolerance must lie in (0, 1e-6]")
        if self.kind is DissimilarityKind.MIXED_POISSON_GAUSSIAN and not self.noise.sigma > 0:
            raise ValueError("the mixed Poisson-Gaussian dissimilarity needs sigma > 0")

    @classmethod
    def parse(cls, name: str, noise: NoiseParams | None = None, **kw) -> "Dissimilarity":
        aliases = {"kl": "kl", "kullback-leibler": "kl", "mpg": "mpg", "mixed": "mpg"}
        kind = aliases.get(name.lower())
        if kind is None:
            raise ValueError(f"unknown dissimilarity {name!r}")
        return cls(DissimilarityKind(kind), noise or NoiseParams(), **kw)


def effective_counts(g, noise: NoiseParams):
    """``max(0, (g - mu) / alpha)``: observed value in electron counts."""
    return np.maximum(0.0, (np.asarray(g, dtype=float) - noise.mu) / noise.alpha)


def _check_positive(z):
    z = np.asarray(z, dtype=float)
    bad = ~(z > 0)
    if np.any(bad):
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise DomainError(
            f"predicted intensity must be positive, got {z.ravel()[idx]!r} at index {idx}", idx
        )
    return z


def _series_moments(z, g, noise: NoiseParams, tol: float, order: int):
    """Log of the truncated series and its first two log-derivative moments.

    Returns ``(logf, m1, m2)`` where ``m1 = f'/f`` and ``m2 = f''/f``.  Each
    summand is log-concave in ``k``, so once the window edges are below
    ``tol`` relative to the running sum and still falling, the geometric
    bound on the omitted tail holds.
    """
    z = np.atleast_1d(z).astype(float)
    g = np.atleast_1d(g).astype(float)
    z, g = np.broadcast_arrays(z, g)
    shape = z.shape
    z = z.ravel()
    g = g.ravel()
    gt = (g - noise.mu) / noise.alpha
    logf = np.empty(z.size)
    m1 = np.zeros(z.size)
    m2 = np.zeros(z.size)
    log_tol = math.log(tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _series_loop(z, g, gt, noise, log_tol, order, logf, m1, m2, shape)


def _series_loop(z, g, gt, noise, log_tol, order, logf, m1, m2, shape):
    a, mu, s = noise.alpha, noise.mu, noise.sigma
    spread = np.minimum(np.sqrt(np.maximum(z, 1.0)), s / a)
    width = np.ceil(10.0 * spread + 10.0)
    todo = np.arange(z.size)
    while todo.size:
        failed = []
        for start in range(0, todo.size, 2048):
            sel = todo[start:start + 2048]
            zs, gs, ws = z[sel], gt[sel], width[sel]
            lo = np.maximum(0.0, np.floor(np.minimum(zs, gs)) - ws)
            hi = np.maximum(lo, np.ceil(np.maximum(zs, gs)) + ws)
            n = int(np.max(hi - lo)) + 1
            k = lo[:, None] + np.arange(n)[None, :]
            valid = k <= hi[:, None]
            logt = (
                k * np.log(zs)[:, None]
                - zs[:, None]
                - gammaln(k + 1.0)
                - 0.5 * ((g[sel][:, None] - mu - a * k) / s) ** 2
                - _LOG_SQRT_2PI
                - math.log(s)
            )
            logt = np.where(valid, logt, -np.inf)
            lse = logsumexp(logt, axis=1)
            rows = np.arange(sel.size)
            last = (hi - lo).astype(int)
            ok = np.ones(sel.size, dtype=bool)
            # upper edge
            t_hi = logt[rows, last]
            t_hi_prev = logt[rows, np.maximum(last - 1, 0)]
            r = np.exp(np.minimum(t_hi - t_hi_prev, 0.0))
            ok &= (t_hi < t_hi_prev) | (last == 0)
            ok &= t_hi + np.log(r / np.maximum(1.0 - r, 1e-300)) - lse < log_tol
            # lower edge, only when the window does not start at k = 0
            t_lo = logt[:, 0]
            t_lo_next = logt[:, min(1, n - 1)]
            r = np.exp(np.minimum(t_lo - t_lo_next, 0.0))
            lower_ok = (t_lo < t_lo_next) & (
                t_lo + np.log(r / np.maximum(1.0 - r, 1e-300)) - lse < log_tol
            )
            ok &= (lo == 0) | lower_ok
            w = np.exp(logt - lse[:, None])
            logf[sel] = lse
            if order >= 1:
                aa = k / zs[:, None] - 1.0
                mm1 = np.sum(np.where(valid, w * aa, 0.0), axis=1)
                m1[sel] = mm1
                if order >= 2:
                    bb = aa * aa - k / zs[:, None] ** 2
                    m2[sel] = np.sum(np.where(valid, w * bb, 0.0), axis=1)
            failed.append(sel[~ok])
        todo = np.concatenate(failed) if failed else np.empty(0, dtype=int)
        width[todo] *= 2
    return logf.reshape(shape), m1.reshape(shape), m2.reshape(shape)


def log_pdf_mixed(g, z, noise: NoiseParams, tol: float = 1e-16):
    """Log of the mixed Poisson-Gaussian density of ``g`` given mean ``z``."""
    z = _check_positive(z)
    if not noise.sigma > 0:
        raise DomainError("the mixed density needs sigma > 0")
    logf, _, _ = _series_moments(z, g, noise, tol, order=0)
    if np.ndim(z) == 0 and np.ndim(g) == 0:
        return float(logf.ravel()[0])
    return logf


def pdf_mixed(g, z, noise: NoiseParams, tol: float = 1e-16):
    """Density ``sum_k Poisson(k; z) * Normal(g - alpha*k - mu; sigma**2)``.

    The series is truncated once the omitted tail is below ``tol`` relative
    to the accumulated sum.
    """
    return np.exp(log_pdf_mixed(g, z, noise, tol))


def _kl_parts(z, g, noise):
    z = _check_positive(z)
    gt = effective_counts(g, noise)
    return z, gt


def diss_all(d: Dissimilarity, z, g, order: int = 2):
    """Dissimilarity and its first ``order`` derivatives in ``z``, vectorized.

    Returns a tuple ``(value, d1, d2)``; entries beyond ``order`` are None.
    """
    if d.kind is DissimilarityKind.KULLBACK_LEIBLER:
        z, gt = _kl_parts(z, g, d.noise)
        value = z - gt * np.log(z)
        d1 = 1.0 - gt / z if order >= 1 else None
        d2 = gt / (z * z) if order >= 2 else None
        return value, d1, d2
    z = _check_positive(z)
    logf, m1, m2 = _series_moments(z, g, d.noise, d.truncation_tolerance, order)
    value = -logf
    d1 = -m1 if order >= 1 else None
    d2 = m1 * m1 - m2 if order >= 2 else None
    return value, d1, d2


def _scalarize(x, z, g):
    if np.ndim(z) == 0 and np.ndim(g) == 0:
        return float(np.asarray(x).ravel()[0])
    return x


def diss(d: Dissimilarity, z, g):
    """Negative log-likelihood of observing ``g`` at predicted intensity ``z``.

    The Kullback-Leibler kind drops all ``z``-independent constants.
    """
    return _scalarize(diss_all(d, z, g, order=0)[0], z, g)


def diss_d1(d: Dissimilarity, z, g):
    return _scalarize(diss_all(d, z, g, order=1)[1], z, g)


def diss_d2(d: Dissimilarity, z, g):
    return _scalarize(diss_all(d, z, g, order=2)[2], z, g)
