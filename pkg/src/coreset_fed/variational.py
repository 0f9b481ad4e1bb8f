"""Mean-field Gaussian distributions over a flat parameter vector.

Scales are stored pre-softplus (``rho``) so that gradient steps can never
produce a non-positive standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, DomainError

LOG_2PI = float(np.log(2.0 * np.pi))
MIN_SIGMA = 1e-12


def softplus(rho):
    """Numerically stable ``log(1 + exp(rho))``."""
    rho = np.asarray(rho, dtype=float)
    return np.logaddexp(0.0, rho)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_inverse(sigma):
    """Return ``rho`` such that ``softplus(rho) == sigma``."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    # log(expm1(s)) = s + log(1 - exp(-s)), stable for large s
    return sigma + np.log(-np.expm1(-sigma))


@dataclass(frozen=True)
class MeanFieldGaussian:
    """Product of independent Gaussians ``N(mu_m, softplus(rho_m)^2)``."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        rho = np.array(self.rho, dtype=float).reshape(-1)
        if mu.shape != rho.shape:
            raise DimensionError(
                f"mu has length {mu.size} but rho has length {rho.size}")
        if mu.size < 1:
            raise DimensionError("a MeanFieldGaussian needs at least one parameter")
        mu.setflags(write=False)
        rho.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "rho", rho)

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @classmethod
    def from_sigma(cls, mu, sigma) -> "MeanFieldGaussian":
        return cls(mu, softplus_inverse(sigma))

    @classmethod
    def from_flat(cls, v) -> "MeanFieldGaussian":
        """Inverse of :meth:`flat`: first half ``mu``, second half ``rho``."""
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.size % 2:
            raise DimensionError("flat variational vector must have even length")
        half = v.size // 2
        return cls(v[:half], v[half:])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])

    def __eq__(self, other):
        if not isinstance(other, MeanFieldGaussian):
            return NotImplemented
        return (np.array_equal(self.mu, other.mu)
                and np.array_equal(self.rho, other.rho))

    def __hash__(self):
        return hash((self.mu.tobytes(), self.rho.tobytes()))


def _check_same_size(q: MeanFieldGaussian, size: int, what: str):
    if q.size != size:
        raise DimensionError(f"{what} has length {size}, expected {q.size}")


def reparameterize(q: MeanFieldGaussian, g) -> np.ndarray:
    """Map standard-normal noise ``g`` to a parameter draw ``mu + sigma * g``.

    ``g`` may also be a ``(K, T)`` stack of noise vectors, in which case a
    ``(K, T)`` stack of draws is returned.
    """
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != q.size:
        raise DimensionError(f"noise has length {g.shape[-1]}, expected {q.size}")
    return q.mu + q.sigma * g


def _checked_sigma(q: MeanFieldGaussian) -> np.ndarray:
    sigma = q.sigma
    if np.any(sigma < MIN_SIGMA) or not np.all(np.isfinite(sigma)):
        raise DomainError(
            "standard deviation underflowed below 1e-12 or is not finite; "
            "the variational parameters have diverged")
    return sigma


def kl_diag_gauss(q: MeanFieldGaussian, z: MeanFieldGaussian) -> float:
    """Closed-form ``KL(q || z)`` between two mean-field Gaussians."""
    _check_same_size(q, z.size, "second distribution")
    sq = _checked_sigma(q)
    sz = _checked_sigma(z)
    ratio = (sq * sq + (q.mu - z.mu) ** 2) / (2.0 * sz * sz)
    kl = np.sum(np.log(sz) - np.log(sq) + ratio - 0.5)
    # rounding can leave tiny negative values when q and z nearly coincide
    return max(float(kl), 0.0)


def kl_diag_gauss_grad(q: MeanFieldGaussian, z: MeanFieldGaussian, wrt: str = "q"):
    """Gradient of ``KL(q || z)`` w.r.t. ``(mu, rho)`` of ``q`` or of ``z``.

    Returns a flat vector of length ``2T`` (``mu`` part then ``rho`` part).
    """
    _check_same_size(q, z.size, "second distribution")
    sq = _checked_sigma(q)
    sz = _checked_sigma(z)
    diff = q.mu - z.mu
    if wrt == "q":
        d_mu = diff / sz ** 2
        d_sigma = -1.0 / sq + sq / sz ** 2
        d_rho = d_sigma * sigmoid(q.rho)
    elif wrt == "z":
        d_mu = -diff / sz ** 2
        d_sigma = 1.0 / sz - (sq ** 2 + diff ** 2) / sz ** 3
        d_rho = d_sigma * sigmoid(z.rho)
    else:
        raise ValueError("wrt must be 'q' or 'z'")
    return np.concatenate([d_mu, d_rho])


def log_density(q: MeanFieldGaussian, theta) -> float:
    theta = np.asarray(theta, dtype=float).reshape(-1)
    _check_same_size(q, theta.size, "theta")
    sigma = q.sigma
    resid = (theta - q.mu) / sigma
    return float(np.sum(-0.5 * resid ** 2 - np.log(sigma) - 0.5 * LOG_2PI))


def blend(a: MeanFieldGaussian, b: MeanFieldGaussian, t: float) -> MeanFieldGaussian:
    """Elementwise ``(1 - t) * a + t * b`` on ``(mu, rho)``."""
    _check_same_size(a, b.size, "second distribution")
    return MeanFieldGaussian((1 - t) * a.mu + t * b.mu, (1 - t) * a.rho + t * b.rho)
