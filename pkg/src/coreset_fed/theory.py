"""Closed-form rate quantities for the coreset-weighted federated posterior.

These are the variational-error rate, the contraction rate, the constant
appearing in the Hellinger lower bound, the Hellinger distance between a
network and the true regression function, the drift between full-data and
coreset rates, and the minimax envelope. All constants are inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .bnn import NetworkSpec, forward_batch
from .exceptions import DomainError


@dataclass(frozen=True)
class RateParams:
    n: int = 1000
    n_k: int = 500
    L: int = 2
    T: int = 100
    M: int = 50
    s0: int = 10
    delta: float = 1.5
    delta_prime: float = 2.0
    beta_smooth: float = 2.0
    d_intrinsic: int = 1
    sigma_eps: float = 1.0
    F: float = 1.0
    zeta: float = 10.0
    C: float = 1.0
    C1: float = 1.0
    C2: float = 1.0
    C3: float = 1.0
    C_approx: float = 1.0

    def __post_init__(self):
        if self.n_k > self.n:
            raise DomainError(f"n_k={self.n_k} exceeds n={self.n}")
        if not self.delta > 1:
            raise DomainError("delta must exceed 1")
        if self.L < 0:
            raise DomainError("L must be nonnegative")
        for name in ("n", "n_k", "T", "M", "s0", "d_intrinsic"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        for name in ("sigma_eps", "F", "zeta", "C", "C1", "C2", "C3", "C_approx",
                     "beta_smooth"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")

    @classmethod
    def from_network(cls, spec: NetworkSpec, **kw) -> "RateParams":
        """Fill ``L``, ``T``, ``M`` and ``s0`` from a network architecture."""
        hidden = spec.layer_sizes[1:-1]
        return cls(L=spec.n_hidden, T=spec.n_params, M=max(hidden) if hidden else 2,
                   s0=spec.input_dim, **kw)


def r_n(p: RateParams, m) -> float:
    """Variational error rate ``((L+1) T / m) ln M + (T / m) ln(s0 sqrt(m / T))``."""
    if m < 2:
        raise DomainError(f"sample count must be >= 2, got {m}")
    if p.M < 2:
        raise DomainError("width M must be >= 2")
    m = float(m)
    return ((p.L + 1) * p.T / m) * math.log(p.M) + (p.T / m) * math.log(
        p.s0 * math.sqrt(m / p.T))


def epsilon_sq(p: RateParams, m) -> float:
    """Squared contraction rate ``r_n(m) * (ln m)^(2 delta)``."""
    if m <= 1:
        raise DomainError(f"sample count must exceed 1, got {m}")
    return r_n(p, m) * math.log(m) ** (2.0 * p.delta)


def c_f(F, sigma_eps) -> float:
    """``(1 - exp(-4F^2 / (8 sigma^2))) / (4F^2)``.

    The value lies in ``(0, min(1/(4F^2), 1/(8 sigma^2))]``.
    """
    if not (F > 0 and sigma_eps > 0):
        raise DomainError("F and sigma_eps must be positive")
    x = 4.0 * F * F
    return -math.expm1(-x / (8.0 * sigma_eps ** 2)) / x


def hellinger_sq(spec: NetworkSpec, theta, f_true: Callable, X, sigma_eps) -> float:
    """Mean over ``X`` of ``1 - exp(-||f_theta(x) - f(x)||^2 / (8 sigma^2))``."""
    if not sigma_eps > 0:
        raise DomainError("sigma_eps must be positive")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise DomainError("need at least one input sample")
    pred = forward_batch(spec, theta, X)
    return hellinger_sq_values(pred, f_true(X), sigma_eps)


def hellinger_sq_values(f_a, f_b, sigma_eps) -> float:
    """Hellinger distance between two Gaussian regressions given their outputs."""
    if not sigma_eps > 0:
        raise DomainError("sigma_eps must be positive")
    a = np.asarray(f_a, dtype=float)
    b = np.asarray(f_b, dtype=float)
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(a.shape[0], -1)
    sq = np.sum((a - b) ** 2, axis=1)
    return float(np.mean(-np.expm1(-sq / (8.0 * sigma_eps ** 2))))


def drift_check(p: RateParams, xi_n: Optional[Sequence] = None,
                xi_nk: Optional[Sequence] = None) -> dict:
    """Sign checks and value of the full-data minus coreset rate drift.

    ``xi_n`` and ``xi_nk`` are per-client approximation errors at ``n`` and
    ``n_k``; when omitted the approximation drift is excluded.
    """
    n, nk = p.n, p.n_k
    if nk >= n:
        raise DomainError(f"need n_k < n, got n_k={nk}, n={n}")
    if nk < 2:
        raise DomainError("n_k must be >= 2")
    e_n, e_nk = epsilon_sq(p, n), epsilon_sq(p, nk)
    nr_n, nr_nk = n * r_n(p, n), nk * r_n(p, nk)
    type1 = e_n - e_nk
    type2 = nr_n - nr_nk
    approx = 0.0
    if xi_n is not None or xi_nk is not None:
        a = np.asarray(xi_n if xi_n is not None else [], dtype=float)
        b = np.asarray(xi_nk if xi_nk is not None else [], dtype=float)
        if a.shape != b.shape or a.size == 0:
            raise DomainError("xi_n and xi_nk must have the same nonzero length")
        approx = p.C_approx / a.size * float(np.sum(n * a - nk * b))
    value = p.C * type1 + p.zeta * p.C1 * type2 + approx
    return {"type1_pos": bool(type1 > 0), "type2_pos": bool(type2 > 0),
            "type1_gap": type1, "type2_gap": type2, "approx_drift": approx,
            "drift_value": value}


def critical_delta(p: RateParams, hi: float = 100.0, tol: float = 1e-9) -> float:
    """Smallest ``delta`` for which ``epsilon_sq(n) > epsilon_sq(n_k)``.

    ``epsilon_sq`` decays like ``(ln m)^(2 delta + 1) / m``, so the full-data
    rate exceeds the coreset rate only when the log power is large enough.
    Returns ``inf`` if no ``delta`` below ``hi`` works.
    """
    def gap(d):
        q = replace(p, delta=d)
        return epsilon_sq(q, p.n) - epsilon_sq(q, p.n_k)

    lo = 1.0 + 1e-12
    if gap(lo) > 0:
        return lo
    if gap(hi) <= 0:
        return math.inf
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if gap(mid) > 0:
            hi = mid
        else:
            lo = mid
    return hi


def minimax_envelope(p: RateParams, n_k) -> tuple:
    """``(lower, upper)`` rate envelope at sample size ``n_k``.

    ``lower = C3 n_k^(-2b/(2b+d))`` and ``upper = C2 n_k^(-2b/(2b+d)) (ln n_k)^(2 delta')``.
    """
    if n_k < 2:
        raise DomainError("n_k must be >= 2")
    b, d = p.beta_smooth, p.d_intrinsic
    base = float(n_k) ** (-2.0 * b / (2.0 * b + d))
    lower = p.C3 * base
    upper = p.C2 * base * math.log(n_k) ** (2.0 * p.delta_prime)
    return lower, upper


DEFAULT_ARCHITECTURES = (
    {"L": 1, "T": 65, "M": 16, "s0": 2},
    {"L": 2, "T": 1441, "M": 32, "s0": 10},
    {"L": 3, "T": 335114, "M": 256, "s0": 784},
)


def theory_grid(ns=(10**2, 10**3, 10**4, 10**5, 10**6), ratio=0.5,
                architectures=DEFAULT_ARCHITECTURES, **kw) -> list:
    """Evaluate drift flags and envelopes over sizes and architectures."""
    rows = []
    for a, arch in enumerate(architectures):
        for n in ns:
            nk = max(2, int(n * ratio))
            p = RateParams(n=n, n_k=nk, **arch, **kw)
            res = drift_check(p)
            lo_nk, up_nk = minimax_envelope(p, nk)
            lo_n, up_n = minimax_envelope(p, n)
            rows.append({"arch": a, "n": n, "n_k": nk, **arch,
                         "type1_pos": res["type1_pos"], "type2_pos": res["type2_pos"],
                         "type1_gap": res["type1_gap"], "type2_gap": res["type2_gap"],
                         "drift_value": res["drift_value"],
                         "lower_nk": lo_nk, "upper_nk": up_nk, "lower_n": lo_n,
                         "upper_n": up_n, "lower_order_ok": lo_nk > lo_n})
    return rows
