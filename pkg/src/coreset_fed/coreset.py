"""Sparse nonnegative Bayesian coreset weights via accelerated IHT.

The coreset problem is posed as sparse regression on a Monte-Carlo
log-likelihood embedding: find ``w >= 0`` with at most ``k`` nonzeros that
minimises ``||P - Phi w||^2`` where column ``j`` of ``Phi`` holds the
centered log-likelihoods of point ``j`` under ``S`` parameter draws and
``P`` is the row sum of ``Phi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bnn import LabeledDataset, NetworkSpec, log_likelihood_batch
from .exceptions import DimensionError, DomainError
from .variational import MeanFieldGaussian, kl_diag_gauss


@dataclass(frozen=True)
class LikelihoodEmbedding:
    phi: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        target = np.asarray(self.target, dtype=float).reshape(-1)
        if target.size != phi.shape[0]:
            raise DimensionError(
                f"target has length {target.size}, phi has {phi.shape[0]} rows")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "target", target)

    @property
    def n_samples(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @classmethod
    def from_phi(cls, phi) -> "LikelihoodEmbedding":
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        return cls(phi, phi.sum(axis=1))

    def objective(self, w) -> float:
        """Quadratic coreset loss ``||P - Phi w||^2``."""
        w = _check_weights_len(self, w)
        r = self.target - self.phi @ w
        return float(r @ r)


@dataclass(frozen=True)
class CoresetWeights:
    w: np.ndarray
    k: int

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if np.any(w < 0):
            raise DomainError("coreset weights must be nonnegative")
        if np.count_nonzero(w) > self.k:
            raise DomainError(
                f"{np.count_nonzero(w)} nonzero weights exceed the budget k={self.k}")
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.w)


@dataclass
class AIHTResult:
    weights: CoresetWeights
    n_iter: int
    objective: float
    trace: list = field(default_factory=list)
    converged: bool = False


def _check_weights_len(emb, w):
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != emb.n:
        raise DimensionError(f"w has length {w.size}, embedding has {emb.n} points")
    return w


def build_embedding(spec: NetworkSpec, snapshots, data: LabeledDataset) -> LikelihoodEmbedding:
    """Centered, ``1/sqrt(S)``-scaled log-likelihood vectors for every point.

    ``snapshots`` is an ``(S, T)`` array of parameter draws from the
    weighting distribution (in practice, the current variational posterior).
    """
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=float))
    if snapshots.shape[0] < 1:
        raise DomainError("need at least one parameter snapshot")
    if data is None or len(data) == 0:
        raise DomainError("cannot embed an empty dataset")
    ll = np.stack([log_likelihood_batch(spec, th, data.x, data.y) for th in snapshots])
    return embedding_from_loglik(ll)


def embedding_from_loglik(ll) -> LikelihoodEmbedding:
    """Embedding from an ``(S, n)`` table of log-likelihoods ``ll[s, j]``."""
    ll = np.atleast_2d(np.asarray(ll, dtype=float))
    S = ll.shape[0]
    phi = (ll - ll.mean(axis=0, keepdims=True)) / np.sqrt(S)
    return LikelihoodEmbedding.from_phi(phi)


def _top_k_desc(x, k):
    # indices of the k largest entries, ties to the lowest index
    order = np.lexsort((np.arange(x.size), -x))
    return order[:k]


def project_sparse_nonneg(x, k) -> np.ndarray:
    """Euclidean projection onto ``{w >= 0, ||w||_0 <= k}``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if k <= 0:
        raise DomainError(f"sparsity budget must be positive, got k={k}")
    pos = np.where(x > 0, x, 0.0)
    out = np.zeros_like(pos)
    keep = _top_k_desc(pos, min(k, pos.size))
    out[keep] = pos[keep]
    return out


def quadratic_gradient(emb: LikelihoodEmbedding, w) -> np.ndarray:
    """Gradient ``-2 Phi^T (P - Phi w)`` of the quadratic coreset loss."""
    w = _check_weights_len(emb, w)
    return -2.0 * emb.phi.T @ (emb.target - emb.phi @ w)


def _expansion_support(grad, z_support, k):
    # k best descent coordinates outside supp(z): most negative gradient,
    # since only those can become positive after the nonnegative projection
    cand = -np.asarray(grad, dtype=float).copy()
    cand[z_support] = -np.inf
    cand[cand <= 0] = -np.inf
    order = _top_k_desc(cand, k)
    return order[np.isfinite(cand[order])]


def aiht_solve(emb: LikelihoodEmbedding, k: int, max_iter: int = 10, tol: float = 1e-6,
               w0=None, callback: Optional[Callable] = None) -> AIHTResult:
    """Accelerated iterative hard thresholding for the nonnegative coreset problem.

    Each iteration restricts the gradient to the current support plus the
    ``k`` most promising new coordinates, takes an exact line-search step,
    projects onto the nonnegative ``k``-sparse set and applies a line-searched
    momentum step. Iteration stops when ``||w_{t+1} - w_t||_inf < tol`` or
    after ``max_iter`` iterations.

    Parameters
    ----------
    emb : LikelihoodEmbedding
    k : int
        Sparsity budget, ``1 <= k <= n``.
    max_iter : int
    tol : float
    w0 : array-like, optional
        Starting point (projected onto the feasible set). Defaults to zero.
    callback : callable, optional
        Called as ``callback(t, w)`` with every iterate; used to audit the
        feasibility invariant.

    Returns
    -------
    AIHTResult
        The best iterate seen (by quadratic objective), never worse than
        the empty coreset.
    """
    n = emb.n
    if not 1 <= k <= n:
        raise DomainError(f"sparsity budget k={k} must satisfy 1 <= k <= n={n}")
    if max_iter < 1:
        raise DomainError("max_iter must be >= 1")
    phi, y = emb.phi, emb.target

    w = np.zeros(n) if w0 is None else project_sparse_nonneg(_check_weights_len(emb, w0), k)
    z = w.copy()
    best_w = np.zeros(n)
    best_f = emb.objective(best_w)
    if w0 is not None and emb.objective(w) < best_f:
        best_w, best_f = w.copy(), emb.objective(w)
    trace = []
    converged = False
    t = 0
    while t < max_iter:
        grad = quadratic_gradient(emb, z)
        z_supp = np.flatnonzero(z)
        support = np.union1d(_expansion_support(grad, z_supp, k), z_supp)
        g_restr = np.zeros(n)
        g_restr[support] = grad[support]
        phi_g = phi @ g_restr
        denom = 2.0 * (phi_g @ phi_g)
        degenerate = denom <= 0.0 or not np.isfinite(denom)
        mu = 0.0 if degenerate else (g_restr @ g_restr) / denom
        w_next = project_sparse_nonneg(z - mu * grad, k)

        d = w_next - w
        phi_d = phi @ d
        dd = phi_d @ phi_d
        tau = 0.0 if dd <= 0 else ((y - phi @ w_next) @ phi_d) / (2.0 * dd)
        z = w_next + tau * d
        step = float(np.max(np.abs(d))) if n else 0.0
        w = w_next
        t += 1

        f = emb.objective(w)
        trace.append(f)
        if callback is not None:
            callback(t, w.copy())
        if f < best_f:
            best_w, best_f = w.copy(), f
        if degenerate or step < tol:
            converged = True
            break
    return AIHTResult(CoresetWeights(best_w, k), t, best_f, trace, converged)


def combined_objective(w, q_w: MeanFieldGaussian, q: MeanFieldGaussian,
                       emb: LikelihoodEmbedding) -> dict:
    """``KL(q_w || q) + ||P - Phi w||^2`` with both terms reported."""
    wv = w.w if isinstance(w, CoresetWeights) else w
    kl = kl_diag_gauss(q_w, q)
    quad = emb.objective(wv)
    return {"value": kl + quad, "kl": kl, "quadratic": quad}


def kl_term_fd_gradient(w, support, retrain: Callable, rel_step: float = 1e-3) -> np.ndarray:
    """Central finite differences of a retrain-dependent KL term on ``support``.

    ``retrain(w)`` must return ``KL(q_w || q)`` after refitting the weighted
    local posterior for weights ``w``. Coordinates off the support get 0.
    """
    w = np.asarray(w, dtype=float)
    grad = np.zeros_like(w)
    for j in support:
        h = rel_step * max(abs(w[j]), 1.0)
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] = max(w[j] - h, 0.0)
        grad[j] = (retrain(wp) - retrain(wm)) / (wp[j] - wm[j])
    return grad


def aiht_solve_with_kl(emb: LikelihoodEmbedding, k: int, retrain: Callable,
                       max_iter: int = 10, tol: float = 1e-6, w0=None,
                       rel_step: float = 1e-3) -> AIHTResult:
    """A-IHT on the full combined objective, KL gradient by finite differences.

    Expensive: every iteration calls ``retrain`` twice per support coordinate.
    """
    n = emb.n
    if not 1 <= k <= n:
        raise DomainError(f"sparsity budget k={k} must satisfy 1 <= k <= n={n}")
    w = np.zeros(n) if w0 is None else project_sparse_nonneg(w0, k)

    def total(v):
        return emb.objective(v) + (retrain(v) if np.any(v > 0) else 0.0)

    best_w, best_f = w.copy(), total(w)
    trace = []
    t = 0
    converged = False
    while t < max_iter:
        grad = quadratic_gradient(emb, w)
        supp = np.union1d(_expansion_support(grad, np.flatnonzero(w), k), np.flatnonzero(w))
        if np.any(w > 0):
            grad = grad + kl_term_fd_gradient(w, np.flatnonzero(w), retrain, rel_step)
        g_restr = np.zeros(n)
        g_restr[supp] = grad[supp]
        phi_g = emb.phi @ g_restr
        denom = 2.0 * (phi_g @ phi_g)
        mu = 0.0 if denom <= 0 else (g_restr @ g_restr) / denom
        w_next = project_sparse_nonneg(w - mu * grad, k)
        step = float(np.max(np.abs(w_next - w)))
        w = w_next
        t += 1
        f = total(w)
        trace.append(f)
        if f < best_f:
            best_w, best_f = w.copy(), f
        if mu == 0.0 or step < tol:
            converged = True
            break
    return AIHTResult(CoresetWeights(best_w, k), t, best_f, trace, converged)
