"""Fully connected networks over a flat parameter vector, and the
minibatch Monte-Carlo ELBO used for local variational training.

Parameters are laid out layer by layer; each layer stores its weight
matrix (``out x in``, row-major) followed by its bias vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .exceptions import DimensionError, DomainError
from .variational import (
    MeanFieldGaussian, kl_diag_gauss, kl_diag_gauss_grad, sigmoid,
)

ACTIVATIONS = ("relu", "tanh", "sigmoid")
LIKELIHOODS = ("gaussian", "categorical")


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    likelihood: str = "gaussian"
    sigma_eps: float = 1.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise DomainError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise DomainError(f"all layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.activation!r}")
        if self.likelihood not in LIKELIHOODS:
            raise DomainError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "gaussian" and not self.sigma_eps > 0:
            raise DomainError(f"sigma_eps must be positive, got {self.sigma_eps}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    def unpack(self, theta):
        """Split ``theta`` into a list of ``(W, b)`` views."""
        theta = np.asarray(theta, dtype=float)
        if theta.ndim != 1 or theta.size != self.n_params:
            raise DimensionError(
                f"theta has shape {theta.shape}, expected ({self.n_params},)")
        layers = []
        pos = 0
        s = self.layer_sizes
        for i in range(len(s) - 1):
            n_in, n_out = s[i], s[i + 1]
            W = theta[pos:pos + n_in * n_out].reshape(n_out, n_in)
            pos += n_in * n_out
            b = theta[pos:pos + n_out]
            pos += n_out
            layers.append((W, b))
        return layers


@dataclass
class LabeledDataset:
    """Inputs ``x`` (n x s0) with regression targets (n x out) or int labels (n,)."""

    x: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y)
        if y.dtype.kind in "iu":
            y = y.astype(np.int64).reshape(-1)
        else:
            y = y.astype(float)
            if y.ndim == 1:
                y = y[:, None]
        self.y = y
        if self.x.shape[0] < 1:
            raise DomainError("a dataset needs at least one point")
        if self.y.shape[0] != self.x.shape[0]:
            raise DimensionError(
                f"x has {self.x.shape[0]} rows but y has {self.y.shape[0]}")

    def __len__(self):
        return self.x.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.y.ndim == 1

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.x[idx], self.y[idx], dict(self.meta))

    def check_against(self, spec: NetworkSpec):
        if self.x.shape[1] != spec.input_dim:
            raise DimensionError(
                f"inputs have {self.x.shape[1]} features, network expects {spec.input_dim}")
        if spec.likelihood == "categorical":
            if not self.is_classification:
                raise DimensionError("categorical likelihood needs integer labels")
            if self.y.min() < 0 or self.y.max() >= spec.output_dim:
                raise DimensionError("labels out of range for the output layer")
        elif self.is_classification or self.y.shape[1] != spec.output_dim:
            raise DimensionError(
                f"targets must be real with {spec.output_dim} columns")


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return sigmoid(a)


def _activation_grad(name, a, h):
    # derivative of the activation given pre-activation a and output h
    if name == "relu":
        return (a > 0).astype(float)
    if name == "tanh":
        return 1.0 - h * h
    return h * (1.0 - h)


def forward_batch(spec: NetworkSpec, theta, X, return_cache=False):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.input_dim:
        raise DimensionError(
            f"inputs have {X.shape[1]} features, network expects {spec.input_dim}")
    layers = spec.unpack(theta)
    h = X
    cache = [(None, X)]
    for i, (W, b) in enumerate(layers):
        a = h @ W.T + b
        if i < len(layers) - 1:
            h = _activate(spec.activation, a)
        else:
            h = a
        cache.append((a, h))
    if return_cache:
        return h, cache
    return h


def forward(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Network output ``f_theta(x)`` for a single input vector."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return forward_batch(spec, theta, x[None, :])[0]


def _loglik_from_output(spec: NetworkSpec, out, y):
    if spec.likelihood == "gaussian":
        s2 = spec.sigma_eps ** 2
        resid = y - out
        return (-np.sum(resid ** 2, axis=1) / (2.0 * s2)
                - 0.5 * spec.output_dim * np.log(2.0 * np.pi * s2))
    logp = log_softmax(out, axis=1)
    return logp[np.arange(out.shape[0]), y]


def _loglik_output_grad(spec: NetworkSpec, out, y):
    if spec.likelihood == "gaussian":
        return (y - out) / spec.sigma_eps ** 2
    g = -softmax(out, axis=1)
    g[np.arange(out.shape[0]), y] += 1.0
    return g


def log_likelihood_batch(spec: NetworkSpec, theta, X, y) -> np.ndarray:
    """Per-point log-likelihoods ``log p_theta(y_j | x_j)``."""
    if spec.likelihood == "gaussian" and not spec.sigma_eps > 0:
        raise DomainError("sigma_eps must be positive")
    out = forward_batch(spec, theta, X)
    y = np.asarray(y)
    if spec.likelihood == "gaussian":
        y = np.asarray(y, dtype=float).reshape(out.shape)
    else:
        y = np.asarray(y, dtype=np.int64).reshape(-1)
    return _loglik_from_output(spec, out, y)


def log_likelihood(spec: NetworkSpec, theta, point) -> float:
    x, y = point
    y = np.asarray(y)
    if spec.likelihood == "gaussian":
        y = np.asarray(y, dtype=float).reshape(1, -1)
    else:
        y = y.reshape(1)
    return float(log_likelihood_batch(spec, theta, np.asarray(x, dtype=float)[None, :], y)[0])


def loglik_theta_grad(spec: NetworkSpec, theta, X, y, coef):
    """Return ``(sum_j coef_j * loglik_j, d/dtheta of the same)``."""
    out, cache = forward_batch(spec, theta, X, return_cache=True)
    ll = _loglik_from_output(spec, out, y)
    delta = _loglik_output_grad(spec, out, y) * coef[:, None]
    layers = spec.unpack(theta)
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_prev = cache[i][1]
        grads.append((delta.T @ h_prev, delta.sum(axis=0)))
        if i > 0:
            a_prev, h_prev_act = cache[i]
            delta = (delta @ W) * _activation_grad(spec.activation, a_prev, h_prev_act)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return float(np.dot(coef, ll)), flat


def _prepare_batch(spec, batch, weights):
    if isinstance(batch, LabeledDataset):
        X, y = batch.x, batch.y
    else:
        X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=float))
    b = X.shape[0]
    if b < 1:
        raise DomainError("minibatch must contain at least one point")
    if spec.likelihood == "gaussian":
        y = np.asarray(y, dtype=float).reshape(b, spec.output_dim)
    else:
        y = np.asarray(y, dtype=np.int64).reshape(b)
    if weights is None:
        w = np.ones(b)
    else:
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.size != b:
            raise DimensionError(f"got {w.size} weights for a batch of {b}")
        if np.any(w < 0):
            raise DomainError("coreset weights must be nonnegative")
    return X, y, w


def _check_noise(v, noise):
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    if noise.shape[1] != v.size or noise.shape[0] < 1:
        raise DimensionError(
            f"noise has shape {noise.shape}, expected (K, {v.size}) with K >= 1")
    return noise


def elbo_value_and_grad(spec, v: MeanFieldGaussian, z: MeanFieldGaussian, batch,
                        weights, n, zeta, noise, need_grad=True):
    """Minibatch ELBO estimate and its pathwise gradient over ``(mu, rho)``.

    The estimate is::

        -(n / b) (1 / K) sum_j sum_k w_j log p_{theta_k}(D_j) + zeta KL(v || z)

    with ``theta_k = mu + softplus(rho) * noise[k]``. The noise is held fixed,
    so the returned gradient is the exact derivative of the returned value.
    """
    X, y, w = _prepare_batch(spec, batch, weights)
    noise = _check_noise(v, noise)
    if v.size != spec.n_params:
        raise DimensionError(
            f"variational size {v.size} does not match network size {spec.n_params}")
    if not zeta >= 0:
        raise DomainError("zeta must be nonnegative")
    b = X.shape[0]
    K = noise.shape[0]
    scale = n / (b * K)
    sigma = v.sigma
    data = 0.0
    g_mu = np.zeros(v.size)
    g_rho = np.zeros(v.size)
    dsig = sigmoid(v.rho)
    for k in range(K):
        theta = v.mu + sigma * noise[k]
        if need_grad:
            ll, g_theta = loglik_theta_grad(spec, theta, X, y, w)
            g_theta = -scale * g_theta
            g_mu += g_theta
            g_rho += g_theta * noise[k] * dsig
        else:
            ll = float(np.dot(w, log_likelihood_batch(spec, theta, X, y)))
        data += ll
    value = -scale * data
    if zeta > 0:
        value += zeta * kl_diag_gauss(v, z)
    if not need_grad:
        return value, None
    grad = np.concatenate([g_mu, g_rho])
    if zeta > 0:
        grad += zeta * kl_diag_gauss_grad(v, z, wrt="q")
    return value, grad


def elbo_estimate(spec, v, z, batch, weights, n, K, zeta, noise) -> float:
    noise = _check_noise(v, noise)
    if noise.shape[0] != K:
        raise DimensionError(f"expected {K} noise vectors, got {noise.shape[0]}")
    return elbo_value_and_grad(spec, v, z, batch, weights, n, zeta, noise,
                               need_grad=False)[0]


def elbo_gradient(spec, v, z, batch, weights, n, K, zeta, noise) -> np.ndarray:
    noise = _check_noise(v, noise)
    if noise.shape[0] != K:
        raise DimensionError(f"expected {K} noise vectors, got {noise.shape[0]}")
    return elbo_value_and_grad(spec, v, z, batch, weights, n, zeta, noise)[1]


def init_variational(spec: NetworkSpec, random_state=None, rho0=-3.0) -> MeanFieldGaussian:
    """Initial ``v0``: per-layer uniform means in ``+-1/sqrt(fan_in)``, constant ``rho``."""
    rng = np.random.default_rng(random_state)
    s = spec.layer_sizes
    parts = []
    for i in range(len(s) - 1):
        bound = 1.0 / np.sqrt(s[i])
        parts.append(rng.uniform(-bound, bound, size=(s[i] + 1) * s[i + 1]))
    mu = np.concatenate(parts)
    return MeanFieldGaussian(mu, np.full(mu.size, float(rho0)))


def predict_mean(spec: NetworkSpec, v: MeanFieldGaussian, X) -> np.ndarray:
    """Network output at the variational mean."""
    return forward_batch(spec, v.mu, X)


def evaluate(spec: NetworkSpec, theta, data: LabeledDataset) -> dict:
    """Test metrics at a fixed parameter vector: ``mse`` or ``accuracy``, plus ``nll``."""
    out = forward_batch(spec, theta, data.x)
    ll = _loglik_from_output(spec, out, data.y)
    if spec.likelihood == "gaussian":
        metric = {"mse": float(np.mean(np.sum((data.y - out) ** 2, axis=1)))}
    else:
        metric = {"accuracy": float(np.mean(np.argmax(out, axis=1) == data.y))}
    metric["nll"] = float(-np.mean(ll))
    return metric
