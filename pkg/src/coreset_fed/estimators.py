"""scikit-learn compatible wrappers around the core routines."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .baselines import OBJECTIVES, SimilarityKernel, greedy_maximize, random_subset
from .bnn import (
    LabeledDataset, NetworkSpec, elbo_value_and_grad, forward_batch, init_variational,
)
from .coreset import LikelihoodEmbedding, aiht_solve
from .exceptions import DomainError
from .federated import ClientState, FedConfig, Optimizer, run_federated
from .variational import MeanFieldGaussian, reparameterize


def _prior(size, prior_sigma):
    return MeanFieldGaussian.from_sigma(np.zeros(size), np.full(size, float(prior_sigma)))


class _BayesianMLPBase(BaseEstimator):
    def _spec(self, n_in, n_out):
        raise NotImplementedError

    def _fit_data(self, X, y, sample_weight, n_out):
        spec = self._spec(X.shape[1], n_out)
        data = LabeledDataset(X, y)
        data.check_against(spec)
        rng = np.random.default_rng(self.random_state)
        v = init_variational(spec, rng, rho0=self.rho0)
        z = _prior(spec.n_params, self.prior_sigma)
        n = len(data)
        w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, float)
        if w.shape != (n,) or np.any(w < 0):
            raise DomainError("sample_weight must be a nonnegative vector of length n")
        b = min(self.batch_size, n)
        opt = Optimizer(self.optimizer, self.learning_rate)
        self.loss_curve_ = []
        for _ in range(self.n_iter):
            idx = rng.choice(n, size=b, replace=False)
            noise = rng.standard_normal((self.mc_samples, spec.n_params))
            val, g = elbo_value_and_grad(spec, v, z, (data.x[idx], data.y[idx]), w[idx],
                                         n, self.kl_weight, noise)
            v = opt.step(v, g)
            self.loss_curve_.append(val)
        self.spec_ = spec
        self.posterior_ = v
        self.n_features_in_ = X.shape[1]
        return self

    def sample_outputs(self, X, n_samples=100, random_state=None):
        """Network outputs under ``n_samples`` posterior draws, ``(n_samples, n, out)``."""
        check_is_fitted(self, "posterior_")
        X = check_array(X)
        rng = np.random.default_rng(random_state)
        thetas = reparameterize(self.posterior_,
                                rng.standard_normal((n_samples, self.posterior_.size)))
        return np.stack([forward_batch(self.spec_, th, X) for th in thetas])


class BayesianMLPRegressor(RegressorMixin, _BayesianMLPBase):
    """Mean-field variational MLP regressor with a Gaussian likelihood.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
    activation : {"tanh", "relu", "sigmoid"}
    sigma_eps : float
        Observation noise scale of the likelihood.
    prior_sigma : float
        Scale of the zero-mean Gaussian prior.
    kl_weight : float
        Multiplier on the KL term of the objective.
    n_iter, batch_size, learning_rate, optimizer, mc_samples, rho0, random_state
        Optimisation settings.
    """

    def __init__(self, hidden_layer_sizes=(16,), activation="tanh", sigma_eps=0.3,
                 prior_sigma=1.0, kl_weight=1.0, n_iter=2000, batch_size=100,
                 learning_rate=3e-3, optimizer="adam", mc_samples=1, rho0=-3.0,
                 random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.sigma_eps = sigma_eps
        self.prior_sigma = prior_sigma
        self.kl_weight = kl_weight
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.mc_samples = mc_samples
        self.rho0 = rho0
        self.random_state = random_state

    def _spec(self, n_in, n_out):
        return NetworkSpec((n_in, *self.hidden_layer_sizes, n_out), self.activation,
                           "gaussian", self.sigma_eps)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = np.asarray(y, dtype=float)
        self._single_output = y.ndim == 1
        y2 = y[:, None] if y.ndim == 1 else y
        return self._fit_data(X, y2, sample_weight, y2.shape[1])

    def predict(self, X, return_std=False, n_samples=100):
        check_is_fitted(self, "posterior_")
        X = check_array(X)
        mean = forward_batch(self.spec_, self.posterior_.mu, X)
        if return_std:
            outs = self.sample_outputs(X, n_samples, self.random_state)
            std = np.sqrt(outs.var(axis=0) + self.sigma_eps ** 2)
            if self._single_output:
                return mean[:, 0], std[:, 0]
            return mean, std
        return mean[:, 0] if self._single_output else mean


class BayesianMLPClassifier(ClassifierMixin, _BayesianMLPBase):
    """Mean-field variational MLP classifier with a softmax likelihood."""

    def __init__(self, hidden_layer_sizes=(32,), activation="tanh", prior_sigma=1.0,
                 kl_weight=1.0, n_iter=2000, batch_size=100, learning_rate=3e-3,
                 optimizer="adam", mc_samples=1, rho0=-3.0, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.prior_sigma = prior_sigma
        self.kl_weight = kl_weight
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.mc_samples = mc_samples
        self.rho0 = rho0
        self.random_state = random_state

    def _spec(self, n_in, n_out):
        return NetworkSpec((n_in, *self.hidden_layer_sizes, n_out), self.activation,
                           "categorical")

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        return self._fit_data(X, codes.astype(np.int64), sample_weight, self.classes_.size)

    def predict_proba(self, X, n_samples=0):
        """Class probabilities at the posterior mean, or averaged over draws."""
        check_is_fitted(self, "posterior_")
        X = check_array(X)
        if n_samples:
            logits = self.sample_outputs(X, n_samples, self.random_state)
        else:
            logits = forward_batch(self.spec_, self.posterior_.mu, X)[None]
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return p.mean(axis=0)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class AIHTCoreset(BaseEstimator):
    """Sparse nonnegative coreset weights for a log-likelihood embedding.

    ``fit(X)`` takes the ``(S, n)`` embedding matrix; the target is its row
    sum unless ``y`` is given. Fitted attributes: ``weights_``,
    ``support_``, ``objective_``, ``n_iter_``.
    """

    def __init__(self, k=None, k_fraction=0.5, max_iter=10, tol=1e-6):
        self.k = k
        self.k_fraction = k_fraction
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        X = check_array(X)
        emb = (LikelihoodEmbedding.from_phi(X) if y is None
               else LikelihoodEmbedding(X, np.asarray(y, dtype=float)))
        k = self.k if self.k is not None else max(1, int(round(self.k_fraction * emb.n)))
        res = aiht_solve(emb, k, max_iter=self.max_iter, tol=self.tol)
        self.weights_ = res.weights.w
        self.support_ = res.weights.support
        self.objective_ = res.objective
        self.n_iter_ = res.n_iter
        self.trace_ = res.trace
        return self

    def score(self, X, y=None):
        """Negative quadratic coreset loss of the fitted weights on ``X``."""
        check_is_fitted(self, "weights_")
        X = check_array(X)
        emb = (LikelihoodEmbedding.from_phi(X) if y is None
               else LikelihoodEmbedding(X, np.asarray(y, dtype=float)))
        return -emb.objective(self.weights_)


class SubsetSelector(TransformerMixin, BaseEstimator):
    """Pick ``k`` rows by a diversity objective (or uniformly at random).

    ``method`` is ``random``, ``logdet``, ``disparity_sum`` or
    ``disparity_min``. ``transform`` returns the selected rows of the
    training data when called on it; ``fit_resample`` returns ``(X, y)``
    restricted to the selection.
    """

    def __init__(self, method="logdet", k_fraction=0.5, k=None, random_state=0):
        self.method = method
        self.k_fraction = k_fraction
        self.k = k
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        n = X.shape[0]
        k = self.k if self.k is not None else max(1, int(round(self.k_fraction * n)))
        if self.method == "random":
            idx = random_subset(n, k, self.random_state)
        elif self.method in OBJECTIVES:
            idx = greedy_maximize(self.method, SimilarityKernel.from_points(X), k)
        else:
            raise DomainError(f"unknown selection method {self.method!r}")
        self.indices_ = np.asarray(idx, dtype=np.int64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "indices_")
        return check_array(X)[self.indices_]

    def fit_resample(self, X, y):
        X, y = check_X_y(X, y, multi_output=True)
        self.fit(X)
        return X[self.indices_], y[self.indices_]


class FederatedCoresetRegressor(RegressorMixin, BaseEstimator):
    """Federated variational regression; ``groups`` assigns rows to clients.

    ``mode`` is ``coreset``, ``full`` or ``random_subset``. After ``fit``
    the global posterior is in ``posterior_`` and each client's personal
    posterior in ``personal_posteriors_``.
    """

    def __init__(self, hidden_layer_sizes=(16,), activation="tanh", sigma_eps=0.3,
                 mode="coreset", rounds=50, local_rounds=20, k_fraction=0.5, zeta=10.0,
                 eta=3e-3, optimizer="adam", batch_size=100, aiht_max_iter=50,
                 random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.sigma_eps = sigma_eps
        self.mode = mode
        self.rounds = rounds
        self.local_rounds = local_rounds
        self.k_fraction = k_fraction
        self.zeta = zeta
        self.eta = eta
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.aiht_max_iter = aiht_max_iter
        self.random_state = random_state

    def fit(self, X, y, groups):
        X, y = check_X_y(X, y, y_numeric=True)
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise DomainError("groups must have one entry per row")
        spec = NetworkSpec((X.shape[1], *self.hidden_layer_sizes, 1), self.activation,
                           "gaussian", self.sigma_eps)
        self.groups_ = np.unique(groups)
        clients = [ClientState(i, LabeledDataset(X[groups == g], y[groups == g].astype(float)))
                   for i, g in enumerate(self.groups_)]
        cfg = FedConfig(rounds=self.rounds, local_rounds=self.local_rounds,
                        k_fraction=self.k_fraction, zeta=self.zeta, eta1=self.eta,
                        eta2=self.eta, optimizer=self.optimizer, batch_size=self.batch_size,
                        aiht_max_iter=self.aiht_max_iter, seed=int(self.random_state or 0))
        trace, server, clients = run_federated(spec, clients, cfg, mode=self.mode)
        self.spec_ = spec
        self.posterior_ = server.v_global
        self.personal_posteriors_ = {g: c.v_local for g, c in zip(self.groups_, clients)}
        self.coreset_weights_ = {g: (None if c.weights is None else c.weights.w)
                                 for g, c in zip(self.groups_, clients)}
        self.trace_ = trace
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, group=None):
        """Global-model predictions, or the personal model of ``group``."""
        check_is_fitted(self, "posterior_")
        X = check_array(X)
        v = self.posterior_ if group is None else self.personal_posteriors_[group]
        return forward_batch(self.spec_, v.mu, X)[:, 0]
