"""scikit-learn style reconstructors.

``X`` holds one measurement vector per row and ``y`` one conductivity
field per row.  ``fit`` trains (or tunes) the reconstructor and
``predict`` returns reconstructed fields.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .newton import gn_lm_baseline
from .pipeline import ReconConfig, TrainConfig, _ordered_map, aa_hqsnet_reconstruct, train, variant_config
from .proxnet import ProxNetParams, init_params


def _check_model(model):
    if model is None or not hasattr(model, "linearize"):
        raise ValueError("forward_model must provide linearize(sigma, floor=None)")
    return model


def _check_dims(est, X, y=None):
    model = est.forward_model
    n_M = getattr(getattr(model, "protocol", None), "n_M", None)
    if n_M is not None and X.shape[1] != n_M:
        raise ValueError(f"X has {X.shape[1]} columns, the forward model measures {n_M}")
    if y is not None and y.shape[1] != model.n_T:
        raise ValueError(f"y has {y.shape[1]} columns, the mesh has {model.n_T} elements")


class HQSNetReconstructor(RegressorMixin, BaseEstimator):
    """Unrolled HQS reconstructor with a learned proximal network.

    Parameters
    ----------
    forward_model : object
        Provides ``linearize(sigma, floor=None) -> (F(sigma), J)`` and ``n_T``.
    variant : {"aa-hqsnet", "hqsnet", "aa_gn", "aa_lpgd"}
        Which Anderson accelerations are active.
    K, K1, K2, m1, m2, mu, beta, floor
        Unrolling hyperparameters, see :class:`~aahqsnet.pipeline.ReconConfig`.
    n_layers, width : int
        Network depth and channel count.
    init : {"passthrough", "he"}
        Weight initialisation, see :func:`~aahqsnet.proxnet.init_params`.
    init_gain : float
        Scale of the random weights for ``init="passthrough"``.
    epochs, lr, batch_size, seed, threads
        Training settings, see :class:`~aahqsnet.pipeline.TrainConfig`.
    """

    def __init__(self, forward_model=None, variant="aa-hqsnet", K=8, K1=2, K2=2, m1=2, m2=2, mu=1.0,
                 beta=1.0, floor=1e-2, n_layers=4, width=32, init="passthrough", init_gain=0.1,
                 epochs=30, lr=1e-3, batch_size=8, seed=0, threads=1):
        self.forward_model = forward_model
        self.variant = variant
        self.K = K
        self.K1 = K1
        self.K2 = K2
        self.m1 = m1
        self.m2 = m2
        self.mu = mu
        self.beta = beta
        self.floor = floor
        self.n_layers = n_layers
        self.width = width
        self.init = init
        self.init_gain = init_gain
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.threads = threads

    def recon_config(self) -> ReconConfig:
        base = ReconConfig(K=self.K, K1=self.K1, K2=self.K2, m1=self.m1, m2=self.m2, mu=self.mu,
                           beta=self.beta, floor=self.floor)
        return variant_config(self.variant, base)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed,
                           threads=self.threads)

    def initial_params(self) -> ProxNetParams:
        return init_params(self.n_layers, self.width, seed=self.seed, scheme=self.init,
                           gain=self.init_gain, step=1.0 / self.mu)

    def fit(self, X, y, init_params: ProxNetParams | None = None, callback=None):
        """Train the network on measurements ``X`` and ground truths ``y``."""
        _check_model(self.forward_model)
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        _check_dims(self, X, y)
        cfg = self.recon_config()
        p0 = self.initial_params() if init_params is None else init_params
        res = train(self.forward_model, X, y, p0, cfg, self.train_config(), callback=callback)
        self.params_ = res.params
        self.loss_curve_ = list(res.losses)
        self.n_features_in_ = X.shape[1]
        return self

    def set_fitted_params(self, params: ProxNetParams):
        """Use already trained weights, e.g. from a checkpoint."""
        self.params_ = params
        self.loss_curve_ = []
        return self

    def reconstruct(self, v):
        """Full reconstruction result of one measurement vector."""
        check_is_fitted(self, "params_")
        return aa_hqsnet_reconstruct(self.forward_model, v, self.params_, self.recon_config())

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        _check_dims(self, X)
        cfg = self.recon_config()
        rows = _ordered_map(lambda i: aa_hqsnet_reconstruct(self.forward_model, X[i], self.params_, cfg).sigma,
                            range(len(X)), self.threads)
        return np.array(rows).reshape(len(X), self.forward_model.n_T)


# λ0 and iteration counts tried by GNLMReconstructor.fit.
LM_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)
LM_ITERS = (2, 5, 10, 20)


class GNLMReconstructor(RegressorMixin, BaseEstimator):
    """Levenberg-Marquardt Gauss-Newton baseline.

    ``fit`` picks the initial damping ``lm_lambda`` and the iteration
    count with the lowest mean squared error on the training set.  Without
    ``fit`` the reconstructor can still be used through
    :meth:`set_fitted_params`.
    """

    def __init__(self, forward_model=None, lambdas=LM_LAMBDAS, iters_grid=LM_ITERS, floor=0.0,
                 sigma0=1.0, threads=1):
        self.forward_model = forward_model
        self.lambdas = lambdas
        self.iters_grid = iters_grid
        self.floor = floor
        self.sigma0 = sigma0
        self.threads = threads

    def _traces(self, X, lam, iters):
        model = self.forward_model
        s0 = np.full(model.n_T, float(self.sigma0))
        return _ordered_map(lambda i: gn_lm_baseline(s0, X[i], model.linearize, lm_lambda=lam, iters=iters,
                                                     floor=self.floor), range(len(X)), self.threads)

    def fit(self, X, y):
        _check_model(self.forward_model)
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y = y.reshape(len(y), -1)
        _check_dims(self, X, y)
        if not self.lambdas or not self.iters_grid:
            raise ValueError("lambdas and iters_grid must be non-empty")
        n_max = max(self.iters_grid)
        scores = {}
        for lam in self.lambdas:
            traces = self._traces(X, lam, n_max)
            for it in self.iters_grid:
                # accepted iterate after `it` proposals
                est = [tr.sigmas[sum(tr.accepted[:it])] for tr in traces]
                scores[(lam, it)] = float(np.mean((np.array(est) - y) ** 2))
        (lam, it), best = min(scores.items(), key=lambda kv: (kv[1], kv[0]))
        self.lm_lambda_ = lam
        self.iters_ = it
        self.grid_scores_ = scores
        self.n_features_in_ = X.shape[1]
        return self

    def set_fitted_params(self, lm_lambda: float, iters: int):
        self.lm_lambda_ = float(lm_lambda)
        self.iters_ = int(iters)
        return self

    def predict(self, X):
        check_is_fitted(self, ["lm_lambda_", "iters_"])
        X = check_array(X)
        _check_dims(self, X)
        traces = self._traces(X, self.lm_lambda_, self.iters_)
        return np.array([tr.sigma for tr in traces]).reshape(len(X), self.forward_model.n_T)
