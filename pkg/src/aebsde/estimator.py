"""scikit-learn style front end for the deep BSDE solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError
from .market import CorrelationRoot, ModelSpec, PathBatch, build_correlation_root
from .solver import RolloutConfig, compute_hedge_positions, make_network, rollout, train


def check_model(model) -> ModelSpec:
    if not isinstance(model, ModelSpec):
        raise TypeError(f"expected a ModelSpec, got {type(model).__name__}")
    if np.any(model.sigma <= 0):
        raise ConfigurationError("the solver needs strictly positive volatilities")
    return model


def check_price_paths(X, model: ModelSpec, root: CorrelationRoot, n_time: int) -> PathBatch:
    """Validate physical-measure price paths ``[n, d, n_time + 1]`` and recover their Brownian increments.

    The paths are assumed to follow the exact log-normal scheme, so
    ``rho dW = (log(X_{t+h} / X_t) - (mu - sigma^2 / 2) h) / sigma``.
    """
    if isinstance(X, PathBatch):
        if X.n_time != n_time or X.X.shape[1] != model.d:
            raise ValueError(f"path batch has shape {X.X.shape}, expected [n, {model.d}, {n_time + 1}]")
        return X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (model.d, n_time + 1):
        raise ValueError(f"X must have shape [n_paths, {model.d}, {n_time + 1}], got {X.shape}")
    if not np.all(np.isfinite(X)) or np.any(X <= 0):
        raise ValueError("price paths must be finite and strictly positive")
    h = model.T / n_time
    log_inc = np.diff(np.log(X), axis=2)
    shocks = (log_inc - ((model.mu - 0.5 * model.sigma**2) * h)[None, :, None]) / model.sigma[None, :, None]
    dW = root.rho_inv @ shocks
    return PathBatch(dt=h, dW=dW, X=X, measure="physical")


class DeepBSDESolver(BaseEstimator):
    """Deep BSDE solver with an optional asymptotic-expansion prior.

    ``fit`` takes a :class:`ModelSpec` (the "data" here is simulated) and
    trains ``Y0`` and the residual controls. ``predict`` returns the
    replicating portfolio value at maturity along given price paths and
    ``score`` the negative replication loss, so larger is better.

    Attributes set by ``fit``: ``y0_``, ``history_``, ``network_``,
    ``model_``, ``root_``, ``config_``.
    """

    def __init__(self, variant="plain", driver="bergman", n_time=50, batch_size=64, valid_size=1024, use_ae=True,
                 y_init=(0.0, 1.0), lateral_weight=None, epsilon_pen=0.01, learning_rate=1e-3, max_steps=5000,
                 display_stride=200, seed=0, reflect_sign=1.0, lateral_point="pre"):
        self.variant = variant
        self.driver = driver
        self.n_time = n_time
        self.batch_size = batch_size
        self.valid_size = valid_size
        self.use_ae = use_ae
        self.y_init = y_init
        self.lateral_weight = lateral_weight
        self.epsilon_pen = epsilon_pen
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.display_stride = display_stride
        self.seed = seed
        self.reflect_sign = reflect_sign
        self.lateral_point = lateral_point

    @classmethod
    def from_config(cls, config: RolloutConfig) -> DeepBSDESolver:
        names = cls._get_param_names()
        return cls(**{k: getattr(config, k) for k in names})

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(**self.get_params())

    def fit(self, model: ModelSpec, root: CorrelationRoot | None = None, callback=None):
        model = check_model(model)
        self.root_ = build_correlation_root(model.d, model.gamma) if root is None else root
        self.model_ = model
        self.config_ = self.rollout_config()
        self.history_, self.network_ = train(self.config_, model, self.root_, callback=callback)
        self.y0_ = self.network_.y0
        self.n_iter_ = self.config_.max_steps
        return self

    def _evaluate(self, X):
        check_is_fitted(self, "network_")
        batch = check_price_paths(X, self.model_, self.root_, self.config_.n_time)
        return rollout(self.config_, self.model_, self.root_, self.network_, batch, training=False)

    def predict(self, X):
        """Terminal value of the hedged portfolio on each path."""
        return self._evaluate(X).y_terminal

    def score(self, X, y=None):
        """Negative loss (terminal mismatch plus any lateral penalty) on ``X``."""
        return -self._evaluate(X).loss

    def controls(self, X):
        """Total controls ``Z`` on each path and step, ``[n, n_time, d]``."""
        return np.moveaxis(self._evaluate(X).z_total, 0, 1)

    def hedge_positions(self, X):
        """Cash held in each risky asset along each path, ``[n, n_time, d]``."""
        return compute_hedge_positions(self.model_, self.root_, self.controls(X))

    def initial_network(self, model: ModelSpec):
        """Untrained network for ``model`` under the current parameters (useful for diagnostics)."""
        return make_network(self.rollout_config(), check_model(model))

    def __sklearn_is_fitted__(self):
        return hasattr(self, "network_")

