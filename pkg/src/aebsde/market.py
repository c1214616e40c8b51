"""Market models, the one-parameter correlation root and GBM path sampling."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .exceptions import ConfigurationError, CorrelationError

PAYOFF_KINDS = ("call_portfolio", "call_spread_avg", "basket_call", "capped_spread_avg")

Measure = Literal["physical", "pricing"]


def _as_vector(value, d, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.size == 1:
        arr = np.full(d, float(arr.reshape(())))
    if arr.shape != (d,):
        raise ConfigurationError(f"{name} must be a scalar or a length-{d} vector, got shape {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelSpec:
    """Market and BSDE parameters for one experiment family.

    Scalars given for ``mu``, ``sigma``, ``y`` and ``x0`` are broadcast to all
    ``d`` assets. ``strikes`` holds the per-asset strikes for
    ``call_portfolio`` (one value is broadcast), ``(K1, K2)`` for the spread
    payoffs and ``(K,)`` for the basket call. ``R`` defaults to ``r``.
    """

    d: int
    mu: np.ndarray | float
    sigma: np.ndarray | float
    r: float
    T: float
    x0: np.ndarray | float
    strikes: tuple[float, ...]
    R: float | None = None
    y: np.ndarray | float = 0.0
    weights: np.ndarray | float | None = None
    a: float = 0.0
    gamma: float = 0.0
    payoff: str = "call_portfolio"
    allow_degenerate: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        d = int(self.d)
        if d < 1:
            raise ConfigurationError(f"d must be a positive integer, got {self.d}")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("d", d)
        set_("mu", _as_vector(self.mu, d, "mu"))
        set_("sigma", _as_vector(self.sigma, d, "sigma"))
        set_("y", _as_vector(self.y, d, "y"))
        set_("x0", _as_vector(self.x0, d, "x0"))
        set_("r", float(self.r))
        set_("R", float(self.r if self.R is None else self.R))
        set_("T", float(self.T))
        set_("a", float(self.a))
        set_("gamma", float(self.gamma))
        set_("strikes", tuple(float(k) for k in np.atleast_1d(self.strikes)))
        if self.payoff not in PAYOFF_KINDS:
            raise ConfigurationError(f"unknown payoff kind {self.payoff!r}; expected one of {PAYOFF_KINDS}")
        if self.weights is None:
            w = 1.0 if self.payoff == "call_portfolio" else 1.0 / d
        else:
            w = self.weights
        set_("weights", _as_vector(w, d, "weights"))

        if self.allow_degenerate:
            if np.any(self.sigma < 0):
                raise ConfigurationError("sigma entries must be non-negative")
        elif np.any(self.sigma <= 0):
            raise ConfigurationError("sigma entries must be strictly positive")
        if np.any(self.x0 <= 0):
            raise ConfigurationError("x0 entries must be strictly positive")
        if not self.T > 0:
            raise ConfigurationError(f"T must be positive, got {self.T}")
        n_strikes = {"call_spread_avg": 2, "capped_spread_avg": 2, "basket_call": 1}
        if self.payoff in n_strikes and len(self.strikes) != n_strikes[self.payoff]:
            raise ConfigurationError(f"{self.payoff} needs {n_strikes[self.payoff]} strike(s), got {self.strikes}")
        if self.payoff == "call_portfolio" and len(self.strikes) not in (1, d):
            raise ConfigurationError(f"call_portfolio needs 1 or {d} strikes, got {len(self.strikes)}")

    @property
    def strike_vector(self):
        """Per-asset strikes for ``call_portfolio``."""
        return np.broadcast_to(np.asarray(self.strikes), (self.d,)) if len(self.strikes) == 1 else np.asarray(self.strikes)

    def replace(self, **changes) -> ModelSpec:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CorrelationRoot:
    """Square root ``rho`` of the correlation matrix, its inverse and the common pairwise correlation."""

    rho: np.ndarray
    rho_inv: np.ndarray
    pairwise_corr: float
    gamma: float

    @property
    def d(self) -> int:
        return self.rho.shape[0]

    @property
    def correlation(self) -> np.ndarray:
        return self.rho @ self.rho.T


def build_correlation_root(d: int, gamma: float) -> CorrelationRoot:
    """Build ``rho = (gamma * ones + (1 - gamma) * I) / sqrt(1 + (d-1) gamma^2)``.

    The unnormalised matrix has eigenvalues ``1 - gamma`` and
    ``1 + (d - 1) gamma``; either vanishing makes ``rho`` singular.
    """
    d = int(d)
    gamma = float(gamma)
    if d < 1:
        raise CorrelationError(d, gamma, "d must be positive")
    norm2 = 1.0 + (d - 1) * gamma**2
    if d > 1:
        if abs(1.0 - gamma) < 1e-12:
            raise CorrelationError(d, gamma, "all rows equal (gamma = 1)")
        if abs(1.0 + (d - 1) * gamma) < 1e-12:
            raise CorrelationError(d, gamma, "rows sum to zero (gamma = -1/(d-1))")
    base = np.full((d, d), gamma) + (1.0 - gamma) * np.eye(d)
    rho = base / np.sqrt(norm2)
    rho_inv = np.linalg.inv(rho)
    pairwise = (2.0 * gamma + (d - 2) * gamma**2) / norm2 if d > 1 else 0.0
    rho.setflags(write=False)
    rho_inv.setflags(write=False)
    return CorrelationRoot(rho=rho, rho_inv=rho_inv, pairwise_corr=pairwise, gamma=gamma)


@dataclass(frozen=True)
class PathBatch:
    """Brownian increments ``dW`` [n, d, n_time] and prices ``X`` [n, d, n_time + 1]."""

    dt: float
    dW: np.ndarray
    X: np.ndarray
    measure: str

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_time(self) -> int:
        return self.dW.shape[2]


def make_rng(seed: int, label: str = "paths", index: int = 0) -> np.random.Generator:
    """Independent generator for the stream ``(seed, label, index)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(label.encode()), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def sample_paths(
    model: ModelSpec,
    root: CorrelationRoot,
    measure: Measure,
    n_paths: int,
    n_time: int,
    seed: int,
    label: str = "paths",
    index: int = 0,
    rate: float | None = None,
) -> PathBatch:
    """Sample correlated GBM paths by exact log-normal stepping.

    Drift is ``mu`` under the physical measure and ``rate - y`` under the
    pricing measure, where ``rate`` defaults to ``model.r``.
    """
    if n_time < 1 or n_paths < 1:
        raise ConfigurationError(f"n_time and n_paths must be >= 1, got {n_time}, {n_paths}")
    if root.d != model.d:
        raise ConfigurationError(f"correlation root has d={root.d}, model has d={model.d}")
    if measure == "physical":
        drift = model.mu
    elif measure == "pricing":
        drift = (model.r if rate is None else rate) - model.y
    else:
        raise ConfigurationError(f"unknown measure {measure!r}")

    h = model.T / n_time
    rng = make_rng(seed, label, index)
    dW = rng.standard_normal((n_paths, model.d, n_time)) * np.sqrt(h)
    shocks = root.rho @ dW  # (rho dW)_i = sum_alpha rho_{i,alpha} dW^alpha
    sig = model.sigma[None, :, None]
    log_inc = ((drift - 0.5 * model.sigma**2) * h)[None, :, None] + sig * shocks
    log_x = np.concatenate([np.zeros((n_paths, model.d, 1)), np.cumsum(log_inc, axis=2)], axis=2)
    X = model.x0[None, :, None] * np.exp(log_x)
    X[:, :, 0] = model.x0
    dW.setflags(write=False)
    X.setflags(write=False)
    return PathBatch(dt=h, dW=dW, X=X, measure=measure)


def terminal_payoff(kind: str, model: ModelSpec, X_T: np.ndarray) -> np.ndarray:
    """Payoff of ``kind`` evaluated on prices ``X_T`` whose last axis is the asset axis."""
    X_T = np.asarray(X_T, dtype=np.float64)
    if kind == "call_portfolio":
        return np.maximum(X_T - model.strike_vector, 0.0) @ model.weights
    if kind == "call_spread_avg":
        k1, k2 = model.strikes
        return (np.maximum(X_T - k1, 0.0) - 2.0 * np.maximum(X_T - k2, 0.0)).mean(axis=-1)
    if kind == "capped_spread_avg":
        k1, k2 = model.strikes
        return (np.maximum(X_T - k1, 0.0) - np.maximum(X_T - k2, 0.0)).mean(axis=-1)
    if kind == "basket_call":
        return np.maximum(X_T.mean(axis=-1) - model.strikes[0], 0.0)
    raise ConfigurationError(f"unknown payoff kind {kind!r}; expected one of {PAYOFF_KINDS}")
