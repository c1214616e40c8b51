"""Leading-order asymptotic-expansion priors.

The leading-order value process is the Black-Scholes price of the payoff
(small-diffusion Gaussian approximation for the basket call), and the prior
control is its delta multiplied by ``sigma^i X^i rho_{i, alpha}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .exceptions import ConfigurationError, DomainError
from .market import CorrelationRoot, ModelSpec

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def _d_plus(x, K, rate, div, sigma, tau):
    vol = sigma * np.sqrt(tau)
    with np.errstate(divide="ignore"):
        return (np.log(x / K) + (rate - div) * tau + 0.5 * vol**2) / vol


def bs_call(x, K, rate, div, sigma, tau):
    """Black-Scholes call with continuous dividend yield ``div``."""
    x, K, rate, div, sigma, tau = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (x, K, rate, div, sigma, tau)))
    out = np.array(np.maximum(x - K, 0.0))
    live = tau > 0
    if np.any(live):
        xl, Kl, rl, ql, sl, tl = (v[live] for v in (x, K, rate, div, sigma, tau))
        dp = _d_plus(xl, Kl, rl, ql, sl, tl)
        dm = dp - sl * np.sqrt(tl)
        out[live] = xl * np.exp(-ql * tl) * ndtr(dp) - Kl * np.exp(-rl * tl) * ndtr(dm)
    return out if out.ndim else float(out)


def bs_call_delta(x, K, rate, div, sigma, tau):
    """``exp(-div tau) N(d_+)``; requires ``tau > 0``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise DomainError("call delta needs tau > 0")
    out = np.exp(-div * tau) * ndtr(_d_plus(np.asarray(x, dtype=np.float64), K, rate, div, sigma, tau))
    return out if np.ndim(out) else float(out)


def _time_to_maturity(model: ModelSpec, t):
    tau = model.T - np.asarray(t, dtype=np.float64)
    if np.any(tau <= 0):
        raise DomainError(f"prior undefined at or after maturity (t={t}, T={model.T})")
    # trailing axis broadcasts against the asset axis of X_t
    return tau[..., None]


def _call_deltas(model: ModelSpec, kind: str, rate: float, tau, X_t):
    """Per-asset delta of the leading-order price, shape of ``X_t``."""
    div = model.y
    if kind == "call_portfolio":
        return model.weights * bs_call_delta(X_t, model.strike_vector, rate, div, model.sigma, tau)
    k1, k2 = model.strikes
    lower = bs_call_delta(X_t, k1, rate, div, model.sigma, tau)
    upper = bs_call_delta(X_t, k2, rate, div, model.sigma, tau)
    if kind == "call_spread_avg":
        return (lower - 2.0 * upper) / model.d
    if kind == "capped_spread_avg":
        return (lower - upper) / model.d
    raise ConfigurationError(f"z_ae_calls does not handle payoff {kind!r}")


def z_ae_calls(model: ModelSpec, root: CorrelationRoot, payoff_kind: str, rate: float, t, X_t):
    """Prior control for the call-type payoffs.

    ``t`` may be an array broadcastable against ``X_t.shape[:-1]`` to evaluate
    a whole time grid at once.
    """
    tau = _time_to_maturity(model, t)
    X_t = np.asarray(X_t, dtype=np.float64)
    delta = _call_deltas(model, payoff_kind, rate, tau, X_t)
    return (delta * model.sigma * X_t) @ root.rho


@dataclass(frozen=True)
class BasketDeltaTerms:
    d_c: np.ndarray
    sigma_tilde: np.ndarray
    tau: np.ndarray


def _basket_terms(model: ModelSpec, root: CorrelationRoot, tau, X_t):
    growth = np.exp((model.r - model.y) * tau)
    fwd = X_t * growth
    s = model.sigma * fwd
    sigma_tilde = np.linalg.norm(s @ root.rho, axis=-1) / model.d
    sq = np.sqrt(tau[..., 0])
    d_c = (fwd.mean(axis=-1) - model.strikes[0]) / (sigma_tilde * sq)
    return d_c, sigma_tilde, sq


def z_ae_basket(model: ModelSpec, root: CorrelationRoot, t, X_t):
    """Small-diffusion prior control for the basket call.

    Returns the prior rows and the ``(d_c, sigma_tilde, tau)`` terms.
    """
    tau = _time_to_maturity(model, t)
    X_t = np.asarray(X_t, dtype=np.float64)
    d_c, sigma_tilde, _ = _basket_terms(model, root, tau, X_t)
    legs = np.exp(-model.y * tau) * model.sigma * X_t / model.d
    z = ndtr(d_c)[..., None] * (legs @ root.rho)
    return z, BasketDeltaTerms(d_c=d_c, sigma_tilde=sigma_tilde, tau=np.broadcast_to(tau[..., 0], d_c.shape))


def z_ae(model: ModelSpec, root: CorrelationRoot, payoff_kind: str, rate: float, t, X_t):
    """Dispatch to the prior matching ``payoff_kind``."""
    if payoff_kind == "basket_call":
        return z_ae_basket(model, root, t, X_t)[0]
    return z_ae_calls(model, root, payoff_kind, rate, t, X_t)


def leading_order_price(model: ModelSpec, root: CorrelationRoot, payoff_kind: str, rate: float, t, X_t,
                        sigma_tilde=None):
    """Leading-order value ``Y^(0)(t, X_t)`` whose delta the prior uses.

    For the basket call this is the Gaussian (Bachelier) price; passing
    ``sigma_tilde`` freezes the basket volatility, which is the quantity the
    prior differentiates at leading order.
    """
    X_t = np.asarray(X_t, dtype=np.float64)
    tau = _time_to_maturity(model, t)
    if payoff_kind == "basket_call":
        d_c, st, sq = _basket_terms(model, root, tau, X_t)
        if sigma_tilde is not None:
            st = np.asarray(sigma_tilde, dtype=np.float64)
            d_c = ((X_t * np.exp((model.r - model.y) * tau)).mean(axis=-1) - model.strikes[0]) / (st * sq)
        fwd_gap = d_c * st * sq
        return np.exp(-model.r * tau[..., 0]) * (fwd_gap * ndtr(d_c) + st * sq * _norm_pdf(d_c))
    div = model.y
    if payoff_kind == "call_portfolio":
        legs = model.weights * bs_call(X_t, np.broadcast_to(model.strike_vector, X_t.shape), rate, div, model.sigma,
                                       np.broadcast_to(tau, X_t.shape))
        return legs.sum(axis=-1)
    k1, k2 = model.strikes
    tb = np.broadcast_to(tau, X_t.shape)
    c1 = bs_call(X_t, np.full(X_t.shape, k1), rate, div, model.sigma, tb)
    c2 = bs_call(X_t, np.full(X_t.shape, k2), rate, div, model.sigma, tb)
    if payoff_kind == "call_spread_avg":
        return (c1 - 2.0 * c2).mean(axis=-1)
    if payoff_kind == "capped_spread_avg":
        return (c1 - c2).mean(axis=-1)
    raise ConfigurationError(f"unknown payoff kind {payoff_kind!r}")
