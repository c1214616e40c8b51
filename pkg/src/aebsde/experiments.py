"""Registry of the reproduced experiments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

from . import oracles
from .market import CorrelationRoot, ModelSpec, build_correlation_root
from .oracles import BENCHMARKS, Benchmark
from .solver import RolloutConfig


@dataclass(frozen=True)
class ExperimentConfig:
    id: str
    model: ModelSpec
    rollout: RolloutConfig
    expected: Benchmark
    # (model, root, n_paths) -> (value, provenance); n_paths only matters for Monte Carlo oracles
    oracle: Callable[[ModelSpec, CorrelationRoot, int], tuple[float, str]] | None = None

    def root(self) -> CorrelationRoot:
        return build_correlation_root(self.model.d, self.model.gamma)

    def with_overrides(self, **overrides) -> RolloutConfig:
        """A fresh config with ``overrides`` applied; the registered one is untouched."""
        return dataclasses.replace(self.rollout, **overrides)

    @property
    def driver(self) -> str:
        return self.rollout.driver


def _exact_bergman(model, root, n_paths=None):
    return oracles.bergman_purely_call_exact(model), "closed form"


def _stored(key):
    def oracle(model, root, n_paths=None):
        b = BENCHMARKS[key]
        return b.value, b.provenance
    return oracle


def _cole_hopf(model, root, n_paths=None):
    n_paths = n_paths or 1_000_000
    value, se = oracles.cole_hopf_mc(model, root, n_paths=n_paths, seed=2017)
    return value, f"Cole-Hopf Monte Carlo, {n_paths} paths, se {se:.4f}"


def _build() -> dict[str, ExperimentConfig]:
    bergman = dict(mu=0.05, r=0.01, R=0.06, x0=100.0)
    setA = ModelSpec(d=1, sigma=0.3, T=0.5, strikes=(103.0,), weights=1.0, payoff="call_portfolio", **bergman)
    call30 = setA.replace(d=30, weights=1.0 / 30, gamma=0.06)
    spread1 = ModelSpec(d=1, sigma=0.2, T=0.25, strikes=(95.0, 105.0), payoff="call_spread_avg", **bergman)
    spread30 = spread1.replace(d=30, gamma=0.06)
    amer = dict(mu=0.02, y=0.07, r=0.03, T=0.5, sigma=0.2, x0=110.0, strikes=(100.0,), payoff="basket_call")
    amer1 = ModelSpec(d=1, **amer)
    amer50 = ModelSpec(d=50, gamma=0.07, **amer)
    qg = dict(mu=0.0, r=0.0, x0=100.0, T=0.25, strikes=(95.0, 105.0), payoff="capped_spread_avg")
    qg0 = ModelSpec(d=50, a=1.0, sigma=0.2, gamma=0.0, **qg)
    qgc = qg0.replace(gamma=0.07)
    qgx = ModelSpec(d=50, a=5.0, sigma=1.0, gamma=0.0, **qg)

    plain = dict(variant="plain", n_time=50, batch_size=64, valid_size=1024, learning_rate=1e-3, max_steps=5000)
    amer_cfg = dict(plain, variant="reflected", driver="reflected_linear", n_time=100)
    entries = [
        ("bergman_call_d1", setA, RolloutConfig(driver="bergman", y_init=(7.0, 10.0), **plain), _exact_bergman),
        ("bergman_call_d30", call30, RolloutConfig(driver="bergman", y_init=(7.0, 10.0), **plain), _exact_bergman),
        ("call_spread_d1", spread1, RolloutConfig(driver="bergman", y_init=(2.0, 4.0), **plain),
         _stored("call_spread_d1")),
        ("call_spread_d30", spread30, RolloutConfig(driver="bergman", y_init=(2.0, 4.0), **plain), None),
        ("american_d1", amer1, RolloutConfig(y_init=(10.0, 12.0), **amer_cfg), _stored("american_d1")),
        ("american_d50", amer50, RolloutConfig(y_init=(9.0, 11.0), **amer_cfg), _stored("american_d50")),
        ("qg_d50_id", qg0, RolloutConfig(driver="qg", y_init=(4.0, 6.0), **dict(plain, n_time=25)), _cole_hopf),
        ("qg_d50_corr", qgc, RolloutConfig(driver="qg", y_init=(6.0, 8.0), **dict(plain, n_time=25)), _cole_hopf),
        ("qg_d50_extreme", qgx, RolloutConfig(driver="qg", y_init=(4.0, 6.0), **plain), _cole_hopf),
    ]
    return {eid: ExperimentConfig(eid, model, cfg, BENCHMARKS[eid], oracle)
            for eid, model, cfg, oracle in entries}


REGISTRY: dict[str, ExperimentConfig] = _build()


def get_experiment(experiment_id: str) -> ExperimentConfig:
    try:
        return REGISTRY[experiment_id]
    except KeyError:
        raise KeyError(f"unknown experiment {experiment_id!r}; known: {', '.join(REGISTRY)}") from None
