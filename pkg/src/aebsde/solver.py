"""Deep BSDE forward rollout (plain, reflected, penalized) and training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ae_prior
from .exceptions import ConfigurationError, TrainingError
from .market import CorrelationRoot, ModelSpec, PathBatch, make_rng, sample_paths, terminal_payoff
from .neuralnet import (
    BN_DECAY,
    BN_EPS,
    INIT_SCALE,
    FlatParams,
    OptimizerState,
    SubnetParams,
    adam_step,
    backward,
    init_subnet,
    param_shapes,
    subnet_forward,
)

VARIANTS = ("plain", "reflected", "penalized")
DRIVERS = ("bergman", "reflected_linear", "qg", "zero")


@dataclass(frozen=True)
class RolloutConfig:
    variant: str = "plain"
    driver: str = "bergman"
    n_time: int = 50
    batch_size: int = 64
    valid_size: int = 1024
    use_ae: bool = True
    y_init: tuple[float, float] = (0.0, 1.0)
    lateral_weight: float | None = None  # None -> 2 / T
    epsilon_pen: float = 0.01
    learning_rate: float = 1e-3
    max_steps: int = 5000
    display_stride: int = 200
    seed: int = 0
    # +1 applies dL with the sign of the reflected equation (Y decreases forward)
    reflect_sign: float = 1.0
    # "pre": barrier violation measured at Y_t before the step's update; "post": at Y_{t+1}
    lateral_point: str = "pre"
    bn_decay: float = BN_DECAY
    bn_eps: float = BN_EPS
    init_scale: float = INIT_SCALE
    divergence_bound: float = 1e8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.driver not in DRIVERS:
            raise ConfigurationError(f"unknown driver {self.driver!r}; expected one of {DRIVERS}")
        if self.n_time < 1:
            raise ConfigurationError("n_time must be >= 1")
        object.__setattr__(self, "y_init", tuple(float(v) for v in self.y_init))
        if len(self.y_init) != 2 or self.y_init[0] > self.y_init[1]:
            raise ConfigurationError(f"y_init must be an interval [low, high], got {self.y_init}")
        if self.lateral_weight is not None and self.lateral_weight <= 0:
            raise ConfigurationError("lateral_weight must be positive")
        if self.variant == "penalized" and self.epsilon_pen <= 0:
            raise ConfigurationError("epsilon_pen must be positive")
        if self.lateral_point not in ("pre", "post"):
            raise ConfigurationError("lateral_point must be 'pre' or 'post'")
        if self.display_stride < 1 or self.max_steps < 0:
            raise ConfigurationError("display_stride must be >= 1 and max_steps >= 0")

    def weight(self, T: float) -> float:
        return 2.0 / T if self.lateral_weight is None else float(self.lateral_weight)


# ---------------------------------------------------------------------------
# drivers: f such that Y_{t+h} = Y_t + f h + Z . dW


def _risk_vectors(model: ModelSpec, root: CorrelationRoot, excess):
    # sum_i rho^{-1}_{alpha,i} c_i / sigma_i, as a length-d vector over alpha
    return root.rho_inv @ (excess / model.sigma)


def compute_hedge_positions(model: ModelSpec, root: CorrelationRoot, Z):
    """Cash held in each risky asset, ``pi^i = sum_alpha Z^alpha rho^{-1}_{alpha,i} / sigma^i``."""
    return (np.asarray(Z) @ root.rho_inv) / model.sigma


def bergman_driver(model: ModelSpec, root: CorrelationRoot, Y, Z):
    """Different lending/borrowing rates: ``rY + Z.m - (sum pi - Y)^+ (R - r)``."""
    m = _risk_vectors(model, root, model.mu - model.r)
    v = _risk_vectors(model, root, np.ones(model.d))
    return model.r * Y + Z @ m - np.maximum(Z @ v - Y, 0.0) * (model.R - model.r)


def reflected_driver(model: ModelSpec, root: CorrelationRoot, Y, Z):
    """Linear driver with the dividend-adjusted market price of risk."""
    m = _risk_vectors(model, root, model.mu + model.y - model.r)
    return model.r * Y + Z @ m


def qg_driver(a: float, Z):
    """Forward drift ``-(a/2)|Z|^2`` of the quadratic-growth BSDE."""
    Z = np.asarray(Z, dtype=np.float64)
    return -0.5 * a * (Z * Z).sum(axis=-1)


class _Driver:
    """Driver value and partial derivatives for the rollout."""

    def __init__(self, kind: str, model: ModelSpec, root: CorrelationRoot):
        self.kind = kind
        self.model = model
        if kind == "bergman":
            if model.R < model.r:
                raise ConfigurationError(f"bergman driver needs R >= r, got R={model.R}, r={model.r}")
            self.m = _risk_vectors(model, root, model.mu - model.r)
            self.v = _risk_vectors(model, root, np.ones(model.d))
        elif kind == "reflected_linear":
            self.m = _risk_vectors(model, root, model.mu + model.y - model.r)

    def __call__(self, Y, Z):
        """Return ``(f, df/dY, df/dZ)``."""
        model = self.model
        if self.kind == "bergman":
            borrow = (Z @ self.v - Y) > 0
            spread = model.R - model.r
            f = model.r * Y + Z @ self.m - np.where(borrow, Z @ self.v - Y, 0.0) * spread
            dfdy = model.r + borrow * spread
            dfdz = self.m[None, :] - (borrow * spread)[:, None] * self.v[None, :]
            return f, dfdy, dfdz
        if self.kind == "reflected_linear":
            return model.r * Y + Z @ self.m, np.full(Y.shape, model.r), np.broadcast_to(self.m, Z.shape)
        if self.kind == "qg":
            return qg_driver(model.a, Z), np.zeros(Y.shape), -model.a * Z
        return np.zeros(Y.shape), np.zeros(Y.shape), np.zeros(Z.shape)


def prior_rate(driver: str, model: ModelSpec) -> float:
    """Discount/forward rate used by the prior: ``r`` except for the driftless qg forward."""
    return 0.0 if driver == "qg" else model.r


def prior_grid(config: RolloutConfig, model: ModelSpec, root: CorrelationRoot, X):
    """Prior controls on every rollout step, ``[n_time, n_paths, d]``; ``X`` is ``[n, d, n_time + 1]``."""
    n_time = X.shape[2] - 1
    h = model.T / n_time
    times = (np.arange(n_time) * h)[:, None]
    X_tb = np.moveaxis(X[:, :, :n_time], 2, 0)
    return ae_prior.z_ae(model, root, model.payoff, prior_rate(config.driver, model), times, X_tb)


# ---------------------------------------------------------------------------
# parameters


class BSDENetwork:
    """Trainable globals ``y0``/``z0`` plus ``n_time - 1`` stacked subnets.

    All trainable arrays are views into ``params.data`` so that the optimiser
    updates one flat vector. Batchnorm moving statistics are kept separately.
    """

    def __init__(self, d: int, n_time: int, lateral_head: bool = False, y_init=(0.0, 1.0), seed: int = 0,
                 init_scale: float = INIT_SCALE):
        self.d = d
        self.n_time = n_time
        self.n_sub = n_time - 1
        shapes = {"y0": (1,), "z0": (d,)}
        sub_shapes = param_shapes(d, lateral_head)
        if self.n_sub > 0:
            shapes.update({k: (self.n_sub,) + s for k, s in sub_shapes.items()})
        self.params = FlatParams(shapes)
        rng = make_rng(seed, "init")
        self.params["y0"][:] = rng.uniform(y_init[0], y_init[1])
        self.params["z0"][:] = rng.uniform(-0.1, 0.1, size=d)
        self.subnets = None
        if self.n_sub > 0:
            children = np.random.SeedSequence(entropy=int(seed), spawn_key=(0x5B,)).spawn(self.n_sub)
            nets = [init_subnet(d, ss, lateral_head, init_scale) for ss in children]
            for k in sub_shapes:
                self.params[k][:] = np.stack([n.weights[k] for n in nets])
            self.subnets = SubnetParams(
                layer_dims=nets[0].layer_dims,
                weights={k: self.params[k] for k in sub_shapes},
                moving_mean=[np.stack([n.moving_mean[i] for n in nets]) for i in range(len(nets[0].moving_mean))],
                moving_var=[np.stack([n.moving_var[i] for n in nets]) for i in range(len(nets[0].moving_var))],
            )

    @property
    def y0(self) -> float:
        return float(self.params["y0"][0])

    def save(self, path):
        extra = {}
        if self.subnets is not None:
            extra = {"moving_mean": np.concatenate(self.subnets.moving_mean, axis=-1),
                     "moving_var": np.concatenate(self.subnets.moving_var, axis=-1)}
        self.params.save(path, extra)

    def load_state(self, path):
        flat, extra = FlatParams.load(path)
        if flat.shapes != self.params.shapes:
            raise ConfigurationError("checkpoint layout does not match this network")
        self.params.data[:] = flat.data
        if self.subnets is not None:
            widths = np.cumsum([m.shape[-1] for m in self.subnets.moving_mean])[:-1]
            for dst, src in ((self.subnets.moving_mean, extra["moving_mean"]),
                             (self.subnets.moving_var, extra["moving_var"])):
                for k, part in enumerate(np.split(src, widths, axis=-1)):
                    dst[k][:] = part


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutResult:
    loss: float
    y_terminal: np.ndarray
    terminal_loss: float
    lateral_penalty: float
    y_path: np.ndarray  # [n_time + 1, n]
    z_total: np.ndarray  # [n_time, n, d]
    l_cum: np.ndarray | None = None  # [n_time + 1, n] applied reflection
    delta_l: np.ndarray | None = None  # [n_time, n] learned increments before gating
    grad: np.ndarray | None = None  # flat gradient aligned with network.params.data


def rollout(config: RolloutConfig, model: ModelSpec, root: CorrelationRoot, net: BSDENetwork, batch: PathBatch,
            training: bool = True, compute_grad: bool = False, z_prior=None) -> RolloutResult:
    """Simulate ``Y`` forward along ``batch`` and evaluate the loss.

    ``z_prior`` may carry precomputed prior controls ``[n_time, n, d]``.
    """
    N = batch.n_time
    if N != net.n_time:
        raise ConfigurationError(f"batch has n_time={N}, network expects {net.n_time}")
    n, d = batch.n_paths, model.d
    h = batch.dt
    reflected = config.variant == "reflected"
    penalized = config.variant == "penalized"
    barrier = reflected or penalized
    w = config.weight(model.T)
    s = config.reflect_sign

    X = batch.X
    dW = np.moveaxis(batch.dW, 2, 0)  # [N, n, d]
    phi = terminal_payoff(model.payoff, model, np.moveaxis(X, 2, 0))  # [N + 1, n]

    z_res = np.empty((N, n, d))
    z_res[0] = net.params["z0"]
    cache = None
    lateral = None
    if N > 1:
        out, cache = subnet_forward(net.subnets, np.moveaxis(X[:, :, 1:N], 2, 0),
                                    "train" if training else "infer", config.bn_decay, config.bn_eps)
        z_res[1:] = out / d
        if reflected:
            lateral = cache.lateral
    if config.use_ae:
        if z_prior is None:
            z_prior = prior_grid(config, model, root, X)
        z_tot = z_res + z_prior
    else:
        z_tot = z_res
    noise = (z_tot * dW).sum(axis=-1)

    drv = _Driver(config.driver, model, root)
    Y = np.empty((N + 1, n))
    Y[0] = net.params["y0"][0]
    dl = np.zeros((N, n))
    if reflected and lateral is not None:
        dl[1:] = h * lateral
    gates = np.zeros((N, n), dtype=bool)
    partials = []
    for t in range(N):
        yt = Y[t]
        f, dfdy, dfdz = drv(yt, z_tot[t])
        partials.append((dfdy, dfdz))
        nxt = yt + f * h + noise[t]
        if reflected:
            gates[t] = yt <= phi[t]
            nxt = nxt - s * gates[t] * dl[t]
        elif penalized:
            nxt = nxt - s * np.maximum(phi[t] - yt, 0.0) * h / config.epsilon_pen
        Y[t + 1] = nxt
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > config.divergence_bound:
            raise TrainingError(f"rollout value diverged at time index {t}", step=None)

    resid = Y[N] - phi[N]
    terminal_loss = float(np.mean(resid**2))
    lateral_penalty = 0.0
    pts = slice(0, N) if config.lateral_point == "pre" else slice(1, N + 1)
    if reflected:
        viol = np.maximum(phi[pts] - Y[pts], 0.0)
        lateral_penalty = float(w * h * np.sum(viol**2) / n)
    loss = terminal_loss + lateral_penalty

    l_cum = None
    if reflected:
        l_cum = np.concatenate([np.zeros((1, n)), np.cumsum(gates * dl, axis=0)])
    result = RolloutResult(loss=loss, y_terminal=Y[N].copy(), terminal_loss=terminal_loss,
                           lateral_penalty=lateral_penalty, y_path=Y, z_total=z_tot, l_cum=l_cum,
                           delta_l=dl if reflected else None)
    if not compute_grad:
        return result

    # reverse sweep
    g_lat_pen = np.zeros((N + 1, n))
    if reflected:
        idx = np.arange(N + 1)[pts]
        g_lat_pen[idx] = -2.0 * w * h * np.maximum(phi[idx] - Y[idx], 0.0) / n
    gY = 2.0 * resid / n + g_lat_pen[N]
    g_z = np.empty((N, n, d))
    g_dl = np.zeros((N, n))
    for t in range(N - 1, -1, -1):
        dfdy, dfdz = partials[t]
        g_z[t] = gY[:, None] * (dfdz * h + dW[t])
        g_prev = gY * (1.0 + dfdy * h)
        if reflected:
            g_dl[t] = -s * gY * gates[t]
        elif penalized:
            g_prev = g_prev + gY * s * (phi[t] > Y[t]) * h / config.epsilon_pen
        gY = g_prev + g_lat_pen[t]

    grad = net.params.zeros_like()
    grad["y0"][:] = gY.sum()
    grad["z0"][:] = g_z[0].sum(axis=0)
    if N > 1:
        g_lateral = h * g_dl[1:] if reflected else None
        sub_grads, _ = backward(net.subnets, cache, g_z[1:] / d, g_lateral)
        for k, g in sub_grads.items():
            grad[k][:] = g
    result.grad = grad.data
    return result


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRecord:
    step: int
    loss: float
    y0: float
    elapsed: float


@dataclass
class TrainHistory:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("history steps must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def as_array(self) -> np.ndarray:
        return np.array([[r.step, r.loss, r.y0, r.elapsed] for r in self.records]).reshape(-1, 4)

    @property
    def final(self) -> TrainRecord:
        return self.records[-1]


def make_network(config: RolloutConfig, model: ModelSpec) -> BSDENetwork:
    return BSDENetwork(model.d, config.n_time, lateral_head=config.variant == "reflected",
                       y_init=config.y_init, seed=config.seed, init_scale=config.init_scale)


def train(config: RolloutConfig, model: ModelSpec, root: CorrelationRoot, net: BSDENetwork | None = None,
          callback=None) -> tuple[TrainHistory, BSDENetwork]:
    """Adam on ``{y0, z0, subnets}`` with a fresh physical-measure batch per step.

    The validation batch is fixed for the run; a record is appended at step
    0, every ``display_stride`` steps and at the last step. Raises
    :class:`TrainingError` (carrying the partial history) on divergence.
    """
    start = time.perf_counter()
    if net is None:
        net = make_network(config, model)
    opt = OptimizerState(size=net.params.data.size, learning_rate=config.learning_rate)
    valid = sample_paths(model, root, "physical", config.valid_size, config.n_time, config.seed, label="valid")
    valid_prior = prior_grid(config, model, root, valid.X) if config.use_ae else None
    history = TrainHistory()

    def record(step):
        res = rollout(config, model, root, net, valid, training=False, z_prior=valid_prior)
        history.append(TrainRecord(step, res.loss, net.y0, time.perf_counter() - start))
        if callback is not None:
            callback(history.final)

    current = 0
    try:
        record(0)
        for current in range(1, config.max_steps + 1):
            batch = sample_paths(model, root, "physical", config.batch_size, config.n_time, config.seed,
                                 label="train", index=current)
            res = rollout(config, model, root, net, batch, training=True, compute_grad=True)
            if not np.isfinite(res.loss):
                raise TrainingError("non-finite loss", step=current)
            adam_step(opt, net.params.data, res.grad)
            if current % config.display_stride == 0 or current == config.max_steps:
                record(current)
    except TrainingError as exc:
        raise TrainingError(exc.reason, step=current, history=history) from exc
    return history, net
