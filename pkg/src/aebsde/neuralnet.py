"""Per-timestep MLPs with batch normalisation, exact backprop and Adam.

Every array function here accepts optional leading *stack* axes so that the
``n_time - 1`` independent subnets of a rollout can be evaluated with one
batched matmul. Parameters are never shared across the stack axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .exceptions import ConfigurationError, TrainingError

BN_EPS = 1e-6
BN_DECAY = 0.99
INIT_SCALE = 5.0

N_BN = 4  # input norm + one per affine layer


def layer_dims(d: int) -> tuple[int, int, int, int]:
    return (d, d + 10, d + 10, d)


@dataclass
class SubnetParams:
    """Weights, batchnorm affine terms and moving statistics of one (or a stack of) subnet(s).

    ``weights`` holds the trainable arrays keyed ``W1..W3``, ``gamma0..3``,
    ``beta0..3`` and, with a lateral head, ``WL``/``bL``.
    """

    layer_dims: tuple[int, ...]
    weights: dict[str, np.ndarray]
    moving_mean: list[np.ndarray]
    moving_var: list[np.ndarray]

    @property
    def has_lateral_head(self) -> bool:
        return "WL" in self.weights

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())


def param_shapes(d: int, lateral_head: bool = False) -> dict[str, tuple[int, ...]]:
    dims = layer_dims(d)
    shapes = {f"W{k}": (dims[k - 1], dims[k]) for k in (1, 2, 3)}
    for k in range(N_BN):
        shapes[f"gamma{k}"] = (dims[k],)
        shapes[f"beta{k}"] = (dims[k],)
    if lateral_head:
        shapes["WL"] = (dims[2], 1)
        shapes["bL"] = (1,)
    return shapes


def init_subnet(d: int, seed, lateral_head: bool = False, init_scale: float = INIT_SCALE) -> SubnetParams:
    """Draw a fresh subnet; ``seed`` is anything ``np.random.default_rng`` accepts."""
    if d < 1:
        raise ConfigurationError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    dims = layer_dims(d)
    weights = {}
    for name, shape in param_shapes(d, lateral_head).items():
        if name.startswith("W"):
            fan_in, fan_out = shape
            weights[name] = rng.normal(0.0, init_scale / np.sqrt(fan_in + fan_out), size=shape)
        elif name.startswith("gamma"):
            weights[name] = rng.uniform(0.1, 0.5, size=shape)
        elif name.startswith("beta"):
            weights[name] = rng.normal(0.0, 0.1, size=shape)
        else:  # lateral bias
            weights[name] = np.zeros(shape)
    return SubnetParams(
        layer_dims=dims,
        weights=weights,
        moving_mean=[np.zeros(dims[k]) for k in range(N_BN)],
        moving_var=[np.ones(dims[k]) for k in range(N_BN)],
    )


def stack_subnets(subnets: list[SubnetParams]) -> SubnetParams:
    first = subnets[0]
    return SubnetParams(
        layer_dims=first.layer_dims,
        weights={k: np.stack([s.weights[k] for s in subnets]) for k in first.weights},
        moving_mean=[np.stack([s.moving_mean[k] for s in subnets]) for k in range(N_BN)],
        moving_var=[np.stack([s.moving_var[k] for s in subnets]) for k in range(N_BN)],
    )


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    batch_stats: bool


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # inputs of the affine layers
    pre_relu: list[np.ndarray] = field(default_factory=list)
    bn: list[_BNCache] = field(default_factory=list)
    lateral_pre: np.ndarray | None = None
    lateral: np.ndarray | None = None
    mode: str = "train"


def _bn_forward(params: SubnetParams, k: int, x, train: bool, decay: float, eps: float):
    gamma = params.weights[f"gamma{k}"][..., None, :]
    beta = params.weights[f"beta{k}"][..., None, :]
    if train:
        mean = x.mean(axis=-2, keepdims=True)
        var = x.var(axis=-2, keepdims=True)
        params.moving_mean[k] += (1.0 - decay) * (mean[..., 0, :] - params.moving_mean[k])
        params.moving_var[k] += (1.0 - decay) * (var[..., 0, :] - params.moving_var[k])
    else:
        mean = params.moving_mean[k][..., None, :]
        var = params.moving_var[k][..., None, :]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, _BNCache(xhat, inv_std, gamma, train)


def _bn_backward(c: _BNCache, dy):
    dgamma = (dy * c.xhat).sum(axis=-2)
    dbeta = dy.sum(axis=-2)
    dxhat = dy * c.gamma
    if not c.batch_stats:
        return dxhat * c.inv_std, dgamma, dbeta
    n = dy.shape[-2]
    dx = c.inv_std / n * (
        n * dxhat - dxhat.sum(axis=-2, keepdims=True) - c.xhat * (dxhat * c.xhat).sum(axis=-2, keepdims=True)
    )
    return dx, dgamma, dbeta


def subnet_forward(params: SubnetParams, x, mode: Literal["train", "infer"] = "train",
                   decay: float = BN_DECAY, eps: float = BN_EPS):
    """Evaluate ``BN -> [affine -> BN -> relu] x 2 -> affine -> BN``.

    ``x`` has shape ``[..., batch, d]``. Train mode normalises with batch
    statistics and updates the moving averages in place; infer mode reads the
    moving averages only. The lateral head output (if any) is on the cache.
    """
    train = mode == "train"
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.layer_dims[0]:
        raise ConfigurationError(f"input width {x.shape[-1]} != {params.layer_dims[0]}")
    if train and x.shape[-2] < 2:
        raise ConfigurationError("train mode needs a batch of at least 2 for batch statistics")
    cache = ForwardCache(mode=mode)
    h, c = _bn_forward(params, 0, x, train, decay, eps)
    cache.bn.append(c)
    for k in (1, 2, 3):
        cache.inputs.append(h)
        a = h @ params.weights[f"W{k}"]
        b, c = _bn_forward(params, k, a, train, decay, eps)
        cache.bn.append(c)
        if k < 3:
            cache.pre_relu.append(b)
            h = np.maximum(b, 0.0)
        else:
            out = b
    if params.has_lateral_head:
        h2 = cache.inputs[2]
        lat = (h2 @ params.weights["WL"])[..., 0] + params.weights["bL"]
        cache.lateral_pre = lat
        cache.lateral = np.maximum(lat, 0.0)
    return out, cache


def backward(params: SubnetParams, cache: ForwardCache, grad_out, grad_lateral=None):
    """Reverse-mode gradients of :func:`subnet_forward`.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` mirrors
    ``params.weights``.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    expected = cache.bn[3].xhat.shape
    if grad_out.shape != expected:
        raise ConfigurationError(f"upstream gradient shape {grad_out.shape} != output shape {expected}")
    grads = {}
    g, grads["gamma3"], grads["beta3"] = _bn_backward(cache.bn[3], grad_out)
    h2 = cache.inputs[2]
    grads["W3"] = np.swapaxes(h2, -1, -2) @ g
    dh = g @ np.swapaxes(params.weights["W3"], -1, -2)
    if params.has_lateral_head:
        gl = np.zeros(cache.lateral_pre.shape) if grad_lateral is None else grad_lateral * (cache.lateral_pre > 0)
        grads["WL"] = np.swapaxes(h2, -1, -2) @ gl[..., None]
        grads["bL"] = gl.sum(axis=-1, keepdims=True)
        dh = dh + gl[..., None] * np.swapaxes(params.weights["WL"], -1, -2)
    for k in (2, 1):
        db = dh * (cache.pre_relu[k - 1] > 0)
        g, grads[f"gamma{k}"], grads[f"beta{k}"] = _bn_backward(cache.bn[k], db)
        grads[f"W{k}"] = np.swapaxes(cache.inputs[k - 1], -1, -2) @ g
        dh = g @ np.swapaxes(params.weights[f"W{k}"], -1, -2)
    dx, grads["gamma0"], grads["beta0"] = _bn_backward(cache.bn[0], dh)
    return grads, dx


class FlatParams:
    """Named views over one contiguous float64 vector.

    Optimisers act on ``data``; model code reads and writes the views. The
    manifest records names and shapes so a vector can be restored.
    """

    VERSION = 1

    def __init__(self, shapes: dict[str, tuple[int, ...]]):
        self.shapes = {k: tuple(int(s) for s in v) for k, v in shapes.items()}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.data = np.zeros(sum(sizes))
        self.views = {}
        offset = 0
        for (name, shape), size in zip(self.shapes.items(), sizes):
            self.views[name] = self.data[offset:offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name):
        return self.views[name]

    def zeros_like(self) -> FlatParams:
        return FlatParams(self.shapes)

    def manifest(self) -> dict:
        return {"version": self.VERSION, "size": int(self.data.size),
                "entries": [[k, list(v)] for k, v in self.shapes.items()]}

    def save(self, path, extra: dict | None = None):
        np.savez(path, flat=self.data, manifest=json.dumps(self.manifest()),
                 **({} if extra is None else extra))

    @classmethod
    def load(cls, path) -> tuple[FlatParams, dict]:
        with np.load(path) as f:
            manifest = json.loads(str(f["manifest"]))
            if manifest["version"] != cls.VERSION:
                raise ConfigurationError(f"unsupported checkpoint version {manifest['version']}")
            out = cls({k: tuple(v) for k, v in manifest["entries"]})
            out.data[:] = f["flat"]
            extra = {k: f[k] for k in f.files if k not in ("flat", "manifest")}
        return out, extra


@dataclass
class OptimizerState:
    size: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(opt: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update of ``params`` (in place, also returned)."""
    if params.shape != grads.shape or params.shape != opt.m.shape:
        raise ConfigurationError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {opt.m.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient", step=opt.step + 1)
    opt.step += 1
    b1t = 1.0 - opt.beta1**opt.step
    b2t = 1.0 - opt.beta2**opt.step
    opt.m *= opt.beta1
    opt.m += (1.0 - opt.beta1) * grads
    opt.v *= opt.beta2
    opt.v += (1.0 - opt.beta2) * np.square(grads)
    # m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
    denom = np.sqrt(opt.v)
    denom += opt.epsilon * np.sqrt(b2t)
    step = np.divide(opt.m, denom, out=denom)
    step *= opt.learning_rate * np.sqrt(b2t) / b1t
    params -= step
    return params
