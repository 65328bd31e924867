"""Small fp64 dense-network engine.

Networks are plain dataclasses holding weight matrices of shape ``(out, in)``
and bias vectors. ``forward`` returns the output together with a cache, and
``backward`` consumes that cache to produce exact parameter gradients. Both
accept a single vector or a batch (rows are samples).

Parameters are exposed as a flat list ``[W0, b0, W1, b1, ...]`` so that the
optimizer and the finite-difference checker can treat every network alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, ShapeError, StateError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 0.5
_LV_MID = 0.5 * (LOGVAR_MAX + LOGVAR_MIN)
_LV_HALF = 0.5 * (LOGVAR_MAX - LOGVAR_MIN)

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("linear", "softmax", "gaussian_head")

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class DenseNet:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.output_activation == "gaussian_head" and self.layer_sizes[-1] % 2:
            raise ShapeError("gaussian_head needs an even final width")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError("parameter count does not match layer_sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise ShapeError(f"layer {i}: got W{w.shape} b{b.shape}, expected W{shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        """Width of the returned output (for a gaussian head: mean and log-variance)."""
        return self.layer_sizes[-1]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names

    def with_params(self, params: list[np.ndarray]) -> "DenseNet":
        return replace(self, weights=list(params[0::2]), biases=list(params[1::2]))

    def copy(self) -> "DenseNet":
        return self.with_params([p.copy() for p in self.params])


def init_dense(layer_sizes, rng: np.random.Generator, hidden_activation="relu",
               output_activation="linear", last_layer_scale=1.0) -> DenseNet:
    """He-uniform initialisation; biases start at zero."""
    weights, biases = [], []
    n = len(layer_sizes) - 1
    for i in range(n):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        limit = math.sqrt(6.0 / fan_in)
        if i == n - 1:
            limit *= last_layer_scale
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNet(tuple(layer_sizes), weights, biases, hidden_activation, output_activation)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def soft_clamp_logvar(raw: np.ndarray) -> np.ndarray:
    """Smoothly squash raw log-variances into [LOGVAR_MIN, LOGVAR_MAX]."""
    return _LV_MID + _LV_HALF * np.tanh((raw - _LV_MID) / _LV_HALF)


def _soft_clamp_grad(raw: np.ndarray) -> np.ndarray:
    t = np.tanh((raw - _LV_MID) / _LV_HALF)
    return 1.0 - t * t


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0.0).astype(np.float64) if name == "relu" else 1.0 - a * a


def forward(net: DenseNet, x) -> tuple[np.ndarray, dict]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match input width {net.in_dim}")
    acts, pres = [x], []
    h = x
    for i in range(net.n_layers):
        z = h @ net.weights[i].T + net.biases[i]
        pres.append(z)
        if i < net.n_layers - 1:
            h = _act(net.hidden_activation, z)
            acts.append(h)
    z = pres[-1]
    if net.output_activation == "softmax":
        out = softmax(z)
    elif net.output_activation == "gaussian_head":
        d = z.shape[1] // 2
        out = np.concatenate([z[:, :d], soft_clamp_logvar(z[:, d:])], axis=1)
    else:
        out = z
    cache = {"layer_sizes": net.layer_sizes, "acts": acts, "pres": pres, "out": out,
             "single": single}
    return (out[0] if single else out), cache


def backward(net: DenseNet, cache: dict | None, upstream) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

    The upstream gradient is taken w.r.t. the *returned* output, so for a
    softmax head it is d(loss)/d(probabilities), and for a gaussian head it is
    split into d/d(mean) and d/d(clamped log-variance).
    """
    if not cache or cache.get("layer_sizes") != net.layer_sizes:
        raise StateError("backward needs the cache of a matching forward call")
    g = np.asarray(upstream, dtype=np.float64)
    if cache["single"]:
        g = g[None, :]
    out = cache["out"]
    if g.shape != out.shape:
        raise ShapeError(f"upstream grad {g.shape} does not match output {out.shape}")
    z = cache["pres"][-1]
    if net.output_activation == "softmax":
        g = out * (g - (g * out).sum(axis=1, keepdims=True))
    elif net.output_activation == "gaussian_head":
        d = z.shape[1] // 2
        g = np.concatenate([g[:, :d], g[:, d:] * _soft_clamp_grad(z[:, d:])], axis=1)

    grads: list[np.ndarray] = [None] * (2 * net.n_layers)  # type: ignore[list-item]
    acts, pres = cache["acts"], cache["pres"]
    for i in reversed(range(net.n_layers)):
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i]
        if i > 0:
            g = g * _act_grad(net.hidden_activation, pres[i - 1], acts[i])
    dx = g[0] if cache["single"] else g
    return grads, dx


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    names: list[str] = field(default_factory=list)


def adam_init(params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8, names=None) -> AdamState:
    return AdamState(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                     t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps, names=list(names or []))


def adam_step(params, grads, state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"shape mismatch in parameter block {i}")
        if not np.all(np.isfinite(g)):
            name = state.names[i] if i < len(state.names) else f"block {i}"
            raise NumericError(f"non-finite gradient in parameter {name}")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, replace(state, m=new_m, v=new_v, t=t)


def gaussian_nll(mean, log_var, target) -> tuple[float, np.ndarray, np.ndarray]:
    """Diagonal-Gaussian negative log-likelihood summed over all entries.

    Returns ``(loss, d_loss/d_mean, d_loss/d_log_var)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mean.shape != log_var.shape or mean.shape != target.shape:
        raise ShapeError("mean, log_var and target must share a shape")
    for name, arr in (("mean", mean), ("log_var", log_var), ("target", target)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite {name} in gaussian_nll")
    inv_var = np.exp(-log_var)
    diff = target - mean
    loss = float(np.sum(HALF_LOG_2PI + 0.5 * log_var + 0.5 * diff * diff * inv_var))
    d_mean = -diff * inv_var
    d_log_var = 0.5 - 0.5 * diff * diff * inv_var
    return loss, d_mean, d_log_var


# --- finite-difference verification -------------------------------------------------

def _head_loss(net, x, head, target):
    """Loss value and d(loss)/d(output) for the heads used in the package."""
    out, cache = forward(net, x)
    out2 = np.atleast_2d(out)
    if head == "linear":
        diff = out2 - target
        return 0.5 * float(np.sum(diff * diff)), diff, cache
    if head == "softmax":
        # cross-entropy against a target distribution
        p = np.clip(out2, 1e-300, None)
        return -float(np.sum(target * np.log(p))), -target / p, cache
    if head == "gaussian":
        d = out2.shape[1] // 2
        loss, dm, dlv = gaussian_nll(out2[:, :d], out2[:, d:], target)
        return loss, np.concatenate([dm, dlv], axis=1), cache
    raise ValueError(f"unknown loss head {head!r}")


def default_head_target(net: DenseNet, n: int, rng: np.random.Generator) -> np.ndarray:
    if net.output_activation == "softmax":
        return rng.dirichlet(np.ones(net.out_dim), size=n)
    if net.output_activation == "gaussian_head":
        return rng.normal(size=(n, net.out_dim // 2))
    return rng.normal(size=(n, net.out_dim))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def finite_difference(f, params: list[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``f(params)`` w.r.t. every parameter entry."""
    trial = [np.array(q, dtype=np.float64, copy=True) for q in params]
    grads = []
    for k in range(len(trial)):
        g = np.zeros_like(trial[k])
        flat = g.reshape(-1)
        base = trial[k].reshape(-1)
        for idx in range(base.size):
            orig = base[idx]
            base[idx] = orig + step
            hi = f(trial)
            base[idx] = orig - step
            lo = f(trial)
            base[idx] = orig
            flat[idx] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def grad_check(net: DenseNet, loss_head: str, trial_input, target=None, step: float = 1e-5,
               rng: np.random.Generator | None = None) -> float:
    """Compare backprop gradients against central differences; return the worst relative error."""
    x = np.atleast_2d(np.asarray(trial_input, dtype=np.float64))
    if target is None:
        target = default_head_target(net, x.shape[0], rng or np.random.default_rng(0))
    _, g_out, cache = _head_loss(net, x, loss_head, target)
    grads, _ = backward(net, cache, g_out)

    def f(params):
        return _head_loss(net.with_params(params), x, loss_head, target)[0]

    numeric = finite_difference(f, net.params, step)
    errs = [relative_error(a, n) for a, n in zip(grads, numeric)]
    return max(errs) if errs else 0.0
