"""Probabilistic dynamics ensemble and dyna-style model rollouts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import N_ACTIONS, STATE_DIM, ReplayBuffer
from .errors import NumericError, StateError
from .nn import DenseNet, adam_init, adam_step, backward, forward, gaussian_nll, init_dense

log = logging.getLogger(__name__)

DYN_MAGIC = "OMGRL-DYN v1"
OUT_DIM = STATE_DIM + 1


def one_hot(actions, n: int = N_ACTIONS) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    out = np.zeros((len(actions), n))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def model_inputs(states, actions) -> np.ndarray:
    return np.concatenate([np.atleast_2d(states), one_hot(actions)], axis=1)


@dataclass
class DynamicsConfig:
    hidden: int = 128
    n_hidden_layers: int = 3
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float = 1e-5
    n_train: int = 7
    n_keep: int = 5
    activation: str = "relu"
    # gradient weight var**beta (beta-NLL); 0 is plain maximum likelihood
    beta: float = 0.5


@dataclass
class ProbabilisticDynamicsModel:
    """Gaussian over (next state, reward) given (state, one-hot action)."""

    net: DenseNet

    @classmethod
    def init(cls, rng, hidden=128, n_hidden_layers=3, activation="relu"):
        sizes = [STATE_DIM + N_ACTIONS] + [hidden] * n_hidden_layers + [2 * OUT_DIM]
        return cls(init_dense(sizes, rng, activation, "gaussian_head"))

    def predict(self, states, actions):
        out, _ = forward(self.net, model_inputs(states, actions))
        return out[:, :OUT_DIM], out[:, OUT_DIM:]

    def loss_and_grads(self, x, y, beta: float = 0.0):
        """Mean per-sample NLL and its parameter gradients.

        With ``beta > 0`` each output's gradient is scaled by the (constant)
        predicted variance to the power ``beta``, which keeps low-noise outputs
        from starving the others; the reported loss is still the plain NLL.
        """
        out, cache = forward(self.net, x)
        n = len(x)
        loss, dm, dlv = gaussian_nll(out[:, :OUT_DIM], out[:, OUT_DIM:], y)
        up = np.concatenate([dm, dlv], axis=1) / n
        if beta:
            up *= np.tile(np.exp(beta * out[:, OUT_DIM:]), 2)
        grads, _ = backward(self.net, cache, up)
        return loss / n, grads

    def mean_nll(self, x, y, chunk=4096) -> float:
        total = 0.0
        for i in range(0, len(x), chunk):
            out, _ = forward(self.net, x[i:i + chunk])
            total += gaussian_nll(out[:, :OUT_DIM], out[:, OUT_DIM:], y[i:i + chunk])[0]
        return total / len(x)


@dataclass
class DynamicsEnsemble:
    members: list[ProbabilisticDynamicsModel]
    val_nll: list[float]
    normalizer_fingerprint: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")

    def __len__(self):
        return len(self.members)

    def mean_prediction(self, states, actions):
        means = [m.predict(states, actions)[0] for m in self.members]
        return np.mean(means, axis=0)

    def save(self, path) -> str:
        return checkpoint.save(path, DYN_MAGIC, {
            "members": [checkpoint.net_to_dict(m.net) for m in self.members],
            "val_nll": list(self.val_nll), "normalizer": self.normalizer_fingerprint})

    @classmethod
    def load(cls, path) -> "DynamicsEnsemble":
        d = checkpoint.load(path, DYN_MAGIC)
        members = [ProbabilisticDynamicsModel(checkpoint.net_from_dict(m)) for m in d["members"]]
        return cls(members, [float(v) for v in d["val_nll"]], d["normalizer"])


@dataclass
class TrainedMember:
    model: ProbabilisticDynamicsModel
    val_nll: float
    index: int
    history: list[tuple[float, float]] = field(default_factory=list)


def _xy(transitions: dict):
    x = model_inputs(transitions["states"], transitions["actions"])
    y = np.concatenate([transitions["next_states"], transitions["rewards"][:, None]], axis=1)
    return x, y


def _cosine_lr(lr0, lr1, epoch, epochs):
    if epochs <= 1:
        return lr0
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))


def train_member(train: dict, val: dict, seed, config: DynamicsConfig, index: int = 0) -> TrainedMember:
    rng = np.random.default_rng(seed)
    model = ProbabilisticDynamicsModel.init(rng, config.hidden, config.n_hidden_layers, config.activation)
    x, y = _xy(train)
    xv, yv = _xy(val)
    params = model.net.params
    opt = adam_init(params, lr=config.lr, names=model.net.param_names())
    history = []
    n = len(x)
    for epoch in range(config.epochs):
        opt.lr = _cosine_lr(config.lr, config.lr_final, epoch, config.epochs)
        perm = rng.permutation(n)
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss, grads = model.loss_and_grads(x[idx], y[idx], config.beta)
            if not np.isfinite(loss):
                raise NumericError(f"member {index}: non-finite loss at epoch {epoch}")
            params, opt = adam_step(params, grads, opt)
            model = ProbabilisticDynamicsModel(model.net.with_params(params))
        tr_nll, va_nll = model.mean_nll(x, y), model.mean_nll(xv, yv)
        history.append((tr_nll, va_nll))
        log.debug("member %d epoch %d train_nll %.4f val_nll %.4f", index, epoch, tr_nll, va_nll)
    return TrainedMember(model, history[-1][1] if history else model.mean_nll(xv, yv), index, history)


def train_dynamics(train: dict, val: dict, config: DynamicsConfig | None = None, seed: int = 0,
                   n_models: int | None = None) -> list[TrainedMember]:
    """Train ``n_models`` members that differ only in init and shuffling seeds."""
    config = config or DynamicsConfig()
    m = config.n_train if n_models is None else n_models
    if len(train["actions"]) == 0 or len(val["actions"]) == 0:
        raise ValueError("train and validation sets must be nonempty")
    out = []
    for i in range(m):
        try:
            out.append(train_member(train, val, [seed, i], config, i))
        except NumericError as exc:
            log.warning("dropping dynamics member %d: %s", i, exc)
    if len(out) < min(config.n_keep, m):
        raise NumericError(f"only {len(out)} dynamics members survived training")
    return out


def select_top(members: list[TrainedMember], k: int = 5, normalizer_fingerprint: str = "") -> DynamicsEnsemble:
    """Keep the k members with lowest validation NLL (ties go to the lower index)."""
    if k < 1 or k > len(members):
        raise ValueError(f"cannot keep {k} of {len(members)} members")
    ranked = sorted(members, key=lambda m: (m.val_nll, m.index))[:k]
    return DynamicsEnsemble([m.model for m in ranked], [m.val_nll for m in ranked], normalizer_fingerprint)


def ensemble_sample_batch(ensemble: DynamicsEnsemble, states, actions, rng: np.random.Generator,
                          deterministic: bool = False):
    """Pick a member uniformly per row and sample (next_state, reward) from it."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.int64).reshape(len(states))
    n = len(states)
    which = rng.integers(0, len(ensemble), size=n)
    noise = rng.normal(size=(n, OUT_DIM))
    out = np.empty((n, OUT_DIM))
    for k in np.unique(which):
        rows = which == k
        mean, lv = ensemble.members[k].predict(states[rows], actions[rows])
        out[rows] = mean if deterministic else mean + np.exp(0.5 * lv) * noise[rows]
    return out[:, :STATE_DIM], out[:, STATE_DIM], which


def ensemble_sample(ensemble, state, action, rng, deterministic=False):
    s, r, _ = ensemble_sample_batch(ensemble, np.asarray(state)[None], [action], rng, deterministic)
    return s[0], float(r[0])


@dataclass
class RolloutConfig:
    horizon: int = 5
    batch_size: int = 64

    def __post_init__(self):
        if self.horizon < 1 or self.batch_size < 0:
            raise ValueError("rollout horizon must be >= 1 and batch size >= 0")


@dataclass
class RolloutResult:
    added: int
    states: np.ndarray      # (b, h, state_dim)
    actions: np.ndarray     # (b, h)
    rewards: np.ndarray     # (b, h)
    next_states: np.ndarray  # (b, h, state_dim)
    rejected: int = 0
    dropped: int = 0


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one action per row."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def rollout_batch(ensemble: DynamicsEnsemble, policy, source, config: RolloutConfig,
                  sink: ReplayBuffer | None, rng: np.random.Generator, max_redraws: int = 10) -> RolloutResult:
    """Branch ``batch_size`` model rollouts of length ``horizon`` from logged start states.

    ``policy`` needs a ``probs(states)`` method; ``source`` is a buffer or an
    array of start states. Every generated step is pushed into ``sink``.
    """
    b, h = config.batch_size, config.horizon
    pool = source.arrays()["states"] if isinstance(source, ReplayBuffer) else np.asarray(source)
    empty = RolloutResult(0, np.zeros((0, h, STATE_DIM)), np.zeros((0, h), dtype=np.int64),
                          np.zeros((0, h)), np.zeros((0, h, STATE_DIM)))
    if b == 0:
        return empty
    if len(pool) == 0:
        raise StateError("rollout source has no states")
    s = pool[rng.integers(0, len(pool), size=b)]
    S = np.zeros((b, h, STATE_DIM))
    A = np.zeros((b, h), dtype=np.int64)
    R = np.zeros((b, h))
    S2 = np.zeros((b, h, STATE_DIM))
    alive = np.ones(b, dtype=bool)
    rejected = 0
    for j in range(h):
        a = sample_actions(policy.probs(s), rng)
        s2, r, _ = ensemble_sample_batch(ensemble, s, a, rng)
        bad = ~(np.all(np.isfinite(s2), axis=1) & np.isfinite(r))
        tries = 0
        while bad.any() and tries < max_redraws:
            rejected += int(bad.sum())
            s2b, rb, _ = ensemble_sample_batch(ensemble, s[bad], a[bad], rng)
            s2[bad], r[bad] = s2b, rb
            bad = ~(np.all(np.isfinite(s2), axis=1) & np.isfinite(r))
            tries += 1
        if bad.any():
            log.warning("dropping %d rollout branches with non-finite samples", int(bad.sum()))
            alive &= ~bad
            s2[bad] = s[bad]
            r[bad] = 0.0
        S[:, j], A[:, j], R[:, j], S2[:, j] = s, a, r, s2
        s = s2
    keep = alive
    res = RolloutResult(int(keep.sum()) * h, S[keep], A[keep], R[keep], S2[keep], rejected, int((~keep).sum()))
    if sink is not None and res.added:
        sink.push_batch(res.states.reshape(-1, STATE_DIM), res.actions.reshape(-1), res.rewards.reshape(-1),
                        res.next_states.reshape(-1, STATE_DIM))
    return res
