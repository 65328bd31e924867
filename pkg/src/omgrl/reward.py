"""Learned per-step reward and the importance-weighted guided cost learning step.

The reward network scores a (state, action) pair; a segment's reward is the
sum over its steps. Sampled segments are reweighted by
``exp(sum r) / prod pi(a|s)``, computed entirely in the log domain, which makes
the reward objective

    mean_i R(expert_i) - log( (1/M) sum_j w_j )

whose exact gradient is the expert mean of grad R minus the
self-normalised weighted mean over samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import checkpoint
from .data import N_ACTIONS, STATE_DIM
from .dynamics import model_inputs
from .errors import DegenerateDataError
from .nn import AdamState, DenseNet, adam_init, adam_step, backward, forward, init_dense

REWARD_MAGIC = "OMGRL-RWD v1"


@dataclass
class RewardConfig:
    hidden: int = 64
    activation: str = "relu"
    # per-step bound; a loose bound lets the reward separate real from model-generated states
    r_max: float = 1.0
    lr: float = 1e-4
    l2: float = 1e-2
    n_expert: int = 64


@dataclass
class RewardNet:
    net: DenseNet
    r_max: float = 10.0

    @classmethod
    def init(cls, rng, hidden=64, r_max=10.0, activation="relu", state_dim=STATE_DIM, n_actions=N_ACTIONS):
        sizes = [state_dim + n_actions, hidden, hidden, 1]
        return cls(init_dense(sizes, rng, activation, "linear"), r_max)

    def __call__(self, states, actions) -> np.ndarray:
        out, _ = forward(self.net, model_inputs(states, actions))
        return self.r_max * np.tanh(out[:, 0] / self.r_max)

    def value_and_backward(self, states, actions, upstream):
        """Per-step rewards and parameter gradients of sum(upstream * rewards)."""
        out, cache = forward(self.net, model_inputs(states, actions))
        t = np.tanh(out[:, 0] / self.r_max)
        g = (np.asarray(upstream, dtype=np.float64) * (1.0 - t * t))[:, None]
        grads, _ = backward(self.net, cache, g)
        return self.r_max * t, grads

    def with_params(self, params) -> "RewardNet":
        return RewardNet(self.net.with_params(params), self.r_max)

    def save(self, path, segment_length: int, opt: AdamState | None = None) -> str:
        payload = {"net": checkpoint.net_to_dict(self.net), "r_max": self.r_max,
                   "segment_length": int(segment_length)}
        if opt is not None:
            payload["adam"] = checkpoint.adam_to_dict(opt)
        return checkpoint.save(path, REWARD_MAGIC, payload)

    @classmethod
    def load(cls, path):
        d = checkpoint.load(path, REWARD_MAGIC)
        opt = checkpoint.adam_from_dict(d["adam"]) if "adam" in d else None
        return cls(checkpoint.net_from_dict(d["net"]), float(d["r_max"])), int(d["segment_length"]), opt


@dataclass
class Segments:
    """Fixed-length windows: ``states`` is (M, h, state_dim), ``actions`` is (M, h)."""

    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.states.ndim != 3 or self.actions.shape != self.states.shape[:2]:
            raise ValueError("segments need states (M, h, d) and actions (M, h)")

    def __len__(self):
        return len(self.actions)

    @property
    def length(self) -> int:
        return self.actions.shape[1]

    def flat(self):
        return self.states.reshape(-1, self.states.shape[2]), self.actions.reshape(-1)

    def concat(self, other: "Segments") -> "Segments":
        return Segments(np.concatenate([self.states, other.states]), np.concatenate([self.actions, other.actions]))

    def take(self, idx) -> "Segments":
        return Segments(self.states[idx], self.actions[idx])


@dataclass
class WeightedSampleSet:
    segments: Segments
    log_weights: np.ndarray
    weights: np.ndarray


def trajectory_reward(reward_net: RewardNet, segment) -> float:
    """Sum of per-step rewards along one segment (``(states, actions)`` or a 1-segment ``Segments``)."""
    if isinstance(segment, Segments):
        states, actions = segment.flat()
    else:
        states, actions = segment
    if len(actions) == 0:
        raise ValueError("empty segment")
    return float(np.sum(reward_net(states, actions)))


def segment_rewards(reward_net: RewardNet, segs: Segments) -> np.ndarray:
    s, a = segs.flat()
    return reward_net(s, a).reshape(len(segs), segs.length).sum(axis=1)


def segment_log_probs(policy, segs: Segments) -> np.ndarray:
    """Sum over steps of log pi(a_t | s_t) for each segment."""
    s, a = segs.flat()
    logp = policy.log_probs(s)[np.arange(len(a)), a]
    return logp.reshape(len(segs), segs.length).sum(axis=1)


def importance_weights(reward_net: RewardNet, policy, segs: Segments) -> WeightedSampleSet:
    log_w = segment_rewards(reward_net, segs) - segment_log_probs(policy, segs)
    return WeightedSampleSet(segs, log_w, np.exp(log_w - logsumexp(log_w)))


def gcl_objective_and_grads(reward_net: RewardNet, expert: Segments, samples: Segments,
                            sample_log_pi: np.ndarray, l2: float = 0.0):
    """Loss to minimise (negated objective plus L2) and its exact gradient.

    Returns ``(loss, objective, normalised_weights, grads)``.
    """
    if len(expert) == 0 or len(samples) == 0:
        raise ValueError("expert and sample sets must be nonempty")
    if expert.length != samples.length:
        raise ValueError("expert and sample segments must share a length")
    n, m, h = len(expert), len(samples), expert.length
    se, ae = expert.flat()
    ss, as_ = samples.flat()
    states = np.concatenate([se, ss])
    actions = np.concatenate([ae, as_])
    r = reward_net(states, actions)
    r_exp = r[: n * h].reshape(n, h).sum(axis=1)
    r_smp = r[n * h:].reshape(m, h).sum(axis=1)
    log_w = r_smp - np.asarray(sample_log_pi, dtype=np.float64)
    lse = logsumexp(log_w)
    w = np.exp(log_w - lse)
    objective = float(np.mean(r_exp) - (lse - math.log(m)))
    upstream = np.concatenate([np.full(n * h, -1.0 / n), np.repeat(w, h)])
    _, grads = reward_net.value_and_backward(states, actions, upstream)
    params = reward_net.net.params
    loss = -objective
    if l2:
        loss += 0.5 * l2 * float(sum(np.sum(p * p) for p in params))
        grads = [g + l2 * p for g, p in zip(grads, params)]
    return loss, objective, w, grads


def gcl_gradient_with_weights(reward_net: RewardNet, expert: Segments, samples: Segments, weights):
    """Ascent direction mean_i grad R(expert_i) - sum_j w_j grad R(sample_j) for given weights."""
    n, h = len(expert), expert.length
    se, ae = expert.flat()
    ss, as_ = samples.flat()
    w = np.asarray(weights, dtype=np.float64) / np.sum(weights)
    upstream = np.concatenate([np.full(n * h, 1.0 / n), -np.repeat(w, samples.length)])
    _, grads = reward_net.value_and_backward(np.concatenate([se, ss]), np.concatenate([ae, as_]), upstream)
    return grads


def gcl_update(reward_net: RewardNet, opt: AdamState, expert: Segments, samples: Segments, policy,
               l2: float = 0.0) -> tuple[RewardNet, AdamState, float]:
    """One Adam step raising expert rewards and lowering importance-weighted sample rewards."""
    log_pi = segment_log_probs(policy, samples)
    _, objective, _, grads = gcl_objective_and_grads(reward_net, expert, samples, log_pi, l2)
    params, opt = adam_step(reward_net.net.params, grads, opt)
    return reward_net.with_params(params), opt, objective


def reward_optimizer(reward_net: RewardNet, lr: float) -> AdamState:
    return adam_init(reward_net.net.params, lr=lr, names=reward_net.net.param_names())


def segment_expert(trajectories, h: int, n: int, rng: np.random.Generator) -> Segments:
    """Draw ``n`` length-h windows uniformly over all windows of all trajectories."""
    if h < 1:
        raise ValueError("segment length must be >= 1")
    counts = np.array([max(0, len(tr) - h + 1) for tr in trajectories], dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise DegenerateDataError(f"no trajectory has at least {h} transitions")
    picks = rng.integers(0, total, size=n)
    bounds = np.cumsum(counts)
    which = np.searchsorted(bounds, picks, side="right")
    starts = picks - (bounds[which] - counts[which])
    states = np.stack([trajectories[i].states[s:s + h] for i, s in zip(which, starts)])
    actions = np.stack([trajectories[i].actions[s:s + h] for i, s in zip(which, starts)])
    return Segments(states, actions)
