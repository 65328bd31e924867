"""Discrete soft actor-critic with a conservative (CQL-style) critic.

Expectations over the six actions are computed exactly from the softmax
probabilities, both in the Bellman target and in the conservative penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .data import N_ACTIONS, STATE_DIM, ReplayBuffer
from .errors import NumericError, StateError
from .nn import (AdamState, DenseNet, adam_init, adam_step, backward, forward, init_dense,
                 log_softmax)

AGENT_MAGIC = "OMGRL-AGT v1"


@dataclass
class CqlConfig:
    alpha: float = 0.2
    lam: float = 0.5
    gamma: float = 0.99

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class AgentConfig:
    hidden: int = 64
    activation: str = "relu"
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    alpha_ent: float = 0.05
    tau: float = 0.005
    penalty_ceiling: float = 1e3
    state_dim: int = STATE_DIM
    n_actions: int = N_ACTIONS


@dataclass
class Agent:
    actor: DenseNet
    critic: DenseNet
    target: DenseNet
    actor_opt: AdamState
    critic_opt: AdamState
    config: AgentConfig = field(default_factory=AgentConfig)

    # --- policy interface -----------------------------------------------------------

    def logits(self, states) -> np.ndarray:
        _, cache = forward(self.actor, np.atleast_2d(states))
        return cache["pres"][-1]

    def probs(self, states) -> np.ndarray:
        out, _ = forward(self.actor, np.atleast_2d(states))
        return out

    def log_probs(self, states) -> np.ndarray:
        return log_softmax(self.logits(states))

    def q_values(self, states) -> np.ndarray:
        out, _ = forward(self.critic, np.atleast_2d(states))
        return out

    def act(self, state, rng: np.random.Generator) -> int:
        return int(sample_from_probs(self.probs(state), rng)[0])

    def act_greedy(self, state) -> int:
        return int(np.argmax(self.probs(state)[0]))

    def greedy_batch(self, states) -> np.ndarray:
        return np.argmax(self.probs(states), axis=1)

    # --- persistence ----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {"actor": checkpoint.net_to_dict(self.actor), "critic": checkpoint.net_to_dict(self.critic),
                "target": checkpoint.net_to_dict(self.target),
                "actor_opt": checkpoint.adam_to_dict(self.actor_opt),
                "critic_opt": checkpoint.adam_to_dict(self.critic_opt),
                "config": dict(vars(self.config))}

    @classmethod
    def from_dict(cls, d: dict) -> "Agent":
        return cls(checkpoint.net_from_dict(d["actor"]), checkpoint.net_from_dict(d["critic"]),
                   checkpoint.net_from_dict(d["target"]), checkpoint.adam_from_dict(d["actor_opt"]),
                   checkpoint.adam_from_dict(d["critic_opt"]), AgentConfig(**d["config"]))

    def save(self, path, cql: CqlConfig | None = None) -> str:
        payload = self.to_dict()
        if cql is not None:
            payload["cql"] = dict(vars(cql))
        return checkpoint.save(path, AGENT_MAGIC, payload)

    @classmethod
    def load(cls, path) -> tuple["Agent", CqlConfig | None]:
        d = checkpoint.load(path, AGENT_MAGIC)
        return cls.from_dict(d), (CqlConfig(**d["cql"]) if "cql" in d else None)


def init_agent(config: AgentConfig | None, rng: np.random.Generator) -> Agent:
    """Actor and critic are three fully connected layers each."""
    c = config or AgentConfig()
    sizes = [c.state_dim, c.hidden, c.hidden, c.n_actions]
    actor = init_dense(sizes, rng, c.activation, "softmax", last_layer_scale=0.01)
    critic = init_dense(sizes, rng, c.activation, "linear", last_layer_scale=0.1)
    return Agent(actor, critic, critic.copy(),
                 adam_init(actor.params, lr=c.lr_actor, names=actor.param_names()),
                 adam_init(critic.params, lr=c.lr_critic, names=critic.param_names()), c)


def sample_from_probs(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


# --- data mixture ---------------------------------------------------------------------

def sample_mixed_batch(d_batch: ReplayBuffer, d_sample: ReplayBuffer, n: int, lam: float,
                       rng: np.random.Generator) -> dict[str, np.ndarray]:
    """ceil(lam * n) transitions from logged data and the rest from model rollouts.

    Each row carries ``from_batch`` marking its origin.
    """
    n_b = math.ceil(lam * n - 1e-12)
    n_s = n - n_b
    parts = []
    if n_b:
        if len(d_batch) == 0:
            raise StateError("logged-data buffer is empty")
        b = d_batch.sample(min(n_b, len(d_batch)), rng)
        b["from_batch"] = np.ones(len(b["actions"]), dtype=bool)
        parts.append(b)
    if n_s:
        if len(d_sample) == 0:
            raise StateError("model-rollout buffer is empty")
        s = d_sample.sample(min(n_s, len(d_sample)), rng)
        s["from_batch"] = np.zeros(len(s["actions"]), dtype=bool)
        parts.append(s)
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# --- losses -----------------------------------------------------------------------------

@dataclass
class CriticTerms:
    loss: float
    bellman: float
    penalty: float
    grads: list[np.ndarray]


def bellman_target(target: DenseNet, actor: DenseNet, batch: dict, rewards, gamma: float,
                   alpha_ent: float) -> np.ndarray:
    """y = r + gamma * E_{a'~pi}[Q_target(s', a') - alpha_ent * log pi(a'|s')], no bootstrap at terminals."""
    s2 = batch["next_states"]
    q_t, _ = forward(target, s2)
    _, cache = forward(actor, s2)
    logp = log_softmax(cache["pres"][-1])
    p = np.exp(logp)
    v = np.sum(p * (q_t - alpha_ent * logp), axis=1)
    done = batch.get("terminals", np.zeros(len(s2), dtype=bool)).astype(np.float64)
    return np.asarray(rewards, dtype=np.float64) + gamma * (1.0 - done) * v


def critic_terms(critic: DenseNet, batch: dict, y: np.ndarray, pi: np.ndarray, alpha: float) -> CriticTerms:
    """Conservative critic objective for a fixed target ``y`` and policy probabilities ``pi``.

    loss = alpha * (E_s[sum_a pi(a|s) Q(s,a)] - E_logged[Q(s,a)]) + 0.5 * E[(Q(s,a) - y)^2]
    """
    s, a = batch["states"], batch["actions"]
    n = len(a)
    q, cache = forward(critic, s)
    rows = np.arange(n)
    q_sa = q[rows, a]
    td = q_sa - y
    bellman = 0.5 * float(np.mean(td * td))
    g = np.zeros_like(q)
    g[rows, a] += td / n
    from_batch = batch.get("from_batch", np.ones(n, dtype=bool))
    n_b = int(from_batch.sum())
    rho_term = float(np.mean(np.sum(pi * q, axis=1)))
    data_term = float(np.mean(q_sa[from_batch])) if n_b else 0.0
    penalty = alpha * (rho_term - data_term)
    if alpha:
        g += alpha * pi / n
        if n_b:
            g[rows[from_batch], a[from_batch]] -= alpha / n_b
    grads, _ = backward(critic, cache, g)
    return CriticTerms(bellman + penalty, bellman, penalty, grads)


def policy_terms(actor: DenseNet, states, q: np.ndarray, alpha_ent: float) -> tuple[float, list[np.ndarray]]:
    """Discrete SAC actor objective E_s[sum_a pi(a|s) (alpha_ent log pi(a|s) - Q(s,a))] for fixed Q."""
    p, cache = forward(actor, np.atleast_2d(states))
    logp = log_softmax(cache["pres"][-1])
    n = len(p)
    loss = float(np.sum(p * (alpha_ent * logp - q)) / n)
    upstream = (alpha_ent * (logp + 1.0) - q) / n
    grads, _ = backward(actor, cache, upstream)
    return loss, grads


# --- updates ---------------------------------------------------------------------------

def soft_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    return target.with_params([tau * o + (1.0 - tau) * t for o, t in zip(online.params, target.params)])


def conservative_critic_update(agent: Agent, batch: dict, rewards, cql: CqlConfig) -> tuple[float, float]:
    """One Adam step on the critic, then a soft target update. Returns (bellman, penalty)."""
    if len(batch["actions"]) == 0:
        raise ValueError("empty critic batch")
    c = agent.config
    y = bellman_target(agent.target, agent.actor, batch, rewards, cql.gamma, c.alpha_ent)
    if not np.all(np.isfinite(y)):
        bad = int(np.sum(~np.isfinite(y)))
        raise NumericError(f"non-finite Bellman target in {bad} of {len(y)} rows")
    pi = agent.probs(batch["states"])
    terms = critic_terms(agent.critic, batch, y, pi, cql.alpha)
    params, agent.critic_opt = adam_step(agent.critic.params, terms.grads, agent.critic_opt)
    agent.critic = agent.critic.with_params(params)
    agent.target = soft_update(agent.target, agent.critic, c.tau)
    return terms.bellman, terms.penalty


def policy_improvement(agent: Agent, states) -> float:
    """One Adam step on the actor with the critic held fixed."""
    if len(states) == 0:
        raise ValueError("empty state batch")
    q = agent.q_values(states)
    loss, grads = policy_terms(agent.actor, states, q, agent.config.alpha_ent)
    if not math.isfinite(loss):
        raise NumericError("non-finite policy loss")
    params, agent.actor_opt = adam_step(agent.actor.params, grads, agent.actor_opt)
    agent.actor = agent.actor.with_params(params)
    return loss
