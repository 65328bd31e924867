"""Policy evaluation: returns, WIS, treatment success, agreement and dosing tendencies."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import FEATURES, N_ACTIONS, Normalizer, stack_transitions
from .dynamics import DynamicsEnsemble, ensemble_sample_batch
from .errors import DegenerateEstimateError, StateError
from .nn import adam_init, adam_step, backward, forward, init_dense
from .synth import SynthEnv

log = logging.getLogger(__name__)

EPS_BEHAVIOR = 1e-3
RATIO_CLIP = (1e-4, 1e4)


@dataclass
class EvalReport:
    """Mean and spread of one metric; ``values`` holds one entry per seed (run)."""

    metric: str
    mean: float
    std: float
    values: list[float]
    episodes: int
    steps: int
    fingerprint: str = ""
    episode_values: list[float] = field(default_factory=list)

    @classmethod
    def from_values(cls, metric, episode_values, episodes, steps, fingerprint=""):
        """Single-seed report; ``std`` is the spread over episodes."""
        v = np.asarray(episode_values, dtype=np.float64)
        # identical values give exactly zero spread rather than rounding residue
        std = 0.0 if np.all(v == v[0]) else float(v.std())
        return cls(metric, float(v.mean()), std, [float(v.mean())], episodes, steps, fingerprint,
                   v.tolist())

    @classmethod
    def merge_seeds(cls, reports: list["EvalReport"]) -> "EvalReport":
        """Combine single-seed reports of one metric; ``std`` becomes the spread over seeds."""
        if not reports or len({r.metric for r in reports}) != 1:
            raise ValueError("need reports of a single metric")
        v = np.array([x for r in reports for x in r.values])
        return cls(reports[0].metric, float(v.mean()), float(v.std()), v.tolist(), reports[0].episodes,
                   reports[0].steps, reports[0].fingerprint)


# --- simulators ------------------------------------------------------------------------
# A simulator keeps a batch of live episodes. ``reset`` returns the observations the
# policy sees; ``step`` returns the next observations and the clinical reward.

class SynthSimulator:
    """Ground-truth environment started from a pool of raw initial states."""

    def __init__(self, env: SynthEnv, initial_features, initial_aptt, normalizer: Normalizer | None = None):
        self.env = env
        self.pool_f = np.atleast_2d(np.asarray(initial_features, dtype=np.float64))
        self.pool_a = np.asarray(initial_aptt, dtype=np.float64).reshape(-1)
        if len(self.pool_f) == 0:
            raise StateError("empty initial-state pool")
        self.normalizer = normalizer or Normalizer.identity(self.pool_f.shape[1])
        self.features = self.aptt = None

    @classmethod
    def from_trajectories(cls, env, trajectories, normalizer=None):
        if not trajectories:
            raise StateError("empty initial-state pool")
        return cls(env, np.stack([t.features[0] for t in trajectories]),
                   np.array([t.aptt[0] for t in trajectories]), normalizer)

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, len(self.pool_f), size=n)
        self.features, self.aptt = self.pool_f[idx].copy(), self.pool_a[idx].copy()
        return self.normalizer.apply(self.features)

    def step(self, actions, rng):
        self.features, self.aptt, r = self.env.step_batch(self.features, self.aptt, actions, rng)
        return self.normalizer.apply(self.features), np.asarray(r)


class ModelSimulator:
    """Learned ensemble started from a pool of (normalised) initial observations."""

    def __init__(self, ensemble: DynamicsEnsemble, initial_obs):
        self.ensemble = ensemble
        self.pool = np.atleast_2d(np.asarray(initial_obs, dtype=np.float64))
        if len(self.pool) == 0:
            raise StateError("empty initial-state pool")
        self.obs = None

    @classmethod
    def from_trajectories(cls, ensemble, trajectories):
        if not trajectories:
            raise StateError("empty initial-state pool")
        return cls(ensemble, np.stack([t.features[0] for t in trajectories]))

    def reset(self, n, rng):
        self.obs = self.pool[rng.integers(0, len(self.pool), size=n)].copy()
        return self.obs

    def step(self, actions, rng):
        self.obs, r, _ = ensemble_sample_batch(self.ensemble, self.obs, actions, rng)
        return self.obs, r


class ExpertPolicy:
    """The scripted clinician expressed as action probabilities over a live SynthSimulator."""

    def __init__(self, sim: SynthSimulator, eps: float = 0.0):
        self.sim, self.eps = sim, eps

    def probs(self, obs):
        a = self.sim.env.expert_action_batch(self.sim.aptt, eps=0.0)
        p = np.full((len(a), N_ACTIONS), self.eps / N_ACTIONS)
        p[np.arange(len(a)), a] += 1.0 - self.eps
        return p


class UniformPolicy:
    def probs(self, obs):
        return np.full((len(np.atleast_2d(obs)), N_ACTIONS), 1.0 / N_ACTIONS)


class ConstantPolicy:
    def __init__(self, action: int):
        self.action = action

    def probs(self, obs):
        p = np.zeros((len(np.atleast_2d(obs)), N_ACTIONS))
        p[:, self.action] = 1.0
        return p


def _draw(probs, rng):
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def greedy_actions(policy, obs) -> np.ndarray:
    return np.argmax(policy.probs(obs), axis=1)


def simulate(policy, sim, episodes: int, steps: int, rng: np.random.Generator, greedy: bool = False):
    """Run ``episodes`` parallel episodes; returns (obs, actions, rp_rewards) with a time axis."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    obs = sim.reset(episodes, rng)
    O = np.zeros((episodes, steps, obs.shape[1]))
    A = np.zeros((episodes, steps), dtype=np.int64)
    R = np.zeros((episodes, steps))
    for t in range(steps):
        p = policy.probs(obs)
        a = np.argmax(p, axis=1) if greedy else _draw(p, rng)
        O[:, t], A[:, t] = obs, a
        obs, r = sim.step(a, rng)
        R[:, t] = r
    return O, A, R


def evaluate_return(policy, sim, episodes: int, steps: int, reward_source="rp",
                    rng: np.random.Generator | None = None, greedy: bool = False,
                    metric: str | None = None) -> EvalReport:
    """Mean undiscounted return; ``reward_source`` is "rp" or a callable ``f(states, actions)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    O, A, R = simulate(policy, sim, episodes, steps, rng, greedy)
    if isinstance(reward_source, str):
        if reward_source != "rp":
            raise ValueError(f"unknown reward source {reward_source!r}")
        per_step = R
        name = metric or "return_rp"
    else:
        per_step = np.asarray(reward_source(O.reshape(-1, O.shape[2]), A.reshape(-1))).reshape(A.shape)
        name = metric or "return_rpsi"
    return EvalReport.from_values(name, per_step.sum(axis=1), episodes, steps)


# --- behaviour policy and WIS ----------------------------------------------------------

@dataclass
class BehaviorPolicy:
    net: object
    floor: float = EPS_BEHAVIOR
    accuracy: float = float("nan")

    def probs(self, states):
        out, _ = forward(self.net, np.atleast_2d(states))
        return out

    def floored_probs(self, states):
        return np.maximum(self.probs(states), self.floor)


def fit_behavior_policy(trajectories, epochs: int = 30, hidden: int = 64, lr: float = 1e-3,
                        batch_size: int = 128, holdout: float = 0.2, seed: int = 0,
                        floor: float = EPS_BEHAVIOR) -> BehaviorPolicy:
    """Softmax classifier of logged actions given states, fitted by cross-entropy."""
    d = stack_transitions(trajectories)
    x, y = d["states"], d["actions"]
    if len(y) == 0:
        raise ValueError("empty dataset")
    if np.unique(y).size == 1:
        log.warning("behaviour data contains a single action class")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_hold = int(round(holdout * len(y))) if len(y) > 4 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    net = init_dense([x.shape[1], hidden, hidden, N_ACTIONS], rng, "relu", "softmax", last_layer_scale=0.1)
    params = net.params
    opt = adam_init(params, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(train)
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            p, cache = forward(net, x[idx])
            g = np.zeros_like(p)
            rows = np.arange(len(idx))
            g[rows, y[idx]] = -1.0 / (np.maximum(p[rows, y[idx]], 1e-300) * len(idx))
            grads, _ = backward(net, cache, g)
            params, opt = adam_step(params, grads, opt)
            net = net.with_params(params)
    acc = float(np.mean(np.argmax(forward(net, x[hold])[0], axis=1) == y[hold])) if n_hold else float("nan")
    return BehaviorPolicy(net, floor, acc)


def wis_from_ratios(ratios, returns, clip=RATIO_CLIP) -> float:
    """Self-normalised estimate sum(rho * G) / sum(rho) after clipping the ratios."""
    rho = np.clip(np.asarray(ratios, dtype=np.float64), clip[0], clip[1])
    g = np.asarray(returns, dtype=np.float64)
    if len(rho) == 0:
        raise ValueError("no trajectories")
    if np.all(rho <= clip[0]):
        raise DegenerateEstimateError("every importance ratio sits at the clip floor")
    return float(np.sum(rho * g) / np.sum(rho))


def trajectory_log_ratios(eval_policy, behavior, trajectories, floor=EPS_BEHAVIOR) -> np.ndarray:
    out = []
    for tr in trajectories:
        rows = np.arange(len(tr))
        pe = eval_policy.probs(tr.states)[rows, tr.actions]
        pb = np.maximum(behavior.probs(tr.states)[rows, tr.actions], floor)
        with np.errstate(divide="ignore"):
            out.append(float(np.sum(np.log(pe) - np.log(pb))))
    return np.array(out)


def wis_estimate(eval_policy, behavior, trajectories, gamma: float = 0.99, clip=RATIO_CLIP,
                 floor: float = EPS_BEHAVIOR) -> float:
    if not trajectories:
        raise ValueError("no trajectories")
    log_rho = trajectory_log_ratios(eval_policy, behavior, trajectories, floor)
    rho = np.exp(np.clip(log_rho, math.log(clip[0]) - 1.0, math.log(clip[1]) + 1.0))
    returns = [tr.discounted_return(gamma) for tr in trajectories]
    return wis_from_ratios(rho, returns, clip)


# --- treatment success ------------------------------------------------------------------

def episode_success(rewards, threshold: float = 0.8, duration: int = 2) -> bool:
    """True iff some run of at least ``duration`` consecutive rewards exceeds ``threshold``."""
    run = 0
    for r in rewards:
        run = run + 1 if r > threshold else 0
        if run >= duration:
            return True
    return False


def success_rate(policy, sim, episodes: int = 380, steps: int = 36, threshold: float = 0.8,
                 duration: int = 2, rng: np.random.Generator | None = None) -> EvalReport:
    if duration > steps:
        raise ValueError("duration cannot exceed the episode length")
    rng = rng if rng is not None else np.random.default_rng(0)
    _, _, R = simulate(policy, sim, episodes, steps, rng)
    hits = [1.0 if episode_success(r, threshold, duration) else 0.0 for r in R]
    return EvalReport.from_values("success_rate", hits, episodes, steps)


def success_rate_logged(trajectories, threshold=0.8, duration=2) -> float:
    """Success rate of the logged (clinician) trajectories themselves."""
    return float(np.mean([episode_success(tr.rewards, threshold, duration) for tr in trajectories]))


# --- agreement and tendencies ----------------------------------------------------------

@dataclass
class AgreementResult:
    matrix: np.ndarray   # rows: clinician action, columns: policy action
    support: np.ndarray

    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.support == 0)]


def agreement_matrix(policy, trajectories) -> AgreementResult:
    if not trajectories:
        raise ValueError("no trajectories")
    d = stack_transitions(trajectories)
    chosen = greedy_actions(policy, d["states"])
    counts = np.zeros((N_ACTIONS, N_ACTIONS))
    np.add.at(counts, (d["actions"], chosen), 1.0)
    support = counts.sum(axis=1)
    matrix = np.divide(counts, support[:, None], out=np.zeros_like(counts), where=support[:, None] > 0)
    return AgreementResult(matrix, support.astype(np.int64))


@dataclass
class TendencyResult:
    indicator: str
    edges: np.ndarray
    counts: np.ndarray
    policy_mean: list       # None marks an empty bin
    clinician_mean: list


def dosing_tendency(policy, trajectories, indicator: str, bins: int = 10,
                    normalizer: Normalizer | None = None) -> TendencyResult:
    """Mean greedy-policy and logged dose class per equal-width bin of a raw indicator.

    ``trajectories`` carry raw features; ``normalizer`` maps them to policy inputs.
    """
    if indicator not in FEATURES and indicator != "aptt":
        raise ValueError(f"unknown indicator {indicator!r}")
    if bins < 2:
        raise ValueError("need at least two bins")
    d = stack_transitions(trajectories)
    values = d["aptt"] if indicator == "aptt" else d["states"][:, FEATURES.index(indicator)]
    obs = normalizer.apply(d["states"]) if normalizer is not None else d["states"]
    chosen = greedy_actions(policy, obs)
    lo, hi = float(values.min()), float(values.max())
    edges = np.linspace(lo, hi, bins + 1)
    if hi > lo:
        idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    else:
        idx = np.zeros(len(values), dtype=np.int64)
    counts = np.bincount(idx, minlength=bins)
    pol, cli = [], []
    for b in range(bins):
        mask = idx == b
        if counts[b] == 0:
            pol.append(None)
            cli.append(None)
        else:
            pol.append(float(np.mean(chosen[mask])))
            cli.append(float(np.mean(d["actions"][mask])))
    return TendencyResult(indicator, edges, counts, pol, cli)


# --- reward-quality helper ----------------------------------------------------------------

def true_reward_pairs(env: SynthEnv, trajectories_raw, normalizer: Normalizer, n: int, rng):
    """Held-out (obs, action, ground-truth reward) triples with uniformly random actions."""
    d = stack_transitions(trajectories_raw)
    idx = rng.integers(0, len(d["actions"]), size=n)
    actions = rng.integers(0, N_ACTIONS, size=n)
    return normalizer.apply(d["states"][idx]), actions, env.mean_reward(d["aptt"][idx], actions)


# --- report files ---------------------------------------------------------------------------

def write_reports(path, reports: list[EvalReport]):
    """One row per seed plus an aggregate row per metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "row", "value", "std", "episodes", "steps", "fingerprint"])
        for rep in reports:
            for i, v in enumerate(rep.values):
                w.writerow([rep.metric, i, repr(float(v)), "", rep.episodes, rep.steps, rep.fingerprint])
            w.writerow([rep.metric, "aggregate", repr(rep.mean), repr(rep.std), rep.episodes, rep.steps,
                        rep.fingerprint])


def write_long(path, rows):
    """Plot-ready long format: (metric, x, y, series)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "x", "y", "series"])
        for metric, x, y, series in rows:
            w.writerow([metric, x, "" if y is None else repr(float(y)), series])


def minmax_normalize(values: dict[str, float]) -> dict[str, float]:
    """Min-max scale a set of compared runs to [0, 1] (all zeros when they coincide)."""
    v = np.array(list(values.values()), dtype=np.float64)
    span = v.max() - v.min()
    return {k: (0.0 if span == 0 else float((x - v.min()) / span)) for k, x in values.items()}
