"""Synthetic heparin-dosing MDP with known dynamics and reward.

The 16 state features follow a stable linear-Gaussian recursion driven by the
dose class. aPTT evolves as a scalar recursion (relaxation toward an untreated
baseline plus a dose-dependent push) and feeds back into the PT and INR
features, so a policy that only sees the state can still infer coagulation
status. The per-step reward is the clinical aPTT reward of the next reading.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from .data import (FEATURES, N_ACTIONS, STATE_DIM, PatientState, Trajectory, load_keyvalue,
                   make_trajectory, rp_reward, save_keyvalue)

PT_INDEX = FEATURES.index("pt")
INR_INDEX = FEATURES.index("inr")


@dataclass
class SynthConfig:
    state_dim: int = STATE_DIM
    n_actions: int = N_ACTIONS
    sigma: float = 0.05
    aptt_noise: float = 1.0
    gains: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0)
    drift: float = 0.1
    baseline_aptt: float = 30.0
    target_aptt: float = 80.0
    aptt_scale: float = 20.0
    pt_coupling: float = 1.0
    inr_coupling: float = 0.8
    spectral_radius: float = 0.95
    action_effect: float = 0.05
    init_scale: float = 0.5
    aptt_init: tuple[float, float] = (20.0, 140.0)
    horizon: tuple[int, int] = (7, 72)
    dose_edges: tuple[float, ...] = (200.0, 400.0, 600.0, 800.0, 1000.0)
    expert_eps: float = 0.05
    clinician_target: float = 80.0
    seed: int = 0

    def __post_init__(self):
        self.gains = tuple(float(g) for g in self.gains)
        self.aptt_init = tuple(float(a) for a in self.aptt_init)
        self.horizon = tuple(int(h) for h in self.horizon)
        self.dose_edges = tuple(float(e) for e in self.dose_edges)
        if self.sigma < 0 or self.aptt_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if len(self.gains) != self.n_actions or np.any(np.diff(self.gains) <= 0):
            raise ValueError("gains must be strictly increasing, one per action")
        if self.horizon[0] < 1 or self.horizon[1] < self.horizon[0]:
            raise ValueError("invalid horizon range")

    def save(self, path):
        save_keyvalue(path, {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()})

    @classmethod
    def load(cls, path) -> "SynthConfig":
        kv = load_keyvalue(path)
        kwargs = {}
        for f, default in asdict(cls()).items():
            if f not in kv:
                continue
            raw = kv[f]
            if isinstance(default, tuple):
                kwargs[f] = tuple(float(x) for x in raw.split(",")) if raw else ()
            elif isinstance(default, int):
                kwargs[f] = int(raw)
            else:
                kwargs[f] = float(raw)
        return cls(**kwargs)


@dataclass
class GroundTruthDynamics:
    A: np.ndarray
    B: np.ndarray
    coupling: np.ndarray

    @classmethod
    def from_config(cls, config: SynthConfig) -> "GroundTruthDynamics":
        rng = np.random.default_rng([config.seed, 7919])
        d = config.state_dim
        # free features rotate with uniform slow decay; coagulation rows are driven by aPTT alone
        free = [i for i in range(d) if i not in (PT_INDEX, INR_INDEX)]
        q, r = np.linalg.qr(rng.normal(size=(len(free), len(free))))
        q *= np.sign(np.diag(r))
        A = np.zeros((d, d))
        A[np.ix_(free, free)] = config.spectral_radius * q
        direction = rng.normal(size=d)
        direction[[PT_INDEX, INR_INDEX]] = 0.0
        direction /= np.linalg.norm(direction)
        B = config.action_effect * np.arange(config.n_actions)[:, None] * direction[None, :]
        c = np.zeros(d)
        c[PT_INDEX] = config.pt_coupling
        c[INR_INDEX] = config.inr_coupling
        return cls(A, B, c)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


class SynthEnv:
    """Ground-truth simulator. Vectorised methods take batches of states."""

    def __init__(self, config: SynthConfig | None = None, dynamics: GroundTruthDynamics | None = None):
        self.config = config or SynthConfig()
        self.dynamics = dynamics or GroundTruthDynamics.from_config(self.config)
        self.gains = np.asarray(self.config.gains)

    # aPTT recursion without noise
    def mean_next_aptt(self, aptt, actions):
        c = self.config
        aptt = np.asarray(aptt, dtype=np.float64)
        return aptt + c.drift * (c.baseline_aptt - aptt) + self.gains[np.asarray(actions)]

    def mean_reward(self, aptt, actions):
        """Noise-free reward of taking ``actions`` at the given aPTT."""
        return rp_reward(self.mean_next_aptt(aptt, actions))

    def step_batch(self, features, aptt, actions, rng: np.random.Generator | None = None):
        c, dyn = self.config, self.dynamics
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        actions = np.asarray(actions, dtype=np.int64).reshape(len(features))
        if np.any((actions < 0) | (actions >= c.n_actions)):
            raise ValueError("action index out of range")
        next_aptt = self.mean_next_aptt(np.asarray(aptt, dtype=np.float64).reshape(len(features)), actions)
        if c.aptt_noise > 0:
            next_aptt = next_aptt + c.aptt_noise * rng.normal(size=len(features))
        next_aptt = np.maximum(next_aptt, 5.0)
        nxt = features @ dyn.A.T + dyn.B[actions]
        nxt = nxt + np.outer((next_aptt - c.target_aptt) / c.aptt_scale, dyn.coupling)
        if c.sigma > 0:
            nxt = nxt + c.sigma * rng.normal(size=nxt.shape)
        return nxt, next_aptt, rp_reward(next_aptt)

    def step(self, state: PatientState, action: int, rng: np.random.Generator | None = None):
        nxt, aptt, r = self.step_batch(state.features[None], [state.aptt], [action], rng)
        return PatientState(nxt[0], float(aptt[0])), float(r[0])

    def initial_batch(self, n: int, rng: np.random.Generator):
        c = self.config
        aptt = rng.uniform(c.aptt_init[0], c.aptt_init[1], size=n)
        feats = c.init_scale * rng.normal(size=(n, c.state_dim))
        # coagulation features start consistent with aPTT, up to process noise
        feats[:, [PT_INDEX, INR_INDEX]] *= c.sigma / c.init_scale if c.init_scale > 0 else 0.0
        feats += np.outer((aptt - c.target_aptt) / c.aptt_scale, self.dynamics.coupling)
        return feats, aptt

    def initial_state(self, rng: np.random.Generator) -> PatientState:
        f, a = self.initial_batch(1, rng)
        return PatientState(f[0], float(a[0]))

    # --- scripted clinician ---------------------------------------------------------

    def expert_action_batch(self, aptt, rng: np.random.Generator | None = None, eps: float | None = None):
        """Pick the class whose predicted aPTT lands closest to the clinician's target; eps-random otherwise."""
        c = self.config
        eps = c.expert_eps if eps is None else eps
        aptt = np.asarray(aptt, dtype=np.float64).reshape(-1)
        pred = self.mean_next_aptt(aptt[:, None], np.arange(c.n_actions)[None, :])
        actions = np.argmin(np.abs(pred - c.clinician_target), axis=1)
        if eps > 0:
            if rng is None:
                raise ValueError("an rng is required when eps > 0")
            explore = rng.random(len(aptt)) < eps
            random_a = rng.integers(0, c.n_actions, size=len(aptt))
            actions = np.where(explore, random_a, actions)
        return actions.astype(np.int64)

    def expert_policy(self, state: PatientState, rng=None, eps: float | None = None) -> int:
        return int(self.expert_action_batch([state.aptt], rng, eps)[0])

    # --- dataset generation -----------------------------------------------------------

    def dose_for_class(self, actions, rng: np.random.Generator):
        edges = np.asarray(self.config.dose_edges)
        width = edges[1] - edges[0] if len(edges) > 1 else 1.0
        lo = np.concatenate([[edges[0] - width], edges])
        hi = np.concatenate([edges, [edges[-1] + width]])
        actions = np.asarray(actions)
        u = rng.random(actions.shape)
        # (lo, hi]: a dose never falls on the lower edge, so it rediscretises to its class
        return lo[actions] + (hi[actions] - lo[actions]) * (1.0 - u)

    def rollout_patient(self, patient_index: int, horizon: int | None = None, policy=None,
                        eps: float | None = None) -> Trajectory:
        """One patient episode. ``policy`` maps (features, aptt, rng) -> action batch."""
        c = self.config
        rng = np.random.default_rng([c.seed, patient_index])
        if horizon is None:
            horizon = int(rng.integers(c.horizon[0], c.horizon[1] + 1))
        f, a = self.initial_batch(1, rng)
        feats, aptts, actions = [f[0]], [a[0]], []
        for _ in range(horizon + 1):
            if policy is None:
                act = self.expert_action_batch(aptts[-1:], rng, eps)[0]
            else:
                act = int(np.asarray(policy(np.array(feats[-1:]), np.array(aptts[-1:]), rng))[0])
            actions.append(act)
            if len(actions) > horizon:
                break
            f, a, _ = self.step_batch(f, a, [act], rng)
            feats.append(f[0])
            aptts.append(a[0])
        doses = self.dose_for_class(np.array(actions), rng)
        return make_trajectory(f"P{patient_index:05d}", np.array(feats), np.array(aptts), doses,
                               np.array(actions[:-1]))


def generate_expert_dataset(config: SynthConfig, n_patients: int, horizon: int | None = None,
                            eps: float | None = None) -> list[Trajectory]:
    """Expert trajectories in the ingestion schema, one RNG stream per patient index."""
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    env = SynthEnv(config)
    return [env.rollout_patient(i, horizon=horizon, eps=eps) for i in range(n_patients)]


def brute_force_optimal_return(env: SynthEnv, aptt: float, h: int) -> float:
    """Best noise-free h-step return from ``aptt`` by enumerating all action sequences."""
    seqs = np.array(list(itertools.product(range(env.config.n_actions), repeat=h)))
    a = np.full(len(seqs), float(aptt))
    total = np.zeros(len(seqs))
    for j in range(h):
        a = env.mean_next_aptt(a, seqs[:, j])
        total += rp_reward(a)
    return float(total.max())
