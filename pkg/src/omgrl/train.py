"""Training loops: guided reward learning (omgrl), its fixed-reward ablation (combo)
and the rollout-free comparator (modelfree).

All three share one epoch structure:

    rollout -> [K reward steps] -> critic updates -> actor updates -> [evaluation]

``modelfree`` is ``combo`` with no rollouts and every critic row drawn from the
logged data, so the two coincide under a shared seed by construction.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import checkpoint
from .agent import (Agent, AgentConfig, CqlConfig, conservative_critic_update, init_agent,
                    policy_improvement, sample_mixed_batch)
from .data import ReplayBuffer, Trajectory, buffer_from_trajectories
from .dynamics import DynamicsEnsemble, RolloutConfig, rollout_batch
from .errors import NumericError
from .reward import (RewardConfig, RewardNet, Segments, gcl_update, reward_optimizer,
                     segment_expert)

log = logging.getLogger(__name__)

RUN_MAGIC = "OMGRL-RUN v1"
MODES = ("omgrl", "combo", "modelfree")
METRIC_COLUMNS = ("epoch", "bellman_loss", "cql_penalty", "policy_loss", "reward_loss", "eval_rp", "eval_rpsi")


class TrainingAborted(NumericError):
    """A non-finite quantity stopped training; the last saved checkpoint is untouched."""


@dataclass
class TrainConfig:
    mode: str = "omgrl"
    epochs: int = 500
    reward_steps: int = 10
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    cql: CqlConfig = field(default_factory=CqlConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    batch_size: int = 128
    updates_per_epoch: int = 1
    eval_interval: int = 10
    eval_episodes: int = 100
    eval_steps: int = 36
    sample_capacity: int = 100_000
    seed: int = 0
    strict: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.mode == "omgrl" and self.reward_steps < 1:
            raise ValueError("omgrl mode needs at least one reward step per epoch")
        if self.batch_size < 1 or self.updates_per_epoch < 1:
            raise ValueError("batch_size and updates_per_epoch must be positive")
        if self.mode == "modelfree":
            # no rollouts, every row from the logged data
            self.rollout = RolloutConfig(self.rollout.horizon, 0)
            self.cql = CqlConfig(self.cql.alpha, 1.0, self.cql.gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["rollout"] = RolloutConfig(**d["rollout"])
        d["cql"] = CqlConfig(**d["cql"])
        d["agent"] = AgentConfig(**d["agent"])
        d["reward"] = RewardConfig(**d["reward"])
        return cls(**d)


@dataclass
class MetricRow:
    epoch: int
    bellman_loss: float
    cql_penalty: float
    policy_loss: float
    reward_loss: float | None = None
    eval_rp: float | None = None
    eval_rpsi: float | None = None

    def values(self):
        return [getattr(self, c) for c in METRIC_COLUMNS]


def write_metrics(path, rows: list[MetricRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row.epoch] + ["" if v is None else repr(float(v)) for v in row.values()[1:]])


def read_metrics(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [MetricRow(int(r["epoch"]), *[float(r[c]) if r[c] != "" else None for c in METRIC_COLUMNS[1:]])
                for r in reader]


@dataclass
class TrainState:
    agent: Agent
    reward_net: RewardNet | None
    reward_opt: object
    d_sample: ReplayBuffer
    rng: np.random.Generator
    epoch: int = 0
    reward_steps_done: int = 0
    history: list[MetricRow] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def init_state(config: TrainConfig, provenance: dict | None = None) -> TrainState:
    rng = np.random.default_rng(config.seed)
    agent = init_agent(config.agent, rng)
    reward_net = opt = None
    if config.mode == "omgrl":
        rc = config.reward
        reward_net = RewardNet.init(rng, rc.hidden, rc.r_max, rc.activation,
                                    config.agent.state_dim, config.agent.n_actions)
        opt = reward_optimizer(reward_net, rc.lr)
    return TrainState(agent, reward_net, opt, ReplayBuffer(config.sample_capacity, config.agent.state_dim), rng,
                      provenance=dict(provenance or {}))


# --- checkpointing ------------------------------------------------------------------------

def save_state(path, state: TrainState, config: TrainConfig) -> str:
    """Atomically write an ``OMGRL-RUN v1`` container."""
    payload = {
        "config": config.to_dict(),
        "agent": state.agent.to_dict(),
        "reward_net": None if state.reward_net is None else {
            "net": checkpoint.net_to_dict(state.reward_net.net), "r_max": state.reward_net.r_max,
            "adam": checkpoint.adam_to_dict(state.reward_opt)},
        "d_sample": state.d_sample.to_dict(),
        "rng": state.rng.bit_generator.state,
        "epoch": state.epoch,
        "reward_steps_done": state.reward_steps_done,
        "history": [[r.epoch] + r.values()[1:] for r in state.history],
        "provenance": state.provenance,
    }
    tmp = f"{path}.tmp"
    digest = checkpoint.save(tmp, RUN_MAGIC, payload)
    os.replace(tmp, path)
    return digest


def load_state(path) -> tuple[TrainState, TrainConfig]:
    d = checkpoint.load(path, RUN_MAGIC)
    config = TrainConfig.from_dict(d["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = d["rng"]
    rn = d["reward_net"]
    reward_net = opt = None
    if rn is not None:
        reward_net = RewardNet(checkpoint.net_from_dict(rn["net"]), float(rn["r_max"]))
        opt = checkpoint.adam_from_dict(rn["adam"])
    history = [MetricRow(int(h[0]), *h[1:]) for h in d["history"]]
    state = TrainState(Agent.from_dict(d["agent"]), reward_net, opt, ReplayBuffer.from_dict(d["d_sample"]), rng,
                       int(d["epoch"]), int(d["reward_steps_done"]), history, d["provenance"])
    return state, config


# --- the epoch loop ---------------------------------------------------------------------

def _finite(*values):
    return all(v is None or math.isfinite(v) for v in values)


def _rollout_segments(res, expert: list[Trajectory], n_min: int, h: int, rng) -> Segments:
    segs = Segments(res.states, res.actions)
    if len(segs) < n_min:
        # too few surviving branches: pad with logged windows so the partition estimate is defined
        segs = segs.concat(segment_expert(expert, h, n_min - len(segs), rng))
    return segs


class Trainer:
    """Runs the epoch loop over in-memory data.

    ``d_batch`` holds the logged trajectories (normalised features).
    ``evaluator``, if given, maps ``(agent, reward_net, epoch)`` to
    ``(eval_rp, eval_rpsi)`` and is called every ``eval_interval`` epochs.
    """

    def __init__(self, config: TrainConfig, d_batch: list[Trajectory], ensemble: DynamicsEnsemble | None = None,
                 evaluator=None, state: TrainState | None = None):
        self.config = config
        if not d_batch:
            raise ValueError("the logged dataset is empty")
        if config.rollout.batch_size > 0 and ensemble is None:
            raise ValueError(f"mode {config.mode!r} with rollouts needs a dynamics ensemble")
        self.trajectories = d_batch
        self.d_batch = buffer_from_trajectories(d_batch)
        self.ensemble = ensemble
        self.evaluator = evaluator
        self.state = state or init_state(config, {"d_batch_size": len(self.d_batch),
                                                  "n_trajectories": len(d_batch)})

    def run_epoch(self) -> MetricRow:
        c, st = self.config, self.state
        rng = st.rng
        # (1) model rollouts from logged start states
        res = None
        if c.rollout.batch_size > 0:
            res = rollout_batch(self.ensemble, st.agent, self.d_batch, c.rollout, st.d_sample, rng)
        # (2) reward learning on current-epoch rollouts against logged windows
        reward_obj = None
        if c.mode == "omgrl":
            h = c.rollout.horizon
            samples = _rollout_segments(res, self.trajectories, 1, h, rng)
            for _ in range(c.reward_steps):
                expert = segment_expert(self.trajectories, h, c.reward.n_expert, rng)
                # the partition estimate runs over rollouts together with the expert batch
                st.reward_net, st.reward_opt, reward_obj = gcl_update(
                    st.reward_net, st.reward_opt, expert, samples.concat(expert), st.agent, c.reward.l2)
                st.reward_steps_done += 1
            if not math.isfinite(reward_obj):
                raise TrainingAborted(f"epoch {st.epoch}: non-finite reward objective")
        # (3) conservative critic and (4) actor updates with the reward frozen
        bell = pen = pol = 0.0
        for _ in range(c.updates_per_epoch):
            batch = sample_mixed_batch(self.d_batch, st.d_sample, c.batch_size, c.cql.lam, rng)
            rewards = batch["rewards"] if c.mode != "omgrl" else st.reward_net(batch["states"], batch["actions"])
            b, p = conservative_critic_update(st.agent, batch, rewards, c.cql)
            if not _finite(b, p) or abs(p) > c.agent.penalty_ceiling * max(1.0, c.cql.alpha):
                raise TrainingAborted(f"epoch {st.epoch}: critic diverged (bellman={b}, penalty={p})")
            pl = policy_improvement(st.agent, batch["states"])
            bell += b / c.updates_per_epoch
            pen += p / c.updates_per_epoch
            pol += pl / c.updates_per_epoch
        row = MetricRow(st.epoch, bell, pen, pol, None if reward_obj is None else -reward_obj)
        # (5) evaluation
        if self.evaluator is not None and c.eval_interval > 0 and (st.epoch + 1) % c.eval_interval == 0:
            row.eval_rp, row.eval_rpsi = self.evaluator(st.agent, st.reward_net, st.epoch)
        if not _finite(*row.values()[1:]):
            raise TrainingAborted(f"epoch {st.epoch}: non-finite metrics {row}")
        st.history.append(row)
        st.epoch += 1
        return row

    def train(self, epochs: int | None = None, checkpoint_path=None, checkpoint_every: int = 0) -> TrainState:
        """Run until ``epochs`` total epochs have completed (defaults to the config)."""
        target = self.config.epochs if epochs is None else epochs
        while self.state.epoch < target:
            try:
                row = self.run_epoch()
            except NumericError as exc:
                raise TrainingAborted(str(exc)) from exc
            log.debug("epoch %d %s", row.epoch, row)
            if checkpoint_path and checkpoint_every and self.state.epoch % checkpoint_every == 0:
                save_state(checkpoint_path, self.state, self.config)
        if checkpoint_path:
            save_state(checkpoint_path, self.state, self.config)
        return self.state


def make_evaluator(sim_factory, config: TrainConfig):
    """Evaluator over a fresh simulator with an RNG derived from (seed, epoch)."""
    from .evaluate import evaluate_return

    def evaluate(agent, reward_net, epoch):
        rng = np.random.default_rng([config.seed, 104729, epoch])
        sim = sim_factory()
        rp = evaluate_return(agent, sim, config.eval_episodes, config.eval_steps, "rp", rng)
        rpsi = None
        if reward_net is not None:
            rng = np.random.default_rng([config.seed, 104729, epoch])
            rpsi = evaluate_return(agent, sim_factory(), config.eval_episodes, config.eval_steps,
                                   reward_net, rng).mean
        return rp.mean, rpsi

    return evaluate


def train_omgrl(d_expert, ensemble, config: TrainConfig, evaluator=None) -> TrainState:
    return Trainer(replace(config, mode="omgrl"), d_expert, ensemble, evaluator).train()


def train_combo(d_batch, ensemble, config: TrainConfig, evaluator=None) -> TrainState:
    return Trainer(replace(config, mode="combo"), d_batch, ensemble, evaluator).train()


def train_modelfree(d_batch, config: TrainConfig, evaluator=None) -> TrainState:
    return Trainer(replace(config, mode="modelfree"), d_batch, None, evaluator).train()
