"""Desk-scale synthetic pipeline shared by the scripts, the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig, CqlConfig
from .data import (Normalizer, Trajectory, apply_normalizer, fit_normalizer, split_train_test,
                   stack_transitions)
from .dynamics import DynamicsConfig, DynamicsEnsemble, RolloutConfig, select_top, train_dynamics
from .evaluate import SynthSimulator, evaluate_return
from .reward import RewardConfig
from .synth import SynthConfig, SynthEnv, generate_expert_dataset
from .train import TrainConfig, Trainer, make_evaluator

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    # a deliberately imperfect clinician (aims low and explores) leaves room to improve on the logs
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(clinician_target=62.0, expert_eps=0.1))
    n_patients: int = 300
    train_ratio: float = 0.8
    val_ratio: float = 0.9
    dynamics: DynamicsConfig = field(default_factory=lambda: DynamicsConfig(epochs=30))


def batch_scenario(n_patients: int = 300) -> DeskConfig:
    """Logs from a sub-optimal clinician: room for offline RL to improve on the behavior policy."""
    return DeskConfig(synth=SynthConfig(clinician_target=62.0, expert_eps=0.1), n_patients=n_patients)


def expert_scenario(n_patients: int = 300) -> DeskConfig:
    """Noisy demonstrations of the true intent: the setting inverse RL assumes."""
    return DeskConfig(synth=SynthConfig(clinician_target=80.0, expert_eps=0.3), n_patients=n_patients)


def desk_train_config(mode: str, seed: int = 0, epochs: int = 200) -> TrainConfig:
    """Desk preset: the published loop with more critic/actor updates per epoch."""
    return TrainConfig(mode=mode, epochs=epochs, reward_steps=10, rollout=RolloutConfig(5, 64),
                       cql=CqlConfig(alpha=0.2, lam=0.5, gamma=0.99), agent=AgentConfig(),
                       reward=RewardConfig(), batch_size=128, updates_per_epoch=20, eval_interval=10,
                       eval_episodes=100, eval_steps=36, seed=seed)


@dataclass
class DeskData:
    env: SynthEnv
    raw_train: list[Trajectory]
    raw_test: list[Trajectory]
    normalizer: Normalizer
    train: list[Trajectory]
    test: list[Trajectory]

    def simulator(self) -> SynthSimulator:
        return SynthSimulator.from_trajectories(self.env, self.raw_test, self.normalizer)


def build_data(config: DeskConfig) -> DeskData:
    trajs = generate_expert_dataset(config.synth, config.n_patients)
    raw_train, raw_test = split_train_test(trajs, config.train_ratio, config.synth.seed)
    norm = fit_normalizer(raw_train)
    return DeskData(SynthEnv(config.synth), raw_train, raw_test, norm,
                    apply_normalizer(raw_train, norm), apply_normalizer(raw_test, norm))


def fit_ensemble(data: DeskData, config: DeskConfig, seed: int = 0) -> DynamicsEnsemble:
    """Train 7 members on a patient-level split of the training data and keep the best 5."""
    fit, val = split_train_test(data.train, config.val_ratio, seed + 1)
    members = train_dynamics(stack_transitions(fit), stack_transitions(val), config.dynamics, seed)
    return select_top(members, config.dynamics.n_keep, data.normalizer.fingerprint())


def run_training(data: DeskData, ensemble, config: TrainConfig):
    evaluator = make_evaluator(data.simulator, config)
    trainer = Trainer(config, data.train, ensemble, evaluator)
    t0 = time.time()
    trainer.train()
    log.info("%s seed %d: %d epochs in %.1fs", config.mode, config.seed, config.epochs, time.time() - t0)
    return trainer


def policy_return(policy, data: DeskData, episodes: int = 200, steps: int = 36, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 15485863])
    return evaluate_return(policy, data.simulator(), episodes, steps, "rp", rng).mean


def final_fraction_mean(history, fraction: float = 0.1) -> float:
    """Mean evaluated r_p return over rows in the last ``fraction`` of epochs."""
    n = len(history)
    cut = n - max(1, int(round(fraction * n)))
    vals = [r.eval_rp for r in history if r.epoch >= cut and r.eval_rp is not None]
    if not vals:
        raise ValueError("no evaluated epochs in the final fraction")
    return float(np.mean(vals))
