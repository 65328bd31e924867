"""Dosing policies and reward functions learned from logged treatment data."""

__version__ = "0.1.0"

from .agent import Agent, AgentConfig, CqlConfig, init_agent
from .data import (FEATURES, N_ACTIONS, STATE_DIM, Normalizer, ReplayBuffer, Trajectory, load_trajectories,
                   rp_reward)
from .dynamics import DynamicsConfig, DynamicsEnsemble, RolloutConfig, rollout_batch, select_top, train_dynamics
from .errors import (DegenerateDataError, DegenerateEstimateError, IngestionError, NumericError, OmgrlError,
                     ShapeError, StateError)
from .reward import RewardConfig, RewardNet
from .synth import SynthConfig, SynthEnv, generate_expert_dataset
from .train import TrainConfig, Trainer, train_combo, train_modelfree, train_omgrl
