"""Sectioned key=value run configuration with ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, is_dataclass

from .agent import AgentConfig, CqlConfig
from .dynamics import DynamicsConfig, RolloutConfig
from .reward import RewardConfig
from .synth import SynthConfig
from .train import TrainConfig


@dataclass
class DataSection:
    csv: str = ""
    n_patients: int = 300
    train_ratio: float = 0.8
    val_ratio: float = 0.9
    min_horizon: int = 7


@dataclass
class OrchestratorSection:
    mode: str = "omgrl"
    epochs: int = 200
    reward_steps: int = 10
    batch_size: int = 128
    updates_per_epoch: int = 20
    eval_interval: int = 10
    eval_episodes: int = 100
    eval_steps: int = 36
    sample_capacity: int = 100_000
    checkpoint_every: int = 0
    resume: bool = False


@dataclass
class EvalSection:
    episodes: int = 100
    steps: int = 36
    success_episodes: int = 380
    success_steps: int = 36
    threshold: float = 0.8
    duration: int = 2
    bins: int = 10
    gamma: float = 0.99
    behavior_epochs: int = 30


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(expert_eps=0.3))
    dynamics: DynamicsConfig = field(default_factory=lambda: DynamicsConfig(epochs=30))
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    cql: CqlConfig = field(default_factory=CqlConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    SECTIONS = ("data", "synth", "dynamics", "rollout", "cql", "agent", "reward", "orchestrator", "eval")

    def train_config(self, strict: bool = False) -> TrainConfig:
        o = self.orchestrator
        return TrainConfig(mode=o.mode, epochs=o.epochs, reward_steps=o.reward_steps,
                           rollout=RolloutConfig(self.rollout.horizon, self.rollout.batch_size),
                           cql=CqlConfig(self.cql.alpha, self.cql.lam, self.cql.gamma),
                           agent=AgentConfig(**vars(self.agent)), reward=RewardConfig(**vars(self.reward)),
                           batch_size=o.batch_size, updates_per_epoch=o.updates_per_epoch,
                           eval_interval=o.eval_interval, eval_episodes=o.eval_episodes,
                           eval_steps=o.eval_steps, sample_capacity=o.sample_capacity, seed=self.seed,
                           strict=strict)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"seed": str(self.seed)}
        for name in self.SECTIONS:
            cp[name] = {f.name: _fmt(getattr(getattr(self, name), f.name)) for f in fields(getattr(self, name))}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            conv = type(default[0]) if default else float
            return tuple(conv(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def set_value(config: RunConfig, dotted: str, value: str):
    """Apply one ``section.key=value`` override (``seed`` may be given bare)."""
    if dotted in ("seed", "run.seed"):
        config.seed = int(value)
        return
    section, _, key = dotted.partition(".")
    if section not in RunConfig.SECTIONS or not key:
        raise ValueError(f"unknown configuration key {dotted!r}")
    obj = getattr(config, section)
    names = {f.name for f in fields(obj)}
    if key not in names:
        raise ValueError(f"unknown configuration key {dotted!r}")
    setattr(obj, key, _parse(value, getattr(obj, key), dotted))


def _revalidate(config: RunConfig):
    for name in RunConfig.SECTIONS:
        obj = getattr(config, name)
        if is_dataclass(obj) and hasattr(obj, "__post_init__"):
            obj.__post_init__()


def load_config(path=None, overrides=()) -> RunConfig:
    config = RunConfig()
    if path:
        cp = configparser.ConfigParser(interpolation=None)
        with open(path) as fh:
            cp.read_file(fh)
        for section in cp.sections():
            for key, value in cp[section].items():
                set_value(config, "seed" if section == "run" and key == "seed" else f"{section}.{key}", value)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        set_value(config, k.strip(), v)
    _revalidate(config)
    return config
