import numpy as np
import pytest
from hypothesis import settings

from omgrl.data import apply_normalizer, fit_normalizer
from omgrl.synth import SynthConfig, generate_expert_dataset

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_raw():
    """Twelve synthetic patients with horizons between 7 and 15 transitions."""
    return generate_expert_dataset(SynthConfig(horizon=(7, 15), expert_eps=0.3, seed=3), 12)


@pytest.fixture(scope="session")
def small_norm(small_raw):
    norm = fit_normalizer(small_raw)
    return apply_normalizer(small_raw, norm), norm


@pytest.fixture(scope="session")
def tiny_ensemble(small_norm):
    """A quickly trained 2-of-3 ensemble; fidelity is irrelevant, only plumbing."""
    from omgrl.data import stack_transitions
    from omgrl.dynamics import DynamicsConfig, select_top, train_dynamics

    trajs, norm = small_norm
    cfg = DynamicsConfig(hidden=16, epochs=2, batch_size=64, n_train=3, n_keep=2)
    members = train_dynamics(stack_transitions(trajs[:9]), stack_transitions(trajs[9:]), cfg, seed=0)
    return select_top(members, 2, norm.fingerprint())


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
