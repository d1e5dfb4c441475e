"""
Pytest configuration and fixtures for the stratified replay tests.

Every random draw in the fixtures comes from a fixed seed, so tests are
deterministic.
"""

import importlib.util
import os
import sys
from pathlib import Path

# Set test environment variables BEFORE importing modules that use settings
# These can be overridden by actual environment variables
_test_env_defaults = {
    "SER_LOG_LEVEL": "WARNING",
    "SER_DEBUG": "false",
    "SER_JOBS": "1",
}

# Set defaults only if not already set
for key, value in _test_env_defaults.items():
    if key not in os.environ:
        os.environ[key] = value

import numpy as np
import pytest

# Get the service directory
_service_dir = Path(__file__).parent
if str(_service_dir) not in sys.path:
    # Worker processes of the harness import modules by name.
    sys.path.insert(0, str(_service_dir))


def _import_module(name: str, module_file: str):
    """Import a module from the service directory by file path."""
    module_path = _service_dir / module_file
    spec = importlib.util.spec_from_file_location(name, module_path)
    module = importlib.util.module_from_spec(spec)
    sys.modules[name] = module
    spec.loader.exec_module(module)
    return module


# Import modules with explicit file paths, dependencies first
errors_module = _import_module("errors", "errors.py")
schemas_module = _import_module("schemas", "schemas.py")
config_module = _import_module("config", "config.py")
replay_core_module = _import_module("replay_core", "replay_core.py")
tabular_envs_module = _import_module("tabular_envs", "tabular_envs.py")
agents_module = _import_module("agents", "agents.py")
bias_oracle_module = _import_module("bias_oracle", "bias_oracle.py")
reporting_module = _import_module("reporting", "reporting.py")
harness_module = _import_module("harness", "harness.py")
main_module = _import_module("main", "main.py")

ExperimentConfig = config_module.ExperimentConfig
Transition = replay_core_module.Transition
StratifiedReplayMemory = replay_core_module.StratifiedReplayMemory
UniformReplayMemory = replay_core_module.UniformReplayMemory
TabularMdp = tabular_envs_module.TabularMdp
ModelEntry = tabular_envs_module.ModelEntry


@pytest.fixture(autouse=True)
def _clear_settings_cache():
    """Each test sees settings built from its own environment."""
    config_module.get_settings.cache_clear()
    yield
    config_module.get_settings.cache_clear()


@pytest.fixture
def rng() -> np.random.Generator:
    """Provide a seeded generator."""
    return np.random.default_rng(12345)


# --- Environment Fixtures ---


@pytest.fixture(scope="session")
def frozenlake() -> TabularMdp:
    return tabular_envs_module.make_frozenlake()


@pytest.fixture(scope="session")
def taxi() -> TabularMdp:
    return tabular_envs_module.make_taxi()


@pytest.fixture
def random_mdp() -> TabularMdp:
    """Provide a small seeded random MDP (5 states, 2 actions, branching 2)."""
    return tabular_envs_module.make_random_mdp(np.random.default_rng(7), 5, 2, 2)


@pytest.fixture
def two_state_cycle() -> TabularMdp:
    """
    Provide a deterministic periodic chain 0 -> 1 -> 0.

    Action 0 moves to the other state with reward 1; action 1 stays with
    reward 0.
    """
    model = (
        ((ModelEntry(1.0, 1, 1.0, False),), (ModelEntry(1.0, 0, 0.0, False),)),
        ((ModelEntry(1.0, 0, 1.0, False),), (ModelEntry(1.0, 1, 0.0, False),)),
    )
    return TabularMdp(
        name="cycle",
        num_states=2,
        num_actions=2,
        model=model,
        initial_distribution=np.array([1.0, 0.0]),
    )


# --- Memory Fixtures ---


@pytest.fixture
def example_transitions() -> list[Transition]:
    """Provide t1=(0,0,1,1), t2=(0,0,0,2), t3=(1,1,5,0)."""
    return [
        Transition(0, 0, 1.0, 1, False),
        Transition(0, 0, 0.0, 2, False),
        Transition(1, 1, 5.0, 0, False),
    ]


@pytest.fixture
def example_memory(example_transitions) -> StratifiedReplayMemory:
    """Provide a capacity-4 stratified memory holding the example transitions."""
    memory = StratifiedReplayMemory(4)
    for transition in example_transitions:
        memory.insert(transition)
    return memory


# --- Config Fixtures ---


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Provide a fast FrozenLake configuration writing under tmp_path."""
    return ExperimentConfig(
        env="frozenlake",
        sampler="stratified",
        agent="tabular",
        num_seeds=2,
        total_env_steps=200,
        eval_every=100,
        eval_episodes=3,
        warmup=10,
        batch_size=4,
        output_dir=tmp_path / "run",
    )
