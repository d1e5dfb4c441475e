"""Configuration management for the replay benchmark using Pydantic Settings."""

import json
from functools import lru_cache
from pathlib import Path
from typing import Any

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from schemas import AgentKind, EnvName, SamplerKind

ENV_PREFIX = "SER_"


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging Configuration
    log_level: str = "INFO"
    debug: bool = False

    # Execution Configuration
    jobs: int = Field(1, ge=1)

    @property
    def effective_log_level(self) -> str:
        """Log level after applying the debug switch."""
        return "DEBUG" if self.debug else self.log_level.upper()


class ExperimentConfig(BaseSettings):
    """
    Seeded description of one experiment.

    Values come from, in decreasing precedence: keyword arguments (CLI
    flags), ``SER_*`` environment variables, a flat ``KEY=value`` config
    file, and the defaults below.
    """

    model_config = SettingsConfigDict(
        env_prefix=ENV_PREFIX,
        case_sensitive=False,
        extra="ignore",
    )

    # Experiment
    env: EnvName = EnvName.FROZENLAKE
    sampler: SamplerKind = SamplerKind.STRATIFIED
    agent: AgentKind = AgentKind.DQN
    num_seeds: int = Field(10, ge=1)
    total_env_steps: int = Field(20_000, ge=0)
    eval_every: int = Field(1_000, ge=1)
    eval_episodes: int = Field(20, ge=1)
    capacity: int | None = Field(None, ge=1)
    output_dir: Path = Path("results")
    step_limit: int | None = Field(None, ge=1)

    # Random MDP (env=random)
    random_num_states: int = Field(5, ge=1)
    random_num_actions: int = Field(2, ge=1)
    random_branching: int = Field(2, ge=1)
    random_mdp_seed: int = Field(0, ge=0)

    # Agent
    gamma: float = Field(0.99, ge=0.0, le=1.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    tabular_learning_rate: float = Field(0.5, ge=0.0, le=1.0)
    batch_size: int = Field(32, ge=1)
    warmup: int = Field(500, ge=0)
    train_frequency: int = Field(1, ge=1)
    sync_period: int = Field(500, ge=1)
    hidden_sizes: tuple[int, int] = (64, 64)
    epsilon_start: float = Field(1.0, ge=0.0, le=1.0)
    epsilon_end: float = Field(0.05, ge=0.0, le=1.0)
    epsilon_decay_fraction: float = Field(0.1, ge=0.0, le=1.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def check_consistency(self) -> "ExperimentConfig":
        """Cross-field checks and derived defaults."""
        if self.total_env_steps > 0 and self.eval_every > self.total_env_steps:
            raise ValueError("eval_every must not exceed total_env_steps")
        if self.epsilon_end > self.epsilon_start:
            raise ValueError("epsilon_end must not exceed epsilon_start")
        if self.random_branching > self.random_num_states:
            raise ValueError("random_branching must not exceed random_num_states")
        if any(width < 1 for width in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive")
        if self.capacity is None:
            # Effectively unbounded: nothing is ever evicted.
            self.capacity = max(self.total_env_steps, 1)
        return self

    @property
    def resolved_capacity(self) -> int:
        assert self.capacity is not None
        return self.capacity

    @property
    def epsilon_decay_steps(self) -> int:
        """Number of env steps over which epsilon decays linearly."""
        return max(1, int(round(self.epsilon_decay_fraction * self.total_env_steps)))

    @property
    def num_eval_points(self) -> int:
        return self.total_env_steps // self.eval_every + 1


def load_experiment_config(config_file: Path | None = None, **overrides: Any) -> ExperimentConfig:
    """
    Resolve an experiment configuration.

    Args:
        config_file: Optional flat ``SER_KEY=value`` file
        **overrides: Explicit values (typically CLI flags); ``None`` values are ignored

    Returns:
        ExperimentConfig: Validated configuration
    """
    explicit = {key: value for key, value in overrides.items() if value is not None}
    return ExperimentConfig(_env_file=config_file, **explicit)


def config_items(config: ExperimentConfig) -> dict[str, str]:
    """Flatten a configuration into ``SER_KEY -> text`` pairs, sorted by key; unset fields are left out."""
    items: dict[str, str] = {}
    for key, value in sorted(config.model_dump(mode="json").items()):
        if value is None:
            continue
        text = value if isinstance(value, str) else json.dumps(value)
        items[f"{ENV_PREFIX}{key.upper()}"] = text
    return items


def write_config_file(config: ExperimentConfig, path: Path) -> None:
    """Write the resolved configuration in the format ``--config`` accepts."""
    lines = [f"{key}={value}" for key, value in config_items(config).items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()
