"""Pydantic schemas for replay statistics, learning curves and run manifests."""

from enum import Enum
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator


# --- Enums ---


class EnvName(str, Enum):
    """Enumeration of supported tabular environments."""

    TAXI = "taxi"
    FROZENLAKE = "frozenlake"
    RANDOM = "random"


class SamplerKind(str, Enum):
    """Enumeration of replay sampling laws."""

    UNIFORM = "uniform"
    STRATIFIED = "stratified"


class AgentKind(str, Enum):
    """Enumeration of learning agents."""

    TABULAR = "tabular"
    DQN = "dqn"


class Normalization(str, Enum):
    """Normalisation constant used by the stratified expected update."""

    REACHABLE = "reachable"
    FULL = "full"


# --- Replay Schemas ---


class ReplayStats(BaseModel):
    """Occupancy and redundancy statistics of a replay memory."""

    model_config = ConfigDict(frozen=True)

    size: int = Field(..., ge=0)
    capacity: int = Field(..., ge=1)
    num_keys: int = Field(..., ge=0)
    max_multiplicity: int = Field(..., ge=0)
    redundancy_fraction: float = Field(..., ge=0.0, le=1.0)


# --- Learning Curve Schemas ---


class CurvePoint(BaseModel):
    """One evaluation point of a learning curve."""

    model_config = ConfigDict(frozen=True)

    env_step: int = Field(..., ge=0)
    mean_eval_return: float


class TrialResult(BaseModel):
    """Learning curve of one seeded trial."""

    env: EnvName
    sampler: SamplerKind
    agent: AgentKind
    seed: int = Field(..., ge=0)
    points: list[CurvePoint]
    gradient_steps: int = 0
    replay_stats: ReplayStats | None = None

    @model_validator(mode="after")
    def check_increasing_steps(self) -> "TrialResult":
        """Evaluation steps must be strictly increasing."""
        steps = [point.env_step for point in self.points]
        if any(later <= earlier for earlier, later in zip(steps, steps[1:])):
            raise ValueError("env_step values must be strictly increasing")
        return self

    @property
    def env_steps(self) -> list[int]:
        return [point.env_step for point in self.points]

    @property
    def returns(self) -> list[float]:
        return [point.mean_eval_return for point in self.points]


class Summary(BaseModel):
    """Across-seed aggregate of a set of learning curves."""

    env_steps: list[int]
    mean: list[float]
    std: list[float]
    stderr: list[float]
    auc: list[float]  # one per trial, in seed order
    num_trials: int = Field(..., ge=1)


# --- Run Schemas ---


class RunManifest(BaseModel):
    """Everything a finished run records next to its CSV output."""

    env: EnvName
    sampler: SamplerKind
    agent: AgentKind
    config: dict[str, Any]
    seeds: list[int]
    auc: list[float]
    random_baseline: float
    replay_stats: list[ReplayStats | None]


class RelativeScore(BaseModel):
    """Relative score of stratified against uniform replay for one (env, agent)."""

    env: EnvName
    agent: AgentKind
    uniform_score: float
    stratified_score: float
    random_score: float
    relative_score: float
    p_value: float


class ExperimentResult(BaseModel):
    """All trials of one experiment with their aggregate."""

    trials: list[TrialResult]
    summary: Summary
    random_baseline: float

    @property
    def seeds(self) -> list[int]:
        return [trial.seed for trial in self.trials]
