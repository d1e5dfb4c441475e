"""Command-line entry point: ``ser run``, ``ser oracle`` and ``ser compare``."""

import logging
import sys
from enum import Enum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, CliApp, CliSubCommand, SettingsConfigDict, SettingsError

from bias_oracle import epsilon_greedy_policy, oracle_report, uniform_policy
from config import Settings, get_settings, load_experiment_config
from errors import SerError
from harness import build_env, compare_runs, run_experiment
from reporting import write_run
from schemas import AgentKind, EnvName, SamplerKind
from tabular_envs import dump_model, value_iteration

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class PolicyKind(str, Enum):
    """Behaviour policies the oracle can analyse."""

    UNIFORM = "uniform"
    EPSILON_GREEDY = "epsilon-greedy"


def configure_logging(settings: Settings) -> None:
    """Route all log records to stderr at the configured level."""
    logging.basicConfig(
        level=settings.effective_log_level,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


# --- Commands ---


class RunCommand(BaseModel):
    """Run seeded trials and write CSV, SVG and manifest files."""

    model_config = ConfigDict(populate_by_name=True)

    env: EnvName | None = None
    sampler: SamplerKind | None = None
    agent: AgentKind | None = None
    seeds: int | None = Field(None, ge=1, description="number of seeds, run as 0..n-1")
    steps: int | None = Field(None, ge=0, description="environment steps per trial")
    eval_every: int | None = Field(None, ge=1)
    eval_episodes: int | None = Field(None, ge=1)
    capacity: int | None = Field(None, ge=1, description="replay capacity (default: steps)")
    out: Path | None = Field(None, description="output directory")
    config_file: Path | None = Field(None, alias="config", description="SER_KEY=value file")
    jobs: int | None = Field(None, ge=1, description="worker processes")

    def cli_cmd(self) -> None:
        config = load_experiment_config(
            self.config_file,
            env=self.env,
            sampler=self.sampler,
            agent=self.agent,
            num_seeds=self.seeds,
            total_env_steps=self.steps,
            eval_every=self.eval_every,
            eval_episodes=self.eval_episodes,
            capacity=self.capacity,
            output_dir=self.out,
        )
        jobs = self.jobs or get_settings().jobs
        logger.info(
            "Running %d seeds of %s/%s/%s for %d steps with %d job(s)",
            config.num_seeds,
            config.env.value,
            config.agent.value,
            config.sampler.value,
            config.total_env_steps,
            jobs,
        )
        result = run_experiment(config, jobs=jobs)
        write_run(config, result, config.output_dir)


class OracleCommand(BaseModel):
    """Print occupancy and expected-update tables for a behaviour policy."""

    model_config = ConfigDict(populate_by_name=True)

    env: EnvName = EnvName.FROZENLAKE
    policy: PolicyKind = PolicyKind.UNIFORM
    epsilon: float = Field(0.1, ge=0.0, le=1.0, description="exploration of the epsilon-greedy policy")
    alpha: float = Field(1.0, gt=0.0, le=1.0)
    config_file: Path | None = Field(None, alias="config", description="SER_KEY=value file")
    dump_model: Path | None = Field(None, description="also write the model listing here")

    def cli_cmd(self) -> None:
        config = load_experiment_config(self.config_file, env=self.env)
        mdp = build_env(config)
        if self.policy is PolicyKind.UNIFORM:
            policy = uniform_policy(mdp)
        else:
            policy = epsilon_greedy_policy(value_iteration(mdp, config.gamma), self.epsilon)
        if self.dump_model is not None:
            with self.dump_model.open("w", encoding="utf-8") as stream:
                dump_model(mdp, stream)
            logger.info("Wrote model listing to %s", self.dump_model)
        sys.stdout.write(oracle_report(mdp, policy, gamma=config.gamma, alpha=self.alpha))


class CompareCommand(BaseModel):
    """Merge run directories into one plot and a relative-score table."""

    model_config = ConfigDict(populate_by_name=True)

    inputs: list[Path] = Field(..., alias="in", description="run directories")
    out: Path = Field(..., description="directory for comparison.svg and relative_scores.csv")

    def cli_cmd(self) -> None:
        scores = compare_runs(self.inputs, self.out)
        for score in scores:
            logger.info(
                "%s/%s relative score %.1f (p=%.4f)",
                score.env.value,
                score.agent.value,
                score.relative_score,
                score.p_value,
            )


class SerCli(BaseSettings):
    """Stratified experience replay benchmark."""

    model_config = SettingsConfigDict(
        env_prefix="SER_CLI_",
        cli_prog_name="ser",
        cli_kebab_case=True,
        cli_exit_on_error=False,
        extra="ignore",
    )

    run: CliSubCommand[RunCommand]
    oracle: CliSubCommand[OracleCommand]
    compare: CliSubCommand[CompareCommand]

    def cli_cmd(self) -> None:
        CliApp.run_subcommand(self)


def main(argv: list[str] | None = None) -> int:
    """
    Parse ``argv`` and run the selected command.

    Returns:
        int: 0 on success, 1 after logging a one-line diagnostic
    """
    configure_logging(get_settings())
    try:
        CliApp.run(SerCli, cli_args=sys.argv[1:] if argv is None else argv)
    except ValidationError as exc:
        logger.error("invalid configuration: %s", "; ".join(_describe(error) for error in exc.errors()))
        return 1
    except (SerError, SettingsError, OSError, ZeroDivisionError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


def _describe(error: dict) -> str:
    location = ".".join(str(part) for part in error.get("loc", ()))
    return f"{location}: {error.get('msg', '')}" if location else str(error.get("msg", ""))


if __name__ == "__main__":
    sys.exit(main())
