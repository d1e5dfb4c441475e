"""Seeded experiment runner: single trials, multi-seed experiments and run comparison."""

import logging
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import repeat
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import integrate, stats

from agents import DqnAgent, EpsilonSchedule, QTable, TabularAgent
from config import ExperimentConfig
from errors import SerError, TrialError
from replay_core import ReplayMemory, Transition, make_memory
from reporting import emit_svg_plot, load_run, write_relative_scores
from schemas import (
    AgentKind,
    CurvePoint,
    EnvName,
    ExperimentResult,
    RelativeScore,
    SamplerKind,
    Summary,
    TrialResult,
)
from tabular_envs import (
    EpisodeContext,
    TabularMdp,
    make_frozenlake,
    make_random_mdp,
    make_taxi,
    reset,
    step,
)

logger = logging.getLogger(__name__)


class Learner(Protocol):
    """What the trial loop needs from an agent."""

    gradient_steps: int

    def act(self, state: int, rng: np.random.Generator) -> int: ...

    def greedy_action(self, state: int) -> int: ...

    def train_step(self, memory: ReplayMemory, rng: np.random.Generator) -> float | None: ...


@dataclass(frozen=True)
class TrialStreams:
    """Independent random streams of one trial, all derived from its seed."""

    env: np.random.Generator
    init: np.random.Generator
    explore: np.random.Generator
    replay: np.random.Generator
    eval: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "TrialStreams":
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.default_rng(child) for child in children))


# --- Builders ---


def build_env(config: ExperimentConfig) -> TabularMdp:
    """Environment named by the configuration, with any step-limit override applied."""
    if config.env is EnvName.TAXI:
        mdp = make_taxi()
    elif config.env is EnvName.FROZENLAKE:
        mdp = make_frozenlake()
    else:
        mdp = make_random_mdp(
            np.random.default_rng(config.random_mdp_seed),
            config.random_num_states,
            config.random_num_actions,
            config.random_branching,
        )
    if config.step_limit is not None:
        mdp = mdp.with_step_limit(config.step_limit)
    return mdp


def build_agent(config: ExperimentConfig, mdp: TabularMdp, rng: np.random.Generator) -> Learner:
    """Fresh agent for one trial; ``rng`` is the trial's initialisation stream."""
    schedule = EpsilonSchedule(
        config.epsilon_start, config.epsilon_end, config.epsilon_decay_steps
    )
    if config.agent is AgentKind.TABULAR:
        return TabularAgent(
            table=QTable.zeros(
                mdp.num_states, mdp.num_actions, config.tabular_learning_rate, config.gamma
            ),
            schedule=schedule,
            batch_size=config.batch_size,
            warmup=config.warmup,
            train_frequency=config.train_frequency,
        )
    return DqnAgent.create(
        mdp.num_states,
        mdp.num_actions,
        rng,
        hidden_sizes=config.hidden_sizes,
        learning_rate=config.learning_rate,
        beta1=config.adam_beta1,
        beta2=config.adam_beta2,
        adam_epsilon=config.adam_epsilon,
        sync_period=config.sync_period,
        schedule=schedule,
        gamma=config.gamma,
        batch_size=config.batch_size,
        warmup=config.warmup,
        train_frequency=config.train_frequency,
    )


# --- Evaluation ---


def evaluate_policy(
    mdp: TabularMdp,
    choose_action: Callable[[int], int],
    episodes: int,
    rng: np.random.Generator,
) -> float:
    """Mean undiscounted return of ``episodes`` full episodes."""
    ctx = EpisodeContext.for_mdp(mdp)
    total = 0.0
    for _ in range(episodes):
        state = reset(mdp, ctx, rng)
        while not ctx.finished:
            state, reward, _, _ = step(mdp, ctx, rng, choose_action(state))
            total += reward
    return total / episodes


def random_baseline(config: ExperimentConfig) -> float:
    """Score of the uniform-random agent under the same evaluation protocol."""
    mdp = build_env(config)
    scores = []
    for seed in range(config.num_seeds):
        streams = TrialStreams.from_seed(seed)

        def random_action(_: int, rng: np.random.Generator = streams.explore) -> int:
            return int(rng.integers(mdp.num_actions))

        scores.append(evaluate_policy(mdp, random_action, config.eval_episodes, streams.eval))
    return float(np.mean(scores))


# --- Trials ---


def run_trial(config: ExperimentConfig, seed: int) -> TrialResult:
    """
    Train one agent from scratch and record its learning curve.

    Acting, storing and training are interleaved one env step at a time.
    Greedy evaluation runs before the first step and after every
    ``eval_every`` steps. Every random draw comes from a stream derived
    from ``seed``, so the result is fully determined by (config, seed).

    Args:
        config: Validated experiment configuration
        seed: Trial seed

    Returns:
        TrialResult: Learning curve plus final replay statistics
    """
    mdp = build_env(config)
    streams = TrialStreams.from_seed(seed)
    agent = build_agent(config, mdp, streams.init)
    memory = make_memory(config.sampler, config.resolved_capacity)
    ctx = EpisodeContext.for_mdp(mdp)

    def evaluate() -> float:
        return evaluate_policy(mdp, agent.greedy_action, config.eval_episodes, streams.eval)

    points = [CurvePoint(env_step=0, mean_eval_return=evaluate())]
    state = reset(mdp, ctx, streams.env)
    for env_step in range(1, config.total_env_steps + 1):
        action = agent.act(state, streams.explore)
        next_state, reward, terminal, truncated = step(mdp, ctx, streams.env, action)
        memory.insert(Transition(state, action, reward, next_state, terminal))
        agent.train_step(memory, streams.replay)
        state = reset(mdp, ctx, streams.env) if terminal or truncated else next_state
        if env_step % config.eval_every == 0:
            points.append(CurvePoint(env_step=env_step, mean_eval_return=evaluate()))

    replay_stats = memory.stats()
    logger.debug("Seed %d replay statistics: %s", seed, replay_stats)
    return TrialResult(
        env=config.env,
        sampler=config.sampler,
        agent=config.agent,
        seed=seed,
        points=points,
        gradient_steps=agent.gradient_steps,
        replay_stats=replay_stats,
    )


def _run_seed(config: ExperimentConfig, seed: int) -> TrialResult:
    logger.info("Starting trial seed=%d (%s/%s/%s)", seed, config.env.value, config.agent.value, config.sampler.value)
    try:
        result = run_trial(config, seed)
    except TrialError:
        raise
    except (SerError, ValueError, ArithmeticError) as exc:
        raise TrialError(seed, str(exc)) from exc
    logger.info("Finished trial seed=%d auc=%.4f", seed, area_under_curve(result))
    return result


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """
    Run seeds ``0 .. num_seeds - 1`` and aggregate them.

    With ``jobs > 1`` trials run in worker processes; results come back in
    seed order and are identical to a serial run.
    """
    seeds = range(config.num_seeds)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_seed, repeat(config), seeds))
    else:
        trials = [_run_seed(config, seed) for seed in seeds]
    return ExperimentResult(
        trials=trials,
        summary=summarize(trials),
        random_baseline=random_baseline(config),
    )


# --- Statistics ---


def area_under_curve(trial: TrialResult) -> float:
    """Trapezoidal area under the curve divided by its step span (a mean return)."""
    steps = np.asarray(trial.env_steps, dtype=np.float64)
    returns = np.asarray(trial.returns, dtype=np.float64)
    if len(steps) == 1:
        return float(returns[0])
    return float(integrate.trapezoid(returns, steps) / (steps[-1] - steps[0]))


def summarize(trials: Sequence[TrialResult]) -> Summary:
    """Per-point mean, standard deviation and standard error across trials."""
    if not trials:
        raise ValueError("cannot summarise zero trials")
    env_steps = trials[0].env_steps
    if any(trial.env_steps != env_steps for trial in trials):
        raise ValueError("trials were evaluated at different env steps")
    returns = np.array([trial.returns for trial in trials], dtype=np.float64)
    if len(trials) > 1:
        std = returns.std(axis=0, ddof=1)
        stderr = std / np.sqrt(len(trials))
    else:
        std = stderr = np.zeros(len(env_steps))
    return Summary(
        env_steps=env_steps,
        mean=returns.mean(axis=0).tolist(),
        std=std.tolist(),
        stderr=stderr.tolist(),
        auc=[area_under_curve(trial) for trial in trials],
        num_trials=len(trials),
    )


def relative_score(stratified: float, uniform: float, random: float) -> float:
    """100 x (stratified − random) / (uniform − random)."""
    if uniform == random:
        raise ZeroDivisionError("relative score undefined: uniform score equals random score")
    return 100.0 * (stratified - random) / (uniform - random)


def welch_comparison(treatment: Sequence[float], control: Sequence[float]) -> tuple[float, float]:
    """Welch t statistic and one-sided p-value for mean(treatment) > mean(control)."""
    result = stats.ttest_ind(treatment, control, equal_var=False, alternative="greater")
    return float(result.statistic), float(result.pvalue)


# --- Comparison ---


def compare_runs(input_dirs: Iterable[Path], out_dir: Path) -> list[RelativeScore]:
    """
    Merge finished runs into one plot and a relative-score table.

    Runs are grouped by (env, agent); a group is scored when it holds one
    uniform and one stratified run and its uniform score differs from the
    random baseline. Writes ``comparison.svg`` and
    ``relative_scores.csv`` under ``out_dir``.

    Raises:
        SerError: If no directory is given or two runs share env, agent and sampler
    """
    directories = [Path(directory) for directory in input_dirs]
    if not directories:
        raise SerError("compare needs at least one run directory")

    runs = []
    sources: dict[str, Path] = {}
    for directory in directories:
        manifest, trials = load_run(directory)
        label = f"{manifest.env.value}/{manifest.agent.value}/{manifest.sampler.value}"
        if label in sources:
            raise SerError(f"{sources[label]} and {directory} are both {label} runs")
        sources[label] = directory
        runs.append((manifest, trials))

    curves = []
    groups: dict[tuple[EnvName, AgentKind], dict[SamplerKind, tuple[list[float], float]]] = {}
    for manifest, trials in sorted(runs, key=lambda run: (run[0].env.value, run[0].agent.value, run[0].sampler.value)):
        label = f"{manifest.env.value}/{manifest.agent.value}/{manifest.sampler.value}"
        curves.append((label, summarize(trials)))
        groups.setdefault((manifest.env, manifest.agent), {})[manifest.sampler] = (
            manifest.auc,
            manifest.random_baseline,
        )

    scores = []
    for (env, agent), by_sampler in sorted(groups.items(), key=lambda item: (item[0][0].value, item[0][1].value)):
        if len(by_sampler) < 2:
            logger.warning("Skipping %s/%s: needs both a uniform and a stratified run", env.value, agent.value)
            continue
        uniform_auc, random_score = by_sampler[SamplerKind.UNIFORM]
        stratified_auc, _ = by_sampler[SamplerKind.STRATIFIED]
        uniform_score = float(np.mean(uniform_auc))
        stratified_score = float(np.mean(stratified_auc))
        try:
            score = relative_score(stratified_score, uniform_score, random_score)
        except ZeroDivisionError as exc:
            logger.warning("Skipping %s/%s: %s", env.value, agent.value, exc)
            continue
        _, p_value = welch_comparison(stratified_auc, uniform_auc)
        scores.append(
            RelativeScore(
                env=env,
                agent=agent,
                uniform_score=uniform_score,
                stratified_score=stratified_score,
                random_score=random_score,
                relative_score=score,
                p_value=p_value,
            )
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    emit_svg_plot(curves, out_dir / "comparison.svg")
    write_relative_scores(scores, out_dir / "relative_scores.csv")
    return scores


__all__ = [
    "TrialStreams",
    "area_under_curve",
    "build_agent",
    "build_env",
    "compare_runs",
    "evaluate_policy",
    "random_baseline",
    "relative_score",
    "run_experiment",
    "run_trial",
    "summarize",
    "welch_comparison",
]
