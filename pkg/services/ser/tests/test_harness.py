"""Tests for the experiment harness."""

import csv

import numpy as np
import pytest

import harness
from agents import DqnAgent, TabularAgent
from config import ExperimentConfig
from errors import SerError, TrialError
from harness import (
    TrialStreams,
    area_under_curve,
    build_agent,
    build_env,
    compare_runs,
    evaluate_policy,
    random_baseline,
    relative_score,
    run_experiment,
    run_trial,
    summarize,
    welch_comparison,
)
from reporting import emit_csv, write_run
from schemas import AgentKind, CurvePoint, EnvName, ExperimentResult, SamplerKind, TrialResult


def _trial(returns: list[float], seed: int = 0, sampler: str = "uniform", env: str = "frozenlake") -> TrialResult:
    """Curve evaluated every 10 steps."""
    return TrialResult(
        env=env,
        sampler=sampler,
        agent="tabular",
        seed=seed,
        points=[CurvePoint(env_step=10 * i, mean_eval_return=value) for i, value in enumerate(returns)],
    )


def _write_fake_run(out_dir, sampler: str, curves: list[list[float]], env: str = "frozenlake", baseline: float = 0.0):
    config = ExperimentConfig(
        env=env,
        sampler=sampler,
        agent="tabular",
        num_seeds=len(curves),
        total_env_steps=10 * (len(curves[0]) - 1),
        eval_every=10,
    )
    trials = [_trial(curve, seed, sampler, env) for seed, curve in enumerate(curves)]
    result = ExperimentResult(trials=trials, summary=summarize(trials), random_baseline=baseline)
    write_run(config, result, out_dir)


class TestBuilders:
    """Tests for environment and agent construction."""

    def test_env_by_name(self):
        """Test each env name builds the matching model."""
        assert build_env(ExperimentConfig(env="taxi")).num_states == 500
        assert build_env(ExperimentConfig(env="frozenlake")).num_states == 16
        assert build_env(ExperimentConfig(env="random", random_num_states=7)).num_states == 7

    def test_step_limit_override(self):
        """Test a configured step limit replaces the env default."""
        assert build_env(ExperimentConfig(env="taxi", step_limit=50)).step_limit == 50

    def test_random_env_is_seeded(self):
        """Test the random MDP depends only on random_mdp_seed."""
        config = ExperimentConfig(env="random", random_mdp_seed=3)
        assert build_env(config).model == build_env(config).model

    def test_agent_kinds(self, frozenlake, rng):
        """Test tabular and DQN agents are built from the config."""
        assert isinstance(build_agent(ExperimentConfig(agent="tabular"), frozenlake, rng), TabularAgent)
        assert isinstance(build_agent(ExperimentConfig(agent="dqn", hidden_sizes=(4, 4)), frozenlake, rng), DqnAgent)


class TestStreams:
    """Tests for per-trial random streams."""

    def test_streams_are_reproducible(self):
        """Test one seed always yields the same draws."""
        first, second = TrialStreams.from_seed(9), TrialStreams.from_seed(9)
        assert first.replay.random() == second.replay.random()

    def test_streams_differ(self):
        """Test the five streams of a seed are distinct."""
        streams = TrialStreams.from_seed(0)
        draws = {
            stream.random()
            for stream in (streams.env, streams.init, streams.explore, streams.replay, streams.eval)
        }
        assert len(draws) == 5


class TestEvaluation:
    """Tests for greedy evaluation and the random baseline."""

    def test_always_switching_on_cycle(self, two_state_cycle, rng):
        """Test switching every step earns 1 per step up to the step limit."""
        assert evaluate_policy(two_state_cycle, lambda state: 0, 3, rng) == 100.0

    def test_staying_earns_nothing(self, two_state_cycle, rng):
        """Test the zero-reward action scores 0."""
        assert evaluate_policy(two_state_cycle, lambda state: 1, 2, rng) == 0.0

    def test_random_baseline(self):
        """Test the FrozenLake random agent scores a deterministic success rate."""
        config = ExperimentConfig(env="frozenlake", num_seeds=3, eval_episodes=50, total_env_steps=0)
        score = random_baseline(config)
        assert 0.0 <= score < 0.2
        assert score == random_baseline(config)


class TestRunTrial:
    """Tests for single trials."""

    def test_is_deterministic(self, tiny_config):
        """Test the same (config, seed) gives an identical result."""
        assert run_trial(tiny_config, 3) == run_trial(tiny_config, 3)

    def test_evaluation_points(self, tiny_config):
        """Test points at 0 and every eval_every steps."""
        result = run_trial(tiny_config, 0)
        assert result.env_steps == [0, 100, 200]
        assert len(result.points) == tiny_config.num_eval_points

    def test_zero_steps(self, tiny_config):
        """Test total_env_steps=0 evaluates only the initial policy."""
        config = tiny_config.model_copy(update={"total_env_steps": 0, "capacity": 1})
        result = run_trial(config, 0)
        assert result.env_steps == [0]
        assert result.gradient_steps == 0

    def test_eval_every_equals_steps(self, tiny_config):
        """Test exactly two points when eval_every = total_env_steps."""
        config = tiny_config.model_copy(update={"eval_every": 200})
        assert run_trial(config, 0).env_steps == [0, 200]

    def test_records_replay_stats(self, tiny_config):
        """Test the final memory statistics travel with the result."""
        result = run_trial(tiny_config, 0)
        assert result.replay_stats.size == 200
        assert result.replay_stats.num_keys <= 16 * 4
        assert result.gradient_steps > 0

    def test_sampler_only_touches_replay_stream(self, tiny_config):
        """Test that without training both samplers see the same episodes and curves."""
        untrained = tiny_config.model_copy(update={"warmup": 1_000})
        uniform = run_trial(untrained.model_copy(update={"sampler": SamplerKind.UNIFORM}), 5)
        stratified = run_trial(untrained.model_copy(update={"sampler": SamplerKind.STRATIFIED}), 5)
        assert uniform.points == stratified.points
        assert uniform.replay_stats.size == stratified.replay_stats.size

    def test_dqn_trial(self, tiny_config):
        """Test a short DQN trial trains and records every point."""
        config = tiny_config.model_copy(
            update={"agent": AgentKind.DQN, "hidden_sizes": (8, 8), "sync_period": 20}
        )
        result = run_trial(config, 1)
        assert result.env_steps == [0, 100, 200]
        assert result.gradient_steps == 200 - config.warmup + 1

    def test_dqn_trial_is_deterministic(self, tiny_config):
        """Test a DQN trial repeats exactly for the same seed."""
        config = tiny_config.model_copy(
            update={"agent": AgentKind.DQN, "hidden_sizes": (8, 8), "sync_period": 20}
        )
        assert run_trial(config, 4) == run_trial(config, 4)


class TestRunExperiment:
    """Tests for multi-seed experiments."""

    def test_single_seed_summary(self, tiny_config):
        """Test num_seeds=1 has mean equal to the curve and zero spread."""
        config = tiny_config.model_copy(update={"num_seeds": 1})
        result = run_experiment(config)
        assert result.summary.mean == result.trials[0].returns
        assert result.summary.std == [0.0, 0.0, 0.0]
        assert result.seeds == [0]

    def test_seeds_in_order(self, tiny_config):
        """Test seeds 0..num_seeds-1 come back in order."""
        result = run_experiment(tiny_config)
        assert result.seeds == [0, 1]
        assert result.summary.num_trials == 2

    @pytest.mark.integration
    def test_parallel_matches_serial(self, tiny_config, tmp_path):
        """Test worker processes produce byte-identical CSV output."""
        emit_csv(run_experiment(tiny_config, jobs=1).trials, tmp_path / "serial.csv")
        emit_csv(run_experiment(tiny_config, jobs=2).trials, tmp_path / "parallel.csv")
        assert (tmp_path / "serial.csv").read_bytes() == (tmp_path / "parallel.csv").read_bytes()

    def test_trial_errors_carry_the_seed(self, tiny_config, monkeypatch):
        """Test a failing trial is reported with its seed."""

        def failing_trial(config, seed):
            if seed == 1:
                raise ValueError("boom")
            return _trial([0.0, 0.0, 0.0], seed)

        monkeypatch.setattr(harness, "run_trial", failing_trial)
        with pytest.raises(TrialError) as excinfo:
            run_experiment(tiny_config)
        assert excinfo.value.seed == 1
        assert "boom" in str(excinfo.value)

    @pytest.mark.slow
    @pytest.mark.parametrize("seeds", [100])
    def test_many_seeds(self, seeds):
        """Test a 100-seed FrozenLake DQN experiment yields 100 curves."""
        config = ExperimentConfig(
            env="frozenlake", agent="dqn", num_seeds=seeds, total_env_steps=2_000, eval_every=500, warmup=100
        )
        result = run_experiment(config, jobs=4)
        assert len(result.trials) == seeds


class TestStatistics:
    """Tests for curve statistics and scores."""

    def test_area_under_linear_curve(self):
        """Test a ramp from 0 to 1 averages 0.5."""
        assert area_under_curve(_trial([0.0, 1.0])) == pytest.approx(0.5)

    def test_area_of_single_point(self):
        """Test one point is its own average."""
        assert area_under_curve(_trial([0.7])) == 0.7

    def test_summarize(self):
        """Test mean, sample std and standard error per point."""
        summary = summarize([_trial([0.0, 2.0], 0), _trial([2.0, 2.0], 1)])
        assert summary.mean == [1.0, 2.0]
        assert summary.std == pytest.approx([np.sqrt(2.0), 0.0])
        assert summary.stderr == pytest.approx([1.0, 0.0])
        assert summary.auc == pytest.approx([1.0, 2.0])

    def test_summarize_rejects_mismatched_steps(self):
        """Test curves evaluated at different steps cannot be averaged."""
        with pytest.raises(ValueError):
            summarize([_trial([0.0, 1.0]), _trial([0.0, 1.0, 2.0], 1)])

    def test_summarize_rejects_empty(self):
        """Test zero trials is an error."""
        with pytest.raises(ValueError):
            summarize([])

    @pytest.mark.parametrize(
        "stratified, uniform, random, expected",
        [(5.0, 5.0, 1.0, 100.0), (1.0, 5.0, 1.0, 0.0), (9.0, 5.0, 1.0, 200.0), (-2.0, -1.0, -3.0, 50.0)],
    )
    def test_relative_score(self, stratified, uniform, random, expected):
        """Test the normalised score formula."""
        assert relative_score(stratified, uniform, random) == pytest.approx(expected)

    def test_relative_score_undefined(self):
        """Test uniform = random raises ZeroDivisionError."""
        with pytest.raises(ZeroDivisionError):
            relative_score(1.0, 2.0, 2.0)

    def test_welch_direction(self):
        """Test a clearly better treatment gets a small one-sided p-value."""
        statistic, p_value = welch_comparison([3.0, 4.0, 5.0, 6.0], [0.0, 1.0, 2.0, 1.0])
        assert statistic > 0.0
        assert p_value < 0.05
        _, reverse = welch_comparison([0.0, 1.0, 2.0, 1.0], [3.0, 4.0, 5.0, 6.0])
        assert reverse > 0.5


class TestCompareRuns:
    """Tests for merging finished runs."""

    def test_scores_and_artifacts(self, tmp_path):
        """Test a uniform/stratified pair produces one score, a plot and a table."""
        _write_fake_run(tmp_path / "uniform", "uniform", [[0.0, 1.0], [0.0, 1.0]])
        _write_fake_run(tmp_path / "stratified", "stratified", [[0.0, 1.0], [1.0, 1.0]])
        out = tmp_path / "compare"

        (score,) = compare_runs([tmp_path / "uniform", tmp_path / "stratified"], out)

        assert (score.env, score.agent) == (EnvName.FROZENLAKE, AgentKind.TABULAR)
        assert score.uniform_score == pytest.approx(0.5)
        assert score.stratified_score == pytest.approx(0.75)
        assert score.relative_score == pytest.approx(150.0)
        assert (out / "comparison.svg").read_text().count("<polyline") == 2
        with (out / "relative_scores.csv").open() as handle:
            rows = list(csv.DictReader(handle))
        assert rows[0]["env"] == "frozenlake"
        assert float(rows[0]["relative_score"]) == pytest.approx(150.0)

    def test_unpaired_groups_are_skipped(self, tmp_path):
        """Test a group without both samplers is plotted but not scored."""
        _write_fake_run(tmp_path / "taxi", "uniform", [[0.0, 1.0]], env="taxi", baseline=-1.0)
        scores = compare_runs([tmp_path / "taxi"], tmp_path / "out")
        assert scores == []
        assert (tmp_path / "out" / "comparison.svg").exists()

    def test_undefined_scores_are_skipped(self, tmp_path):
        """Test a uniform score equal to the random baseline yields no score."""
        _write_fake_run(tmp_path / "uniform", "uniform", [[0.0, 0.0]])
        _write_fake_run(tmp_path / "stratified", "stratified", [[0.0, 1.0]])
        assert compare_runs([tmp_path / "uniform", tmp_path / "stratified"], tmp_path / "out") == []

    def test_requires_runs(self, tmp_path):
        """Test an empty input list is an error."""
        with pytest.raises(SerError):
            compare_runs([], tmp_path)

    def test_duplicate_runs_rejected(self, tmp_path):
        """Test two runs with the same env, agent and sampler raise before anything is written."""
        _write_fake_run(tmp_path / "first", "uniform", [[0.0, 1.0]])
        _write_fake_run(tmp_path / "second", "uniform", [[1.0, 1.0]])
        _write_fake_run(tmp_path / "stratified", "stratified", [[0.0, 1.0]])
        dirs = [tmp_path / "first", tmp_path / "stratified", tmp_path / "second"]
        with pytest.raises(SerError, match="frozenlake/tabular/uniform"):
            compare_runs(dirs, tmp_path / "out")
        assert not (tmp_path / "out").exists()


@pytest.mark.slow
class TestReplayComparison:
    """Statistical comparison of stratified and uniform DQN."""

    def test_stratified_is_not_worse(self):
        """Test stratified replay wins on at least one env and loses on neither."""
        wins, losses = 0, 0
        for env in (EnvName.TAXI, EnvName.FROZENLAKE):
            scores = {}
            for sampler in SamplerKind:
                config = ExperimentConfig(env=env, sampler=sampler, agent="dqn", num_seeds=30)
                scores[sampler] = run_experiment(config, jobs=4).summary.auc
            _, better = welch_comparison(scores[SamplerKind.STRATIFIED], scores[SamplerKind.UNIFORM])
            _, worse = welch_comparison(scores[SamplerKind.UNIFORM], scores[SamplerKind.STRATIFIED])
            wins += better < 0.05
            losses += worse < 0.05
        assert wins >= 1
        assert losses == 0
