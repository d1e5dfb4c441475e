"""Run artifacts: learning-curve CSV files, SVG plots and run manifests."""

import csv
import logging
import xml.etree.ElementTree as ET
from collections.abc import Iterable, Sequence
from itertools import groupby
from pathlib import Path

import numpy as np

from config import ExperimentConfig, write_config_file
from schemas import (
    AgentKind,
    CurvePoint,
    EnvName,
    ExperimentResult,
    RelativeScore,
    RunManifest,
    SamplerKind,
    Summary,
    TrialResult,
)

logger = logging.getLogger(__name__)

CSV_HEADER = ("env", "sampler", "agent", "seed", "env_step", "eval_return")
SUMMARY_HEADER = ("env_step", "mean", "std", "stderr")
SCORES_HEADER = (
    "env",
    "agent",
    "uniform_score",
    "stratified_score",
    "random_score",
    "relative_score",
    "p_value",
)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"
MANIFEST_FILE = "run.json"
CONFIG_FILE = "config.env"
PLOT_FILE = "curve.svg"

SVG_NS = "http://www.w3.org/2000/svg"
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")

# Plot geometry in SVG user units
WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 190, 30, 60
NUM_TICKS = 5


# --- CSV ---


def emit_csv(results: Iterable[TrialResult], path: Path) -> None:
    """
    Write learning curves as one row per evaluation point.

    Rows are ordered by (seed, env_step). Floats are written with ``repr``
    so ``parse_csv`` recovers them exactly.
    """
    rows = [
        (trial.env.value, trial.sampler.value, trial.agent.value, trial.seed, point.env_step, point.mean_eval_return)
        for trial in results
        for point in trial.points
    ]
    rows.sort(key=lambda row: (row[3], row[4]))
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for env, sampler, agent, seed, env_step, value in rows:
            writer.writerow((env, sampler, agent, seed, env_step, repr(float(value))))


def parse_csv(path: Path) -> list[TrialResult]:
    """Inverse of ``emit_csv``: one TrialResult per (env, sampler, agent, seed)."""
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        rows = list(reader)

    def curve_key(row: list[str]) -> tuple[str, str, str, int]:
        return (row[0], row[1], row[2], int(row[3]))

    trials = []
    for (env, sampler, agent, seed), group in groupby(sorted(rows, key=curve_key), key=curve_key):
        points = sorted(
            (CurvePoint(env_step=int(row[4]), mean_eval_return=float(row[5])) for row in group),
            key=lambda point: point.env_step,
        )
        trials.append(
            TrialResult(
                env=EnvName(env),
                sampler=SamplerKind(sampler),
                agent=AgentKind(agent),
                seed=seed,
                points=points,
            )
        )
    trials.sort(key=lambda trial: trial.seed)
    return trials


def emit_summary_csv(summary: Summary, path: Path) -> None:
    """Per-point mean, std and standard error."""
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for row in zip(summary.env_steps, summary.mean, summary.std, summary.stderr):
            writer.writerow((row[0], *(repr(float(value)) for value in row[1:])))


def write_relative_scores(scores: Sequence[RelativeScore], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SCORES_HEADER)
        for score in scores:
            writer.writerow(
                (
                    score.env.value,
                    score.agent.value,
                    repr(score.uniform_score),
                    repr(score.stratified_score),
                    repr(score.random_score),
                    repr(score.relative_score),
                    repr(score.p_value),
                )
            )


# --- SVG ---


def _ticks(low: float, high: float) -> np.ndarray:
    return np.linspace(low, high, NUM_TICKS)


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _element(parent: ET.Element, tag: str, **attributes: str) -> ET.Element:
    # Trailing underscores allow Python keywords such as class_.
    return ET.SubElement(parent, tag, {key.rstrip("_").replace("_", "-"): value for key, value in attributes.items()})


def emit_svg_plot(summaries: Sequence[tuple[str, Summary]], path: Path) -> None:
    """
    Draw mean learning curves with a shaded standard-error band per label.

    The output is a standalone SVG document whose bytes depend only on the
    input: one ``polyline`` and one translucent ``polygon`` per label, tick
    labels on both axes and a legend.

    Raises:
        ValueError: If ``summaries`` is empty or a curve has fewer than two points
    """
    if not summaries:
        raise ValueError("nothing to plot: no summaries given")
    for label, summary in summaries:
        if len(summary.env_steps) < 2:
            raise ValueError(f"curve {label!r} needs at least two points")

    lows = [np.subtract(s.mean, s.stderr).min() for _, s in summaries]
    highs = [np.add(s.mean, s.stderr).max() for _, s in summaries]
    x_low = float(min(s.env_steps[0] for _, s in summaries))
    x_high = float(max(s.env_steps[-1] for _, s in summaries))
    y_low, y_high = float(min(lows)), float(max(highs))
    if y_high - y_low < 1e-12:
        y_low, y_high = y_low - 1.0, y_high + 1.0

    plot_width = WIDTH - LEFT - RIGHT
    plot_height = HEIGHT - TOP - BOTTOM

    def x_of(value: float) -> float:
        return LEFT + (value - x_low) / (x_high - x_low) * plot_width

    def y_of(value: float) -> float:
        return TOP + (y_high - value) / (y_high - y_low) * plot_height

    svg = ET.Element(
        "svg",
        {
            "xmlns": SVG_NS,
            "width": str(WIDTH),
            "height": str(HEIGHT),
            "viewBox": f"0 0 {WIDTH} {HEIGHT}",
        },
    )
    _element(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")

    axes = _element(svg, "g", class_="axes", stroke="black", stroke_width="1")
    _element(axes, "line", x1=str(LEFT), y1=str(TOP + plot_height), x2=str(LEFT + plot_width), y2=str(TOP + plot_height))
    _element(axes, "line", x1=str(LEFT), y1=str(TOP), x2=str(LEFT), y2=str(TOP + plot_height))

    labels = _element(svg, "g", class_="tick-labels", font_family="sans-serif", font_size="11")
    for value in _ticks(x_low, x_high):
        x = _fmt(x_of(value))
        _element(axes, "line", x1=x, y1=str(TOP + plot_height), x2=x, y2=str(TOP + plot_height + 5))
        text = _element(labels, "text", x=x, y=str(TOP + plot_height + 18), text_anchor="middle")
        text.text = f"{value:g}"
    for value in _ticks(y_low, y_high):
        y = _fmt(y_of(value))
        _element(axes, "line", x1=str(LEFT - 5), y1=y, x2=str(LEFT), y2=y)
        text = _element(labels, "text", x=str(LEFT - 8), y=y, text_anchor="end", dominant_baseline="middle")
        text.text = f"{value:.3g}"

    x_title = _element(labels, "text", x=_fmt(LEFT + plot_width / 2), y=str(HEIGHT - 15), text_anchor="middle")
    x_title.text = "environment steps"
    y_title = _element(
        labels,
        "text",
        x="15",
        y=_fmt(TOP + plot_height / 2),
        text_anchor="middle",
        transform=f"rotate(-90 15 {_fmt(TOP + plot_height / 2)})",
    )
    y_title.text = "mean evaluation return"

    curves = _element(svg, "g", class_="curves")
    legend = _element(svg, "g", class_="legend", font_family="sans-serif", font_size="12")
    for index, (label, summary) in enumerate(summaries):
        color = PALETTE[index % len(PALETTE)]
        xs = [x_of(step) for step in summary.env_steps]
        upper = [y_of(m + e) for m, e in zip(summary.mean, summary.stderr)]
        lower = [y_of(m - e) for m, e in zip(summary.mean, summary.stderr)]
        band = list(zip(xs, upper)) + list(zip(reversed(xs), reversed(lower)))
        _element(
            curves,
            "polygon",
            points=" ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in band),
            fill=color,
            fill_opacity="0.2",
            stroke="none",
        )
        _element(
            curves,
            "polyline",
            points=" ".join(f"{_fmt(x)},{_fmt(y_of(m))}" for x, m in zip(xs, summary.mean)),
            fill="none",
            stroke=color,
            stroke_width="2",
        )

        entry = _element(legend, "g", class_="legend-entry")
        y = TOP + 10 + 20 * index
        _element(entry, "line", x1=str(WIDTH - RIGHT + 15), y1=str(y), x2=str(WIDTH - RIGHT + 40), y2=str(y), stroke=color, stroke_width="2")
        text = _element(entry, "text", x=str(WIDTH - RIGHT + 46), y=str(y), dominant_baseline="middle")
        text.text = label

    ET.indent(svg)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


# --- Run Directories ---


def write_run(config: ExperimentConfig, result: ExperimentResult, out_dir: Path) -> RunManifest:
    """
    Write every artifact of a finished experiment into ``out_dir``.

    Args:
        config: Resolved configuration the experiment ran with
        result: Trials and their aggregate
        out_dir: Destination directory (created if missing)

    Returns:
        RunManifest: The manifest written to ``run.json``
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        env=config.env,
        sampler=config.sampler,
        agent=config.agent,
        config=config.model_dump(mode="json"),
        seeds=result.seeds,
        auc=result.summary.auc,
        random_baseline=result.random_baseline,
        replay_stats=[trial.replay_stats for trial in result.trials],
    )
    emit_csv(result.trials, out_dir / RESULTS_FILE)
    emit_summary_csv(result.summary, out_dir / SUMMARY_FILE)
    (out_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    write_config_file(config, out_dir / CONFIG_FILE)
    if len(result.summary.env_steps) >= 2:
        label = f"{config.env.value}/{config.agent.value}/{config.sampler.value}"
        emit_svg_plot([(label, result.summary)], out_dir / PLOT_FILE)
    else:
        logger.info("Skipping %s: a single evaluation point has no curve", PLOT_FILE)
    logger.info("Wrote run artifacts to %s", out_dir)
    return manifest


def load_run(run_dir: Path) -> tuple[RunManifest, list[TrialResult]]:
    """Read back the manifest and learning curves written by ``write_run``."""
    manifest = RunManifest.model_validate_json((run_dir / MANIFEST_FILE).read_text(encoding="utf-8"))
    trials = parse_csv(run_dir / RESULTS_FILE)
    return manifest, trials
