"""Command-line entry points: generate, score, reward, report."""
from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .bench import (
    build_report,
    build_run_clients,
    load_run,
    load_tasks,
    run_batch,
    score_rubric,
)
from .config import load_config
from .judging import judge_llm, judge_mllm
from .rewards import build_breakdown
from .tags import count_directives, parse_response


def _config(config_path: str | None, backend: str | None):
    cfg = load_config(config_path)
    if backend:
        cfg.backend = backend
    return cfg


@click.group()
def main() -> None:
    """Interleaved image-text document runtime."""


@main.command()
@click.argument("tasks", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", type=click.Choice(["plain", "tts"]), default="plain", show_default=True)
@click.option("--backend", type=click.Choice(["mock", "live"]), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="runs", show_default=True)
@click.option("--run-id", default=None, help="Run directory name; defaults to a UTC timestamp.")
@click.option("--tts-n", type=int, default=None, help="Override the TTS sample count.")
@click.option("--tts-k", type=int, default=None, help="Override the TTS selection size.")
def generate(tasks, mode, backend, config_path, out_dir, run_id, tts_n, tts_k) -> None:
    """Run every task in TASKS and render interleaved documents."""
    cfg = _config(config_path, backend)
    if tts_n is not None or tts_k is not None:
        from .tts import TtsConfig

        cfg.tts = TtsConfig(
            n=tts_n if tts_n is not None else cfg.tts.n,
            k=tts_k if tts_k is not None else cfg.tts.k,
            per_source_samples=cfg.tts.per_source_samples,
            max_repair_attempts=cfg.tts.max_repair_attempts,
        )
    items = load_tasks(tasks)
    clients = build_run_clients(cfg)
    batch = run_batch(items, mode, clients, cfg, out_dir, run_id=run_id)
    for result in batch.results:
        if result.error:
            click.echo(f"FAIL {result.task_id}: {result.error}")
        else:
            click.echo(f"ok   {result.task_id}: {result.run_dir / 'report.md'}")
    click.echo(f"report: {batch.run_dir / 'report.json'}")
    if not batch.all_documents_produced:
        sys.exit(1)


def _task_dirs(run_dir: Path) -> list[Path]:
    return sorted(p.parent for p in run_dir.glob("*/task.json"))


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", type=click.Choice(["mock", "live"]), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def score(run_dir, backend, config_path) -> None:
    """Rubric-score every task run under RUN_DIR."""
    cfg = _config(config_path, backend)
    clients = build_run_clients(cfg)
    run_dir = Path(run_dir)
    for task_dir in _task_dirs(run_dir):
        loaded = load_run(task_dir)
        if not loaded.task.rubric:
            click.echo(f"skip {loaded.task.id}: no rubric")
            continue
        scored, rate = score_rubric(loaded.document, loaded.task, clients.rubric_judge)
        loaded.scores["rubric"] = {
            "scores": [c.score for c in scored],
            "criteria": [c.text for c in scored],
            "rate": rate,
        }
        (task_dir / "scores.json").write_text(json.dumps(loaded.scores, indent=2))
        click.echo(f"ok   {loaded.task.id}: rubric rate {rate:.3f}")
    build_report(run_dir)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--backend", type=click.Choice(["mock", "live"]), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def reward(run_dir, backend, config_path) -> None:
    """Recompute reward breakdowns for every task run under RUN_DIR."""
    cfg = _config(config_path, backend)
    clients = build_run_clients(cfg)
    run_dir = Path(run_dir)
    for task_dir in _task_dirs(run_dir):
        loaded = load_run(task_dir)
        parsed = parse_response(loaded.raw)
        llm_scores = judge_llm(loaded.task.prompt, loaded.raw, clients.llm_judge)
        image_scores = judge_mllm(loaded.document, loaded.task.prompt, clients.mllm_judge)
        breakdown = build_breakdown(
            loaded.task.constraint, count_directives(parsed), llm_scores, image_scores
        )
        loaded.scores.update(breakdown.as_dict())
        (task_dir / "scores.json").write_text(json.dumps(loaded.scores, indent=2))
        click.echo(f"ok   {loaded.task.id}: composite {breakdown.composite:.3f}")
    build_report(run_dir)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
def report(run_dir) -> None:
    """Aggregate per-task scores under RUN_DIR into report.json."""
    data = build_report(run_dir)
    aggregates = data["aggregates"]
    click.echo(json.dumps(aggregates, indent=2))
    for task_id, scores in sorted(data["tasks"].items()):
        rubric = scores.get("rubric")
        rate = f"{rubric['rate']:.3f}" if isinstance(rubric, dict) else "-"
        acc = scores.get("tool_acc")
        acc_text = f"{acc:.3f}" if isinstance(acc, (int, float)) else "-"
        click.echo(
            f"{task_id}\tcomposite={scores['composite']:.3f}\ttool_acc={acc_text}\trubric={rate}"
        )


if __name__ == "__main__":
    main()
