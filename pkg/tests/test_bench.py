from __future__ import annotations

import json
import os
from pathlib import Path

import pytest
from click.testing import CliRunner

from interweave.bench import (
    RubricCriterion,
    TaskFileError,
    TaskItem,
    build_report,
    build_run_clients,
    load_run,
    load_tasks,
    run_batch,
    run_task,
    score_rubric,
    template_response,
)
from interweave.cli import main as cli_main
from interweave.config import AppConfig, load_config
from interweave.judging import ScriptedClient, uniform_judge
from interweave.rewards import ConstraintKind, ImageCountConstraint
from interweave.tags import SourceKind, count_directives, parse_response
from interweave.tools import ToolError


def write_tasks(path: Path, records: list[dict]) -> Path:
    path.write_text("\n".join(json.dumps(r) for r in records))
    return path


BASE_TASKS = [
    {
        "id": "t1",
        "prompt": "Report on solar output trends",
        "constraint": 2,
        "target_tools": ["search", "code"],
        "rubric": ["Shows a chart", "Mentions trends"],
    },
    {"id": "t2", "prompt": "Essay without figures", "constraint": -1},
    {"id": "t3", "prompt": "One creature concept", "constraint": "inf", "target_tools": ["diffusion"]},
]


@pytest.fixture
def cfg(tmp_path):
    return AppConfig(work_root=str(tmp_path / "work"))


@pytest.fixture
def clients(cfg):
    return build_run_clients(cfg)


def test_load_tasks_constraint_mapping(tmp_path):
    records = [
        {"id": "a", "prompt": "p", "constraint": -1},
        {"id": "b", "prompt": "p", "constraint": "inf"},
        {"id": "c", "prompt": "p", "constraint": 0},
        {"id": "d", "prompt": "p", "constraint": 3},
    ]
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))
    kinds = [t.constraint.kind for t in tasks]
    assert kinds == [
        ConstraintKind.DISALLOWED,
        ConstraintKind.AT_LEAST_ONE,
        ConstraintKind.UNCONSTRAINED,
        ConstraintKind.EXACTLY,
    ]
    assert tasks[3].constraint.n == 3


def test_load_tasks_duplicate_id_names_the_id(tmp_path):
    records = [
        {"id": "dup", "prompt": "p", "constraint": 0},
        {"id": "dup", "prompt": "p", "constraint": 0},
    ]
    with pytest.raises(TaskFileError, match="dup"):
        load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))


def test_load_tasks_schema_error_names_task_and_field(tmp_path):
    records = [{"id": "bad1", "prompt": "p", "constraint": "several"}]
    with pytest.raises(TaskFileError, match=r"bad1.*constraint"):
        load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))
    records = [{"id": "bad2", "prompt": "", "constraint": 0}]
    with pytest.raises(TaskFileError, match=r"bad2.*prompt"):
        load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))
    records = [{"id": "bad3", "prompt": "p", "constraint": 0, "target_tools": ["telepathy"]}]
    with pytest.raises(TaskFileError, match=r"bad3.*target_tools"):
        load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))


def test_load_tasks_missing_input_image(tmp_path):
    records = [{"id": "imgtask", "prompt": "p", "constraint": 0, "input_images": ["nope.png"]}]
    with pytest.raises(TaskFileError, match="missing file"):
        load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))


def test_load_tasks_accepts_existing_input_image(tmp_path):
    from interweave.tools import MockDiffusionClient

    image = tmp_path / "input.png"
    image.write_bytes(MockDiffusionClient().generate("seed").content)
    records = [{"id": "imgtask", "prompt": "p", "constraint": 0, "input_images": ["input.png"]}]
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", records))
    assert tasks[0].input_images[0].is_file()


def test_template_response_honors_constraints():
    exact = TaskItem("x", "Solar report", ImageCountConstraint.exactly(3),
                     target_tools=frozenset({SourceKind.CODE}))
    assert count_directives(parse_response(template_response(exact))) == 3
    none = TaskItem("y", "No images", ImageCountConstraint.disallowed())
    assert count_directives(parse_response(template_response(none))) == 0
    one = TaskItem("z", "At least one", ImageCountConstraint.at_least_one())
    assert count_directives(parse_response(template_response(one))) == 1


def test_run_task_exactly_two_scores_full_rule_reward(tmp_path, cfg, clients):
    task = TaskItem("t1", "Solar report", ImageCountConstraint.exactly(2),
                    target_tools=frozenset({SourceKind.SEARCH}))
    result = run_task(task, "plain", clients, cfg, tmp_path / "run")
    assert result.breakdown is not None
    assert result.breakdown.r_rule == 1.0
    scores = json.loads((result.run_dir / "scores.json").read_text())
    assert scores["r_rule"] == 1.0
    assert scores["n_gen"] == 2
    assert scores["human"] is None


def test_run_task_persists_full_provenance(tmp_path, cfg, clients):
    task = TaskItem("prov", "Solar report", ImageCountConstraint.exactly(1),
                    target_tools=frozenset({SourceKind.SEARCH}))
    result = run_task(task, "plain", clients, cfg, tmp_path / "run")
    for name in ("task.json", "response.txt", "directives.json", "outcomes.json",
                 "report.md", "scores.json"):
        assert (result.run_dir / name).exists(), name
    outcomes = json.loads((result.run_dir / "outcomes.json").read_text())
    assert outcomes[0]["ok"] is True
    assert (result.run_dir / outcomes[0]["asset"]["file"]).exists()


def test_run_task_tts_mode_writes_audit(tmp_path, cfg, clients):
    task = TaskItem("tts1", "Solar report", ImageCountConstraint.exactly(1),
                    target_tools=frozenset({SourceKind.SEARCH}))
    result = run_task(task, "tts", clients, cfg, tmp_path / "run")
    audit = (result.run_dir / "tts_audit.jsonl").read_text().splitlines()
    stages = [json.loads(line)["stage"] for line in audit]
    assert "sampled" in stages and "finalized" in stages


def test_run_batch_three_tasks_produces_documents_and_report(tmp_path, cfg, clients):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", BASE_TASKS))
    batch = run_batch(tasks, "plain", clients, cfg, tmp_path / "runs", run_id="r1")
    assert len(batch.results) == 3
    assert batch.all_documents_produced
    assert (batch.run_dir / "report.json").exists()
    assert len(list(batch.run_dir.glob("*/report.md"))) == 3
    assert batch.report["aggregates"]["tasks"] == 3
    assert batch.report["aggregates"]["mean_tool_acc"] == 1.0


def test_score_rubric_rates():
    task = TaskItem("r", "p", ImageCountConstraint.unconstrained(), rubric=tuple(f"c{i}" for i in range(10)))
    doc_task = task
    from interweave.orchestrator import InterleavedDocument, TextBlock

    doc = InterleavedDocument((TextBlock("content"),))
    all_full = uniform_judge(rubric=2)
    scored, rate = score_rubric(doc, doc_task, all_full)
    assert rate == 1.0
    replies = [json.dumps({"score": s}) for s in (2, 2, 1, 0, 0, 0, 0, 0, 0, 0)]
    scored, rate = score_rubric(doc, task, ScriptedClient(replies))
    assert rate == pytest.approx(5 / 20)
    assert [c.score for c in scored[:3]] == [2, 2, 1]


def test_score_rubric_requires_rubric():
    task = TaskItem("r", "p", ImageCountConstraint.unconstrained())
    from interweave.orchestrator import InterleavedDocument, TextBlock

    with pytest.raises(ValueError):
        score_rubric(InterleavedDocument((TextBlock("x"),)), task, uniform_judge())


def test_rubric_criterion_validates_score():
    RubricCriterion("ok", 2)
    with pytest.raises(ValueError):
        RubricCriterion("bad", 3)


def test_rubric_rate_bounded_for_any_scores():
    import random

    from interweave.orchestrator import InterleavedDocument, TextBlock

    rng = random.Random(7)
    doc = InterleavedDocument((TextBlock("x"),))
    for _ in range(50):
        size = rng.randint(1, 12)
        task = TaskItem("r", "p", ImageCountConstraint.unconstrained(),
                        rubric=tuple(f"c{i}" for i in range(size)))
        replies = [json.dumps({"score": rng.choice((0, 1, 2))}) for _ in range(size)]
        _, rate = score_rubric(doc, task, ScriptedClient(replies))
        assert 0.0 <= rate <= 1.0


class SelectiveFailingGenerator:
    """Wraps per-task template generation, failing for chosen task ids."""

    def __init__(self, task, fail_ids):
        self.task = task
        self.fail_ids = fail_ids

    def complete(self, prompt: str) -> str:
        if self.task.id in self.fail_ids:
            raise ToolError("remote_error", "generator down for this task")
        return template_response(self.task)


def _clients_failing_for(cfg, fail_ids):
    clients = build_run_clients(cfg)
    clients.generator_for = lambda task: SelectiveFailingGenerator(task, fail_ids)
    return clients


def _tree_bytes(root: Path) -> dict[str, bytes]:
    """Run-dir contents with wall-clock measurements masked out."""
    tree: dict[str, bytes] = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        content = path.read_bytes()
        if path.name == "outcomes.json":
            records = json.loads(content)
            for record in records:
                if "asset" in record:
                    record["asset"]["latency"] = 0.0
            content = json.dumps(records).encode()
        tree[str(path.relative_to(root))] = content
    return tree


def test_single_task_failure_is_isolated(tmp_path, cfg):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", BASE_TASKS))
    healthy = run_batch(
        tasks, "plain", _clients_failing_for(cfg, set()), cfg, tmp_path / "a", run_id="r"
    )
    degraded = run_batch(
        tasks, "plain", _clients_failing_for(cfg, {"t2"}), cfg, tmp_path / "b", run_id="r"
    )
    assert healthy.all_documents_produced
    assert not degraded.all_documents_produced
    failed = {r.task_id for r in degraded.results if r.error}
    assert failed == {"t2"}
    for task_id in ("t1", "t3"):
        assert _tree_bytes(healthy.run_dir / task_id) == _tree_bytes(degraded.run_dir / task_id)


def test_report_determinism_over_mocks(tmp_path, cfg):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", BASE_TASKS))
    first = run_batch(tasks, "plain", build_run_clients(cfg), cfg, tmp_path / "a", run_id="r")
    second = run_batch(tasks, "plain", build_run_clients(cfg), cfg, tmp_path / "b", run_id="r")
    assert first.report == second.report
    assert _tree_bytes(first.run_dir) == _tree_bytes(second.run_dir)


def test_load_run_round_trip(tmp_path, cfg, clients):
    task = TaskItem("round", "Solar report", ImageCountConstraint.exactly(1),
                    target_tools=frozenset({SourceKind.SEARCH}))
    result = run_task(task, "plain", clients, cfg, tmp_path / "run")
    loaded = load_run(result.run_dir)
    assert loaded.task.id == "round"
    assert loaded.task.constraint == task.constraint
    assert len(loaded.document.image_blocks) == 1
    original = loaded.document.image_blocks[0].asset.content
    assert original == result.document.image_blocks[0].asset.content


def test_cli_generate_score_report(tmp_path):
    runner = CliRunner()
    tasks_file = write_tasks(tmp_path / "tasks.jsonl", BASE_TASKS)
    out = tmp_path / "runs"
    result = runner.invoke(
        cli_main,
        ["generate", str(tasks_file), "--mode", "plain", "--backend", "mock",
         "--out", str(out), "--run-id", "r1"],
    )
    assert result.exit_code == 0, result.output
    run_dir = out / "r1"
    assert (run_dir / "report.json").exists()

    result = runner.invoke(cli_main, ["score", str(run_dir), "--backend", "mock"])
    assert result.exit_code == 0, result.output
    scores = json.loads((run_dir / "t1" / "scores.json").read_text())
    assert scores["rubric"]["rate"] == 1.0

    result = runner.invoke(cli_main, ["reward", str(run_dir), "--backend", "mock"])
    assert result.exit_code == 0, result.output

    result = runner.invoke(cli_main, ["report", str(run_dir)])
    assert result.exit_code == 0, result.output
    assert "t1" in result.output


def test_cli_generate_exit_code_on_task_failure(tmp_path, monkeypatch):
    runner = CliRunner()
    records = [
        {"id": "ok", "prompt": "fine", "constraint": 1},
        {"id": "boom", "prompt": "fails", "constraint": 1},
    ]
    tasks_file = write_tasks(tmp_path / "tasks.jsonl", records)

    import interweave.cli as cli_module

    real_builder = cli_module.build_run_clients

    def patched(cfg):
        clients = real_builder(cfg)
        clients.generator_for = lambda task: SelectiveFailingGenerator(task, {"boom"})
        return clients

    monkeypatch.setattr(cli_module, "build_run_clients", patched)
    result = runner.invoke(
        cli_main,
        ["generate", str(tasks_file), "--backend", "mock", "--out", str(tmp_path / "runs")],
    )
    assert result.exit_code == 1
    assert "FAIL boom" in result.output


def test_build_report_aggregates_rubric(tmp_path, cfg, clients):
    tasks = load_tasks(write_tasks(tmp_path / "tasks.jsonl", BASE_TASKS[:1]))
    batch = run_batch(tasks, "plain", clients, cfg, tmp_path / "runs", run_id="r")
    task_dir = batch.run_dir / "t1"
    loaded = load_run(task_dir)
    scored, rate = score_rubric(loaded.document, loaded.task, uniform_judge(rubric=1))
    loaded.scores["rubric"] = {"scores": [c.score for c in scored], "rate": rate}
    (task_dir / "scores.json").write_text(json.dumps(loaded.scores))
    report = build_report(batch.run_dir)
    assert report["aggregates"]["mean_rubric_rate"] == pytest.approx(0.5)


def test_config_defaults_and_file_round_trip(tmp_path):
    cfg = load_config(None)
    assert cfg.backend == "mock"
    assert cfg.tts.n == 8 and cfg.tts.k == 4
    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps({
        "backend": "live",
        "parallelism": 8,
        "tts": {"n": 16, "k": 4},
        "search": {"url": "https://example.test/search", "api_key_env": "SEARCH_KEY_TEST"},
    }))
    os.environ["SEARCH_KEY_TEST"] = "sekrit"
    try:
        cfg = load_config(config_file)
    finally:
        del os.environ["SEARCH_KEY_TEST"]
    assert cfg.backend == "live"
    assert cfg.tts.n == 16
    assert cfg.endpoint("search").api_key == "sekrit"


def test_config_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("IWV_BACKEND", "live")
    monkeypatch.setenv("IWV_DIFFUSION_URL", "https://example.test/diffusion")
    monkeypatch.setenv("IWV_DIFFUSION_KEY", "k123")
    cfg = load_config(None)
    assert cfg.backend == "live"
    endpoint = cfg.endpoint("diffusion")
    assert endpoint.url == "https://example.test/diffusion"
    assert endpoint.api_key == "k123"


def test_build_run_clients_rejects_unknown_backend():
    cfg = AppConfig(backend="quantum")
    with pytest.raises(ValueError):
        build_run_clients(cfg)
