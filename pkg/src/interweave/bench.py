"""Task ingestion, batch pipeline driving, rubric scoring and run persistence.

Tasks live in a line-delimited JSON file, one record per task. Every run
persists full provenance under ``<out>/<run_id>/<task_id>/``: the raw model
response, parsed directives, tool outcomes, the rendered document and all
scores, so later scoring passes can work from disk alone.
"""
from __future__ import annotations

import hashlib
import json
import logging
import traceback
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from statistics import fmean

from . import orchestrator
from .config import AppConfig
from .judging import (
    FunctionClient,
    TextClient,
    judge_llm,
    judge_mllm,
    judge_rubric_criterion,
    uniform_judge,
)
from .orchestrator import InterleavedDocument, asset_filename, render, summarize_document
from .rewards import (
    ImageCountConstraint,
    RewardBreakdown,
    RewardWeights,
    build_breakdown,
)
from .tags import SourceKind, count_directives, parse_response, wire_params
from .tools import (
    AssetCache,
    ExecLimits,
    ImageAsset,
    MockSandbox,
    ToolFailure,
    ToolOutcome,
    ToolProvenance,
    ToolSet,
    mock_toolset,
)
from .tools.live import HttpDiffusionClient, HttpEditClient, HttpSearchClient, HttpTextClient
from .tools.sandbox import CodeClient, ProcessSandbox
from .tts import run_tts

logger = logging.getLogger(__name__)

DIFFICULTIES = ("low", "medium", "high")


class TaskFileError(ValueError):
    """A task record failed validation; the message names the task and field."""


@dataclass(frozen=True)
class RubricCriterion:
    text: str
    score: int | None = None  # unset | 0 | 1 | 2

    def __post_init__(self) -> None:
        if self.score is not None and self.score not in (0, 1, 2):
            raise ValueError("rubric score must be 0, 1 or 2")


@dataclass(frozen=True)
class TaskItem:
    id: str
    prompt: str
    constraint: ImageCountConstraint
    input_images: tuple[Path, ...] = ()
    target_tools: frozenset[SourceKind] = frozenset()
    rubric: tuple[str, ...] = ()
    difficulty: str = "medium"

    def __post_init__(self) -> None:
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")


def load_tasks(path: Path | str) -> list[TaskItem]:
    """Read and validate a line-delimited task file.

    Schema problems are reported with the offending task id and field;
    duplicate ids and missing input images are load errors.
    """
    path = Path(path)
    tasks: list[TaskItem] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = json.loads(line)
        except ValueError as err:
            raise TaskFileError(f"line {lineno}: not valid JSON: {err}") from None
        if not isinstance(raw, dict):
            raise TaskFileError(f"line {lineno}: task record must be a JSON object")
        task_id = raw.get("id")
        if not isinstance(task_id, str) or not task_id:
            raise TaskFileError(f"line {lineno}: field 'id' must be a non-empty string")
        if task_id in seen:
            raise TaskFileError(f"duplicate task id: {task_id!r}")
        seen.add(task_id)
        tasks.append(_task_from_record(task_id, raw, base_dir=path.parent))
    return tasks


def _task_from_record(task_id: str, raw: dict, *, base_dir: Path) -> TaskItem:
    def fail(name: str, why: str) -> TaskFileError:
        return TaskFileError(f"task {task_id!r}: field {name!r} {why}")

    prompt = raw.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise fail("prompt", "must be a non-empty string")
    if "constraint" not in raw:
        raise fail("constraint", "is required")
    try:
        constraint = ImageCountConstraint.from_raw(raw["constraint"])
    except ValueError as err:
        raise fail("constraint", str(err)) from None
    images: list[Path] = []
    for item in raw.get("input_images", []):
        resolved = (base_dir / item).resolve() if not Path(item).is_absolute() else Path(item)
        if not resolved.is_file():
            raise fail("input_images", f"references a missing file: {item}")
        images.append(resolved)
    tools: set[SourceKind] = set()
    for name in raw.get("target_tools", []):
        try:
            tools.add(SourceKind(name))
        except ValueError:
            raise fail("target_tools", f"contains an unknown tool: {name!r}") from None
    rubric = raw.get("rubric", [])
    if not isinstance(rubric, list) or not all(isinstance(r, str) and r for r in rubric):
        raise fail("rubric", "must be a list of non-empty strings")
    difficulty = raw.get("difficulty", "medium")
    try:
        return TaskItem(
            id=task_id,
            prompt=prompt,
            constraint=constraint,
            input_images=tuple(images),
            target_tools=frozenset(tools),
            rubric=tuple(rubric),
            difficulty=difficulty,
        )
    except ValueError as err:
        raise TaskFileError(f"task {task_id!r}: {err}") from None


def load_input_asset(path: Path) -> ImageAsset:
    content = path.read_bytes()
    media = {"png": "png", "jpg": "jpeg", "jpeg": "jpeg", "webp": "webp"}.get(
        path.suffix.lower().lstrip("."), "png"
    )
    digest = hashlib.sha256(content).hexdigest()
    # Input images predate any tool call; they enter the index space as the
    # edit tool's raw material with a content-addressed digest.
    provenance = ToolProvenance(SourceKind.EDIT, digest, "task-input", 0.0, 1)
    return ImageAsset(content, media, provenance)


def template_response(task: TaskItem) -> str:
    """Deterministic offline generation honoring the task's constraints.

    Used by the mock backend: emits as many directives as the constraint
    requires, cycling through the task's target tools (search by default).
    """
    kind = task.constraint.to_raw()
    if kind == -1:
        count = 0
    elif kind == 0 or kind == "inf":
        count = 1
    else:
        count = int(kind)
    tools = sorted(task.target_tools, key=lambda s: s.value) or [SourceKind.SEARCH]
    tools = [t for t in tools if t is not SourceKind.EDIT] or [SourceKind.SEARCH]
    topic = task.prompt.strip().splitlines()[0][:60]
    parts = [f"# {topic}\n\nAn illustrated report on the task at hand.\n"]
    for i in range(count):
        source = tools[i % len(tools)]
        description = f"{topic} figure {i + 1}"
        if source is SourceKind.CODE:
            code = (
                "import matplotlib.pyplot as plt\n"
                f"values = [v * v for v in range({i + 2}, {i + 8})]\n"
                "fig, ax = plt.subplots()\n"
                "ax.plot(values, marker='o')\n"
                f"ax.set_title('trend {i + 1}')\n"
                "fig.savefig('chart.png')\n"
            )
            params = {"code": code}
        elif source is SourceKind.DIFFUSION:
            params = {"prompt": f"an illustrative rendering of {topic}, panel {i + 1}"}
        else:
            params = {"query": f"{topic} photo {i + 1}"}
        tag = (
            "<imgen>"
            + json.dumps(
                {"source": source.value, "description": description, "params": params},
                separators=(",", ":"),
            )
            + "</imgen>"
        )
        parts.append(f"\nSection {i + 1} discusses the topic.\n{tag}\nThe figure above anchors it.\n")
    parts.append("\nIn closing, the material is summarized.\n")
    return "".join(parts)


def _identity_polisher() -> FunctionClient:
    return FunctionClient(lambda prompt: prompt.split("Document:\n", 1)[-1])


def _echo_repairer() -> FunctionClient:
    def reply(prompt: str) -> str:
        marker = "```python\n"
        start = prompt.find(marker)
        if start == -1:
            return prompt
        end = prompt.find("```", start + len(marker))
        return prompt[start + len(marker) : end]

    return FunctionClient(reply)


@dataclass
class RunClients:
    """Everything a batch run dispatches to: tools, generator and judges."""

    tools: ToolSet
    generator_for: Callable[[TaskItem], TextClient]
    llm_judge: TextClient
    mllm_judge: TextClient
    rubric_judge: TextClient
    selector: TextClient
    picker: TextClient
    polisher: TextClient
    repairer: TextClient


def build_run_clients(cfg: AppConfig) -> RunClients:
    """Assemble mock or live clients according to the configuration."""
    if cfg.backend == "mock":
        work_root = cfg.resolved_work_root()
        if cfg.runner_cmd:
            # Hybrid offline mode: deterministic search/diffusion/edit mocks,
            # but code runs in the real sandbox runner.
            sandbox_root = Path(cfg.sandbox_root) if cfg.sandbox_root else work_root / "sandbox"
            sandbox = ProcessSandbox(cfg.runner_cmd, sandbox_root)
            tools = mock_toolset(work_root / "code", latency=cfg.mock_latency)
            tools.code = CodeClient(sandbox, sandbox_root / "code")
        else:
            tools = mock_toolset(work_root / "code", latency=cfg.mock_latency)
        judge = uniform_judge()
        return RunClients(
            tools=tools,
            generator_for=lambda task: FunctionClient(lambda prompt, t=task: template_response(t)),
            llm_judge=judge,
            mllm_judge=judge,
            rubric_judge=judge,
            selector=FunctionClient(lambda prompt: "0"),
            picker=FunctionClient(lambda prompt: "0"),
            polisher=_identity_polisher(),
            repairer=_echo_repairer(),
        )
    if cfg.backend != "live":
        raise ValueError(f"unknown backend: {cfg.backend!r}")
    work_root = cfg.resolved_work_root()
    if cfg.runner_cmd:
        sandbox_root = Path(cfg.sandbox_root) if cfg.sandbox_root else work_root / "sandbox"
        sandbox = ProcessSandbox(cfg.runner_cmd, sandbox_root)
        code_root = sandbox_root / "code"
    else:
        logger.warning("no runner_cmd configured; the code tool falls back to the offline sandbox")
        sandbox = MockSandbox()
        code_root = work_root / "code"
    generator_endpoint = cfg.endpoint("generator")
    generator = HttpTextClient(generator_endpoint)
    llm_judge = HttpTextClient(cfg.endpoint("llm_judge"))
    mllm_judge = HttpTextClient(cfg.endpoint("mllm_judge"))
    from .judging import load_prompt

    system = load_prompt("generator_system")

    def generator_for(task: TaskItem) -> TextClient:
        return FunctionClient(lambda prompt: generator.complete(f"{system}\n\n{prompt}"))

    return RunClients(
        tools=ToolSet(
            search=HttpSearchClient(cfg.endpoint("search")),
            diffusion=HttpDiffusionClient(cfg.endpoint("diffusion")),
            code=CodeClient(sandbox, code_root),
            edit=HttpEditClient(cfg.endpoint("edit")),
        ),
        generator_for=generator_for,
        llm_judge=llm_judge,
        mllm_judge=mllm_judge,
        rubric_judge=mllm_judge,
        selector=mllm_judge,
        picker=mllm_judge,
        polisher=mllm_judge,
        repairer=llm_judge,
    )


@dataclass
class TaskRunResult:
    task_id: str
    run_dir: Path
    document: InterleavedDocument | None = None
    breakdown: RewardBreakdown | None = None
    outcomes: list[ToolOutcome] = field(default_factory=list)
    tool_acc: float | None = None
    error: str | None = None

    @property
    def produced_document(self) -> bool:
        return self.document is not None


def run_task(
    task: TaskItem,
    mode: str,
    clients: RunClients,
    cfg: AppConfig,
    out_dir: Path,
    *,
    weights: RewardWeights = RewardWeights(),
) -> TaskRunResult:
    """Drive one task end to end and persist every artifact under ``out_dir``."""
    if mode not in ("plain", "tts"):
        raise ValueError("mode must be plain or tts")
    task_dir = out_dir / task.id
    task_dir.mkdir(parents=True, exist_ok=True)
    (task_dir / "task.json").write_text(json.dumps(_task_snapshot(task), indent=2))
    input_images = [load_input_asset(p) for p in task.input_images]
    limits = ExecLimits(timeout_s=cfg.timeout_s, output_cap=cfg.output_cap)
    cache = AssetCache(cfg.cache_dir) if cfg.cache_dir else None
    generator = clients.generator_for(task)
    audit = None
    if mode == "plain":
        raw = generator.complete(task.prompt)
        parsed = parse_response(raw)
        plan_ = orchestrator.plan(parsed, len(input_images))
        outcomes = orchestrator.execute(
            plan_,
            clients.tools,
            limits,
            input_images=input_images,
            parallelism=cfg.parallelism,
            cache=cache,
        )
        document = orchestrator.assemble(parsed, outcomes, task.id)
    else:
        result = run_tts(
            task.prompt,
            generator,
            clients.tools,
            cfg.tts,
            selector=clients.selector,
            picker=clients.picker,
            polisher=clients.polisher,
            repairer=clients.repairer,
            input_images=input_images,
            limits=limits,
            parallelism=cfg.parallelism,
            task_ref=task.id,
        )
        document = result.document
        raw = result.winner.raw
        parsed = result.winner.parsed
        outcomes = [result.winner.outcomes[d.ordinal] for d in parsed.directives]
        audit = result.audit
    (task_dir / "response.txt").write_text(raw)
    _write_directives(task_dir, parsed)
    render(document, "markdown", task_dir)
    _write_outcomes(task_dir, parsed, outcomes)
    if audit is not None:
        with (task_dir / "tts_audit.jsonl").open("w") as fh:
            for record in audit:
                fh.write(json.dumps(record.as_dict()) + "\n")
    n_gen = count_directives(parsed)
    llm_scores = judge_llm(task.prompt, raw, clients.llm_judge)
    image_scores = judge_mllm(document, task.prompt, clients.mllm_judge)
    breakdown = build_breakdown(task.constraint, n_gen, llm_scores, image_scores, weights)
    acc = orchestrator.tool_acc(outcomes) if outcomes else None
    scores = {
        "task_id": task.id,
        "constraint": task.constraint.to_raw(),
        "n_gen": n_gen,
        "tool_acc": acc,
        **breakdown.as_dict(),
        "judge_raw": {
            "llm": {"text_quality": llm_scores.text_quality, "tag_quality": llm_scores.tag_quality},
            "images": [
                None
                if s is None
                else {
                    "image_quality": s.image_quality,
                    "image_text_alignment": s.image_text_alignment,
                    "task_relevance": s.task_relevance,
                }
                for s in image_scores
            ],
        },
        "rubric": None,
        "human": None,  # manual five-point entry slot; never machine-filled
    }
    (task_dir / "scores.json").write_text(json.dumps(scores, indent=2))
    return TaskRunResult(task.id, task_dir, document, breakdown, list(outcomes), acc)


def _task_snapshot(task: TaskItem) -> dict:
    return {
        "id": task.id,
        "prompt": task.prompt,
        "constraint": task.constraint.to_raw(),
        "input_images": [str(p) for p in task.input_images],
        "target_tools": sorted(t.value for t in task.target_tools),
        "rubric": list(task.rubric),
        "difficulty": task.difficulty,
    }


def _write_directives(task_dir: Path, parsed) -> None:
    records = [
        {
            "ordinal": d.ordinal,
            "source": d.source.value,
            "description": d.description,
            "params": wire_params(d.params),
            "span": list(d.span),
        }
        for d in parsed.directives
    ]
    diagnostics = [
        {"position": d.position, "kind": d.kind, "message": d.message}
        for d in parsed.diagnostics
    ]
    (task_dir / "directives.json").write_text(
        json.dumps({"directives": records, "diagnostics": diagnostics}, indent=2)
    )


def _write_outcomes(task_dir: Path, parsed, outcomes: Sequence[ToolOutcome]) -> None:
    directives = {d.ordinal: d for d in parsed.directives}
    records = []
    for outcome in outcomes:
        record: dict = {"ordinal": outcome.ordinal, "ok": outcome.ok}
        record["source"] = directives[outcome.ordinal].source.value
        if outcome.ok:
            asset = outcome.asset
            record["asset"] = {
                "file": f"assets/{asset_filename(asset)}",
                "media_type": asset.media_type,
                "params_digest": asset.provenance.params_digest,
                "backend": asset.provenance.backend,
                "attempts": asset.provenance.attempts,
                "latency": asset.provenance.latency,
            }
        else:
            failure = outcome.failure
            record["failure"] = {"kind": failure.kind, "detail": failure.detail}
        records.append(record)
    (task_dir / "outcomes.json").write_text(json.dumps(records, indent=2))


@dataclass
class LoadedRun:
    task: TaskItem
    raw: str
    document: InterleavedDocument
    scores: dict


def load_run(task_dir: Path | str) -> LoadedRun:
    """Rebuild a task run from its persisted artifacts."""
    task_dir = Path(task_dir)
    snapshot = json.loads((task_dir / "task.json").read_text())
    task = TaskItem(
        id=snapshot["id"],
        prompt=snapshot["prompt"],
        constraint=ImageCountConstraint.from_raw(snapshot["constraint"]),
        input_images=tuple(Path(p) for p in snapshot.get("input_images", [])),
        target_tools=frozenset(SourceKind(t) for t in snapshot.get("target_tools", [])),
        rubric=tuple(snapshot.get("rubric", [])),
        difficulty=snapshot.get("difficulty", "medium"),
    )
    raw = (task_dir / "response.txt").read_text()
    parsed = parse_response(raw)
    records = json.loads((task_dir / "outcomes.json").read_text())
    outcomes = []
    for record in records:
        if record["ok"]:
            meta = record["asset"]
            content = (task_dir / meta["file"]).read_bytes()
            provenance = ToolProvenance(
                SourceKind(record["source"]),
                meta["params_digest"],
                meta["backend"],
                meta["latency"],
                meta["attempts"],
            )
            outcomes.append(
                ToolOutcome(record["ordinal"], ImageAsset(content, meta["media_type"], provenance))
            )
        else:
            failure = record["failure"]
            outcomes.append(
                ToolOutcome(record["ordinal"], ToolFailure(failure["kind"], failure["detail"]))
            )
    document = orchestrator.assemble(parsed, outcomes, task.id)
    scores = {}
    scores_path = task_dir / "scores.json"
    if scores_path.exists():
        scores = json.loads(scores_path.read_text())
    return LoadedRun(task, raw, document, scores)


def score_rubric(
    document: InterleavedDocument, task: TaskItem, judge: TextClient
) -> tuple[list[RubricCriterion], float]:
    """Judge each rubric criterion independently on the 0/1/2 scale.

    The scoring rate is the sum of criterion scores over the maximum
    attainable ``2 * len(rubric)``.
    """
    if not task.rubric:
        raise ValueError(f"task {task.id!r} has an empty rubric")
    text = summarize_document(document)
    scored = [
        RubricCriterion(criterion, judge_rubric_criterion(text, criterion, judge))
        for criterion in task.rubric
    ]
    rate = sum(c.score or 0 for c in scored) / (2 * len(scored))
    return scored, rate


@dataclass
class BatchResult:
    run_dir: Path
    results: list[TaskRunResult]
    report: dict

    @property
    def all_documents_produced(self) -> bool:
        return all(r.produced_document for r in self.results)


def default_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def run_batch(
    tasks: Sequence[TaskItem],
    mode: str,
    clients: RunClients,
    cfg: AppConfig,
    out_dir: Path | str,
    *,
    run_id: str | None = None,
) -> BatchResult:
    """Run every task, isolating failures, and write the aggregate report."""
    run_dir = Path(out_dir) / (run_id or default_run_id())
    run_dir.mkdir(parents=True, exist_ok=True)

    def one(task: TaskItem) -> TaskRunResult:
        try:
            return run_task(task, mode, clients, cfg, run_dir)
        except Exception as err:  # noqa: BLE001 - a failing task never aborts the batch
            logger.error("task %s failed: %s", task.id, err)
            logger.debug("%s", traceback.format_exc())
            return TaskRunResult(task.id, run_dir / task.id, error=f"{type(err).__name__}: {err}")

    with ThreadPoolExecutor(max_workers=max(1, cfg.parallelism)) as pool:
        results = list(pool.map(one, tasks))
    report = build_report(run_dir, mode=mode)
    return BatchResult(run_dir, results, report)


def build_report(run_dir: Path | str, *, mode: str = "") -> dict:
    """Aggregate per-task scores under a run directory into ``report.json``."""
    run_dir = Path(run_dir)
    per_task: dict[str, dict] = {}
    for scores_path in sorted(run_dir.glob("*/scores.json")):
        data = json.loads(scores_path.read_text())
        per_task[data["task_id"]] = data
    composites = [t["composite"] for t in per_task.values()]
    rule_scores = [t["r_rule"] for t in per_task.values()]
    accs = [t["tool_acc"] for t in per_task.values() if t.get("tool_acc") is not None]
    rates = [
        t["rubric"]["rate"]
        for t in per_task.values()
        if isinstance(t.get("rubric"), dict) and "rate" in t["rubric"]
    ]
    report = {
        "mode": mode,
        "tasks": per_task,
        "aggregates": {
            "tasks": len(per_task),
            "mean_composite": fmean(composites) if composites else None,
            "mean_r_rule": fmean(rule_scores) if rule_scores else None,
            "mean_tool_acc": fmean(accs) if accs else None,
            "mean_rubric_rate": fmean(rates) if rates else None,
        },
    }
    (run_dir / "report.json").write_text(json.dumps(report, indent=2))
    return report
