"""Test-time scaling: sample, filter, select, enhance, repair, polish, pick.

Extra inference compute buys a better single response: sample n candidates,
drop the ones whose tool calls would not survive execution, let a selector
keep the top k, upgrade their images (both search and diffusion are fetched
and an image judge picks the winner), repair failing code against sandbox
errors, polish the prose without touching directives, and let the selector
pick the final document. Every selector/judge fallback is deterministic
(lowest index, keep original) so failures degrade reproducibly.
"""
from __future__ import annotations

import dataclasses
import logging
import re
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import orchestrator
from .judging import TextClient, parse_index_list, render_prompt
from .orchestrator import InterleavedDocument, summarize_document
from .tags import (
    CodeParams,
    ImageDirective,
    ParsedResponse,
    SourceKind,
    parse_response,
    serialize_directive,
)
from .tools import CodeClient, ExecLimits, ImageAsset, ToolError, ToolFailure, ToolOutcome, ToolSet

logger = logging.getLogger(__name__)

ENHANCEABLE = (SourceKind.SEARCH, SourceKind.DIFFUSION)


class TtsError(RuntimeError):
    """The pipeline could not produce any candidate at a mandatory stage."""


@dataclass(frozen=True)
class TtsConfig:
    n: int = 8
    k: int = 4
    per_source_samples: int = 2
    max_repair_attempts: int = 3

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 1 <= self.k <= self.n:
            raise ValueError("k must satisfy 1 <= k <= n")
        if self.per_source_samples < 1:
            raise ValueError("per_source_samples must be >= 1")
        if self.max_repair_attempts < 1:
            raise ValueError("max_repair_attempts must be >= 1")


@dataclass(frozen=True)
class Candidate:
    """One sampled response flowing through the pipeline.

    ``stage_tags`` is append-only: a candidate never re-enters an earlier
    stage, and every stage produces candidates whose trail strictly extends
    its input's.
    """

    index: int
    raw: str
    parsed: ParsedResponse
    outcomes: dict[int, ToolOutcome] = field(default_factory=dict)
    document: InterleavedDocument | None = None
    stage_tags: tuple[str, ...] = ()


def _advance(candidate: Candidate, stage: str, **changes) -> Candidate:
    return dataclasses.replace(
        candidate, stage_tags=candidate.stage_tags + (stage,), **changes
    )


@dataclass(frozen=True)
class CheckResult:
    ok: bool
    reason: str | None = None  # schema | dependency | executability
    detail: str = ""


@dataclass(frozen=True)
class StageRecord:
    candidate: int
    stage: str
    elapsed_ms: float
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "candidate": self.candidate,
            "stage": self.stage,
            "elapsed_ms": round(self.elapsed_ms, 3),
            "detail": self.detail,
        }


@dataclass
class TtsResult:
    document: InterleavedDocument
    winner: Candidate
    audit: list[StageRecord]


def sample_candidates(task_prompt: str, n: int, generator: TextClient) -> list[Candidate]:
    """Draw n stochastic samples; tolerate per-sample failures if any succeed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    candidates: list[Candidate] = []
    failures = 0
    for i in range(n):
        try:
            raw = generator.complete(task_prompt)
        except ToolError as err:
            failures += 1
            logger.warning("sample %d failed: %s", i, err)
            continue
        candidates.append(Candidate(i, raw, parse_response(raw), stage_tags=("sampled",)))
    if not candidates:
        raise TtsError(f"all {n} samples failed")
    if failures:
        logger.warning("sampled %d of %d candidates (%d failures)", len(candidates), n, failures)
    return candidates


def tool_call_check(
    candidate: Candidate,
    *,
    input_image_count: int = 0,
    code_client: CodeClient | None = None,
) -> CheckResult:
    """Structural and executability validation of a candidate's directives.

    Fails on any parse diagnostic, on edit references that cannot resolve,
    and on code that does not survive a compile-only dry run in the sandbox.
    Total: never raises because of candidate content.
    """
    if candidate.parsed.diagnostics:
        first = candidate.parsed.diagnostics[0]
        return CheckResult(False, "schema", f"{first.kind}: {first.message}")
    plan_ = orchestrator.plan(candidate.parsed, input_image_count)
    for node in plan_.nodes:
        if node.failure is not None:
            return CheckResult(False, "dependency", node.failure.detail)
    if code_client is not None:
        for directive in candidate.parsed.directives:
            if directive.source is not SourceKind.CODE:
                continue
            assert isinstance(directive.params, CodeParams)
            result = code_client.check(directive.params.code)
            if result.status != "ok":
                return CheckResult(False, "executability", result.stderr or result.status)
    return CheckResult(True)


def _candidate_listing(candidates: Sequence[Candidate], *, limit: int = 1200) -> str:
    lines = []
    for i, candidate in enumerate(candidates):
        body = summarize_document(candidate.document) if candidate.document else candidate.raw
        body = body.replace("\n", " ")
        if len(body) > limit:
            body = body[:limit] + "..."
        lines.append(f"[{i}] {body}")
    return "\n".join(lines)


def select_top_k(
    candidates: Sequence[Candidate], k: int, selector: TextClient, *, task_prompt: str = ""
) -> list[Candidate]:
    """Keep the selector's top choices; the selector only emits indices.

    Selector failure or garbage output degrades to the first ``min(k, len)``
    candidates; ambiguity resolves to lower indices.
    """
    if not candidates:
        raise ValueError("select_top_k requires at least one passing candidate")
    want = min(k, len(candidates))
    prompt = render_prompt(
        "select_top_k", k=want, task=task_prompt, candidates=_candidate_listing(candidates)
    )
    try:
        reply = selector.complete(prompt)
        indices = parse_index_list(reply, limit=len(candidates))
    except ToolError as err:
        logger.warning("selector failed (%s); falling back to first %d candidates", err, want)
        indices = None
    if indices is None:
        logger.warning("selector output unusable; falling back to first %d candidates", want)
        indices = list(range(want))
    for i in range(len(candidates)):
        if len(indices) >= want:
            break
        if i not in indices:
            indices.append(i)
    return [_advance(candidates[i], "selected") for i in indices[:want]]


def _surrounding_text(parsed: ParsedResponse, directive: ImageDirective, radius: int = 400) -> str:
    start, end = directive.span
    return parsed.raw[max(0, start - radius) : start] + " [image here] " + parsed.raw[end : end + radius]


def _enhancement_pool(
    directive: ImageDirective, clients: ToolSet, samples: int
) -> tuple[list[ImageAsset], ToolFailure | None]:
    if directive.source is SourceKind.SEARCH:
        search_text = directive.params.query
        diffusion_text = directive.description or directive.params.query
    else:
        diffusion_text = directive.params.prompt
        search_text = directive.description or directive.params.prompt

    def fetch_search() -> list[ImageAsset]:
        return clients.search.search(search_text, samples)

    def fetch_diffusion() -> list[ImageAsset]:
        return [clients.diffusion.generate(diffusion_text) for _ in range(samples)]

    pool: list[ImageAsset] = []
    last_failure: ToolFailure | None = None
    with ThreadPoolExecutor(max_workers=2) as executor:
        futures = [executor.submit(fetch_search), executor.submit(fetch_diffusion)]
        for future in futures:
            try:
                pool.extend(future.result())
            except ToolError as err:
                last_failure = err.failure()
                logger.warning("enhancement fetch failed: %s", err)
    return pool, last_failure


def enhance_images(
    candidate: Candidate, clients: ToolSet, cfg: TtsConfig, picker: TextClient
) -> Candidate:
    """Upgrade search/diffusion directives by sampling both sources.

    For every such directive, ``per_source_samples`` results are fetched from
    both the search and the diffusion backend concurrently, and the image
    judge picks the sample most aligned with the surrounding text. Code and
    edit directives are untouched. If every fetch fails, the directive's
    outcome is that failure and the pipeline continues.
    """
    outcomes = dict(candidate.outcomes)
    for directive in candidate.parsed.directives:
        if directive.source not in ENHANCEABLE:
            continue
        pool, last_failure = _enhancement_pool(directive, clients, cfg.per_source_samples)
        if not pool:
            failure = last_failure or ToolFailure("remote_error", "all enhancement fetches failed")
            outcomes[directive.ordinal] = ToolOutcome(directive.ordinal, failure)
            continue
        listing = "\n".join(
            f"[{i}] source={asset.provenance.source.value} digest={asset.provenance.params_digest[:16]}"
            for i, asset in enumerate(pool)
        )
        prompt = render_prompt(
            "enhance_pick",
            context=_surrounding_text(candidate.parsed, directive),
            candidates=listing,
        )
        choice = 0
        try:
            reply = picker.complete(prompt)
            parsed = parse_index_list(reply, limit=len(pool))
            if parsed:
                choice = parsed[0]
            else:
                logger.warning("image pick unusable; defaulting to candidate 0")
        except ToolError as err:
            logger.warning("image pick failed (%s); defaulting to candidate 0", err)
        outcomes[directive.ordinal] = ToolOutcome(directive.ordinal, pool[choice])
    return _advance(candidate, "enhanced", outcomes=outcomes)


def _strip_code_fences(reply: str) -> str:
    text = reply.strip()
    match = re.match(r"^```[a-zA-Z]*\s*\n(.*?)\n?```$", text, re.S)
    return match.group(1) if match else text


def repair_code(
    candidate: Candidate,
    code_client: CodeClient,
    repairer: TextClient,
    *,
    max_attempts: int = 3,
    limits: ExecLimits | None = None,
) -> Candidate:
    """Execute code directives, looping error -> revision -> re-execution.

    Each loop iteration is one sandbox execution, so a directive consumes at
    most ``max_attempts`` executions. On success the directive's code text is
    replaced in the candidate, so serialization reflects the fixed script;
    exhaustion leaves a sandbox failure outcome.
    """
    outcomes = dict(candidate.outcomes)
    replacements: list[tuple[tuple[int, int], str]] = []
    for directive in candidate.parsed.directives:
        if directive.source is not SourceKind.CODE:
            continue
        assert isinstance(directive.params, CodeParams)
        code = directive.params.code
        outcome: ToolOutcome | None = None
        for attempt in range(1, max_attempts + 1):
            try:
                asset = code_client.execute(code, limits)
            except ToolError as err:
                if attempt == max_attempts:
                    outcome = ToolOutcome(directive.ordinal, err.failure())
                    break
                try:
                    reply = repairer.complete(
                        render_prompt("repair_code", code=code, error=err.detail)
                    )
                except ToolError as repair_err:
                    logger.warning("repair model failed (%s); keeping last code", repair_err)
                    continue
                revised = _strip_code_fences(reply)
                if revised:
                    code = revised
            else:
                outcome = ToolOutcome(directive.ordinal, asset)
                if code != directive.params.code:
                    fixed = dataclasses.replace(directive, params=CodeParams(code))
                    replacements.append((directive.span, serialize_directive(fixed)))
                break
        assert outcome is not None
        outcomes[directive.ordinal] = outcome
    if not replacements:
        return _advance(candidate, "repaired", outcomes=outcomes)
    raw = candidate.raw
    for (start, end), text in sorted(replacements, reverse=True):
        raw = raw[:start] + text + raw[end:]
    return _advance(candidate, "repaired", raw=raw, parsed=parse_response(raw), outcomes=outcomes)


def resolve_candidate(
    candidate: Candidate,
    clients: ToolSet,
    *,
    input_images: Sequence[ImageAsset] = (),
    limits: ExecLimits | None = None,
    parallelism: int = orchestrator.DEFAULT_PARALLELISM,
    task_ref: str = "",
) -> Candidate:
    """Run whatever directives are still unresolved and assemble the document."""
    plan_ = orchestrator.plan(candidate.parsed, len(input_images))
    outcomes = orchestrator.execute(
        plan_,
        clients,
        limits,
        input_images=input_images,
        parallelism=parallelism,
        preresolved=candidate.outcomes,
    )
    document = orchestrator.assemble(candidate.parsed, outcomes, task_ref)
    return _advance(
        candidate, "resolved", outcomes={o.ordinal: o for o in outcomes}, document=document
    )


def polish(candidate: Candidate, polisher: TextClient, *, task_ref: str = "") -> Candidate:
    """Let a model rewrite the prose; directives and assets stay frozen.

    The polished text must contain the same directive multiset in the same
    order, otherwise the polish is discarded and the pre-polish candidate is
    kept with a warning.
    """
    try:
        reply = polisher.complete(render_prompt("polish", document=candidate.raw))
    except ToolError as err:
        logger.warning("polisher failed (%s); keeping original", err)
        return _advance(candidate, "polished")
    polished = parse_response(reply)
    original_signatures = [d.signature() for d in candidate.parsed.directives]
    polished_signatures = [d.signature() for d in polished.directives]
    if polished_signatures != original_signatures or polished.diagnostics:
        logger.warning(
            "polish altered the directives (candidate %d); keeping original", candidate.index
        )
        return _advance(candidate, "polished")
    document = None
    if candidate.document is not None:
        outcomes = [candidate.outcomes[d.ordinal] for d in polished.directives]
        document = orchestrator.assemble(polished, outcomes, task_ref)
    return _advance(candidate, "polished", raw=reply, parsed=polished, document=document)


def final_select(
    candidates: Sequence[Candidate], selector: TextClient, *, task_prompt: str = ""
) -> Candidate:
    """Pick the single best finished candidate; index-only selector contract."""
    if not candidates:
        raise ValueError("final_select requires at least one candidate")
    if len(candidates) == 1:
        return _advance(candidates[0], "finalized")
    prompt = render_prompt(
        "final_select", task=task_prompt, candidates=_candidate_listing(candidates)
    )
    choice = 0
    try:
        reply = selector.complete(prompt)
        parsed = parse_index_list(reply, limit=len(candidates))
        if parsed:
            choice = parsed[0]
        else:
            logger.warning("final selection unusable; defaulting to candidate 0")
    except ToolError as err:
        logger.warning("final selector failed (%s); defaulting to candidate 0", err)
    return _advance(candidates[choice], "finalized")


def run_tts(
    task_prompt: str,
    generator: TextClient,
    clients: ToolSet,
    cfg: TtsConfig,
    *,
    selector: TextClient,
    picker: TextClient,
    polisher: TextClient,
    repairer: TextClient,
    input_images: Sequence[ImageAsset] = (),
    limits: ExecLimits | None = None,
    parallelism: int = orchestrator.DEFAULT_PARALLELISM,
    task_ref: str = "",
) -> TtsResult:
    """Drive the full pipeline for one task and return the final document."""
    audit: list[StageRecord] = []

    def record(candidate: int, stage: str, started: float, detail: str = "") -> None:
        audit.append(StageRecord(candidate, stage, (time.monotonic() - started) * 1000, detail))

    started = time.monotonic()
    candidates = sample_candidates(task_prompt, cfg.n, generator)
    record(-1, "sampled", started, f"{len(candidates)} of {cfg.n}")

    passing: list[Candidate] = []
    for candidate in candidates:
        t0 = time.monotonic()
        result = tool_call_check(
            candidate, input_image_count=len(input_images), code_client=clients.code
        )
        if result.ok:
            passing.append(_advance(candidate, "checked"))
            record(candidate.index, "checked", t0, "pass")
        else:
            record(candidate.index, "checked", t0, f"fail({result.reason}): {result.detail}")
    if not passing:
        raise TtsError("no candidate survived the tool call check")

    t0 = time.monotonic()
    selected = select_top_k(passing, cfg.k, selector, task_prompt=task_prompt)
    record(-1, "selected", t0, f"kept {[c.index for c in selected]}")

    finished: list[Candidate] = []
    for candidate in selected:
        t0 = time.monotonic()
        candidate = enhance_images(candidate, clients, cfg, picker)
        record(candidate.index, "enhanced", t0)
        t0 = time.monotonic()
        candidate = repair_code(
            candidate, clients.code, repairer, max_attempts=cfg.max_repair_attempts, limits=limits
        )
        record(candidate.index, "repaired", t0)
        t0 = time.monotonic()
        candidate = resolve_candidate(
            candidate,
            clients,
            input_images=input_images,
            limits=limits,
            parallelism=parallelism,
            task_ref=task_ref,
        )
        record(candidate.index, "resolved", t0)
        t0 = time.monotonic()
        candidate = polish(candidate, polisher, task_ref=task_ref)
        record(candidate.index, "polished", t0)
        finished.append(candidate)

    t0 = time.monotonic()
    winner = final_select(finished, selector, task_prompt=task_prompt)
    record(winner.index, "finalized", t0)
    assert winner.document is not None
    return TtsResult(winner.document, winner, audit)
