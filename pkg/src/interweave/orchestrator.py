"""Plans directive execution, dispatches tools concurrently, splices results.

The image index space puts task input images first (indices ``0..m-1``),
followed by generated images in reading order (``m..m+k-1``). Edit directives
may only reference strictly earlier indices, which keeps the plan acyclic and
lets each batch run fully in parallel.
"""
from __future__ import annotations

import hashlib
import html
import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .tags import EditParams, ImageDirective, ParsedResponse, SourceKind, TextSegment, wire_params
from .tools import ExecLimits, ImageAsset, ToolError, ToolFailure, ToolOutcome, ToolSet
from .tools.cache import AssetCache
from .tools.base import params_digest

logger = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 4

# Edit results depend on the referenced image's bytes, so caching them by
# directive params alone would risk stale hits.
_CACHEABLE = (SourceKind.SEARCH, SourceKind.DIFFUSION, SourceKind.CODE)


@dataclass(frozen=True)
class PlanNode:
    ordinal: int
    directive: ImageDirective
    depends_on: int | None = None  # ordinal of a generated image
    input_index: int | None = None  # index of a task input image
    failure: ToolFailure | None = None  # pre-failed before dispatch


@dataclass(frozen=True)
class ExecutionPlan:
    nodes: tuple[PlanNode, ...]
    batches: tuple[tuple[int, ...], ...]
    input_image_count: int


@dataclass(frozen=True)
class TextBlock:
    text: str


@dataclass(frozen=True)
class ImageBlock:
    asset: ImageAsset
    directive: ImageDirective


@dataclass(frozen=True)
class FailedImageBlock:
    directive: ImageDirective
    failure: ToolFailure


DocumentBlock = TextBlock | ImageBlock | FailedImageBlock


@dataclass(frozen=True)
class InterleavedDocument:
    segments: tuple[DocumentBlock, ...]
    task_ref: str = ""

    @property
    def image_blocks(self) -> tuple[ImageBlock, ...]:
        return tuple(s for s in self.segments if isinstance(s, ImageBlock))

    @property
    def failed_blocks(self) -> tuple[FailedImageBlock, ...]:
        return tuple(s for s in self.segments if isinstance(s, FailedImageBlock))


def plan(parsed: ParsedResponse, input_image_count: int = 0) -> ExecutionPlan:
    """Build the dependency-layered execution plan for a parsed response.

    Search, diffusion and code nodes carry no dependencies and land in batch
    0, as do edits that reference task input images. An edit referencing a
    generated image lands strictly after its dependency. Out-of-range or
    forward references pre-fail the edit node; the rest of the plan stays
    valid.
    """
    if input_image_count < 0:
        raise ValueError("input_image_count must be >= 0")
    nodes: list[PlanNode] = []
    levels: dict[int, int] = {}
    for directive in parsed.directives:
        ordinal = directive.ordinal
        if directive.source is not SourceKind.EDIT:
            nodes.append(PlanNode(ordinal, directive))
            levels[ordinal] = 0
            continue
        assert isinstance(directive.params, EditParams)
        index = directive.params.img_index
        if index < input_image_count:
            nodes.append(PlanNode(ordinal, directive, input_index=index))
            levels[ordinal] = 0
        elif index < input_image_count + ordinal:
            dep = index - input_image_count
            nodes.append(PlanNode(ordinal, directive, depends_on=dep))
            levels[ordinal] = levels[dep] + 1
        else:
            failure = ToolFailure(
                "dependency_error",
                f"img index {index} is not an earlier image "
                f"({input_image_count} inputs, {ordinal} generated so far)",
            )
            nodes.append(PlanNode(ordinal, directive, failure=failure))
            levels[ordinal] = 0
    depth = max(levels.values(), default=-1) + 1
    batches = tuple(
        tuple(o for o in sorted(levels) if levels[o] == level) for level in range(depth)
    )
    return ExecutionPlan(tuple(nodes), batches, input_image_count)


DispatchFn = Callable[[PlanNode, ImageAsset | None], ImageAsset]


def execute(
    plan_: ExecutionPlan,
    clients: ToolSet,
    limits: ExecLimits | None = None,
    *,
    input_images: Sequence[ImageAsset] = (),
    parallelism: int = DEFAULT_PARALLELISM,
    cache: AssetCache | None = None,
    preresolved: Mapping[int, ToolOutcome] | None = None,
    dispatch: DispatchFn | None = None,
) -> list[ToolOutcome]:
    """Resolve every plan node to an outcome, batch by batch.

    Nodes within a batch run concurrently up to ``parallelism``. Outcomes land
    in position-addressed slots keyed by ordinal, so completion order never
    changes the result. An edit whose dependency failed yields a
    ``dependency_error`` without calling the tool; ``execute`` itself always
    returns a full outcome list.
    """
    limits = limits or ExecLimits()
    dispatch = dispatch or _default_dispatch(clients, limits)
    preresolved = dict(preresolved or {})
    slots: dict[int, ToolOutcome] = {}

    def resolve(node: PlanNode) -> ToolOutcome:
        if node.ordinal in preresolved:
            return preresolved[node.ordinal]
        if node.failure is not None:
            return ToolOutcome(node.ordinal, node.failure)
        dep_asset: ImageAsset | None = None
        if node.input_index is not None:
            if node.input_index >= len(input_images):
                return ToolOutcome(
                    node.ordinal,
                    ToolFailure("dependency_error", f"input image {node.input_index} not provided"),
                )
            dep_asset = input_images[node.input_index]
        elif node.depends_on is not None:
            dep = slots[node.depends_on]
            if not dep.ok:
                return ToolOutcome(
                    node.ordinal,
                    ToolFailure("dependency_error", f"dependency at ordinal {node.depends_on} failed"),
                )
            dep_asset = dep.asset
        digest = params_digest(wire_params(node.directive.params))
        if cache is not None and node.directive.source in _CACHEABLE:
            hit = cache.get(digest)
            if hit is not None:
                return ToolOutcome(node.ordinal, hit)
        try:
            asset = dispatch(node, dep_asset)
        except ToolError as err:
            return ToolOutcome(node.ordinal, err.failure())
        except Exception as err:  # noqa: BLE001 - execute must stay total
            logger.warning("tool dispatch for ordinal %d crashed: %r", node.ordinal, err)
            return ToolOutcome(node.ordinal, ToolFailure("remote_error", f"unexpected backend error: {err!r}"))
        if cache is not None and node.directive.source in _CACHEABLE:
            cache.put(digest, asset)
        return ToolOutcome(node.ordinal, asset)

    by_ordinal = {node.ordinal: node for node in plan_.nodes}
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for batch in plan_.batches:
            for ordinal, outcome in zip(batch, pool.map(resolve, (by_ordinal[o] for o in batch))):
                slots[ordinal] = outcome
    return [slots[o] for o in sorted(slots)]


def _default_dispatch(clients: ToolSet, limits: ExecLimits) -> DispatchFn:
    def dispatch(node: PlanNode, dep_asset: ImageAsset | None) -> ImageAsset:
        directive = node.directive
        params = directive.params
        if directive.source is SourceKind.SEARCH:
            return clients.search.search(params.query, 1)[0]
        if directive.source is SourceKind.DIFFUSION:
            return clients.diffusion.generate(params.prompt)
        if directive.source is SourceKind.CODE:
            return clients.code.execute(params.code, limits)
        assert dep_asset is not None, "edit dispatch requires a resolved dependency"
        return clients.edit.edit(dep_asset, params.prompt)

    return dispatch


def assemble(parsed: ParsedResponse, outcomes: Sequence[ToolOutcome], task_ref: str = "") -> InterleavedDocument:
    """Splice tool outcomes back into the response, preserving text verbatim."""
    directives = parsed.directives
    by_ordinal = {o.ordinal: o for o in outcomes}
    expected = [d.ordinal for d in directives]
    if sorted(by_ordinal) != expected or len(outcomes) != len(expected):
        raise ValueError(
            f"outcomes must cover every directive ordinal exactly once "
            f"(expected {expected}, got {sorted(o.ordinal for o in outcomes)})"
        )
    blocks: list[DocumentBlock] = []
    for segment in parsed.segments:
        if isinstance(segment, TextSegment):
            blocks.append(TextBlock(segment.text))
            continue
        outcome = by_ordinal[segment.directive.ordinal]
        if outcome.ok:
            blocks.append(ImageBlock(outcome.asset, segment.directive))
        else:
            blocks.append(FailedImageBlock(segment.directive, outcome.failure))
    return InterleavedDocument(tuple(blocks), task_ref)


def tool_acc(outcomes: Sequence[ToolOutcome]) -> float:
    """Success rate of tool invocation; pre-failed dependencies count as failures."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("tool accuracy is undefined with zero dispatched directives")
    return sum(1 for o in outcomes if o.ok) / len(outcomes)


def asset_filename(asset: ImageAsset) -> str:
    """Stable content-digest file name used by the renderer."""
    return f"{hashlib.sha256(asset.content).hexdigest()[:16]}.{asset.extension}"


def render(doc: InterleavedDocument, fmt: str = "markdown", out_dir: Path | str = ".") -> bytes:
    """Write the document plus its assets to a directory and return the report bytes.

    Assets are written to a sibling ``assets/`` directory named by content
    digest, so rendering the same document twice produces identical bytes.
    Failed blocks render as visible placeholders carrying the failure kind.
    """
    if fmt not in ("markdown", "html"):
        raise ValueError("format must be markdown or html")
    out_dir = Path(out_dir)
    assets_dir = out_dir / "assets"
    assets_dir.mkdir(parents=True, exist_ok=True)
    for block in doc.image_blocks:
        path = assets_dir / asset_filename(block.asset)
        if not path.exists():
            path.write_bytes(block.asset.content)
    if fmt == "markdown":
        report = _render_markdown(doc).encode("utf-8")
        (out_dir / "report.md").write_bytes(report)
    else:
        report = _render_html(doc).encode("utf-8")
        (out_dir / "report.html").write_bytes(report)
    return report


def _render_markdown(doc: InterleavedDocument) -> str:
    parts: list[str] = []
    for block in doc.segments:
        if isinstance(block, TextBlock):
            parts.append(block.text)
        elif isinstance(block, ImageBlock):
            label = block.directive.description.replace("]", ")")
            parts.append(f"![{label}](assets/{asset_filename(block.asset)})")
        else:
            parts.append(
                f"*[image unavailable: {block.failure.kind}] {block.directive.description}*"
            )
    return "".join(parts)


def _render_html(doc: InterleavedDocument) -> str:
    parts = ["<!doctype html>\n<html><body>\n"]
    for block in doc.segments:
        if isinstance(block, TextBlock):
            parts.append(f'<div style="white-space: pre-wrap">{html.escape(block.text)}</div>\n')
        elif isinstance(block, ImageBlock):
            caption = html.escape(block.directive.description)
            parts.append(
                f'<figure><img src="assets/{asset_filename(block.asset)}" alt="{caption}">'
                f"<figcaption>{caption}</figcaption></figure>\n"
            )
        else:
            parts.append(
                f'<div class="failed-image">[image unavailable: {block.failure.kind}] '
                f"{html.escape(block.directive.description)}</div>\n"
            )
    parts.append("</body></html>\n")
    return "".join(parts)


def summarize_document(doc: InterleavedDocument) -> str:
    """Plain-text view of a document with inline image markers.

    Used when presenting a document to text-only judges and selectors: each
    image is represented by its source, digest and description.
    """
    parts: list[str] = []
    for block in doc.segments:
        if isinstance(block, TextBlock):
            parts.append(block.text)
        elif isinstance(block, ImageBlock):
            prov = block.asset.provenance
            parts.append(
                f"[image source={prov.source.value} digest={prov.params_digest[:12]} "
                f"description={block.directive.description}]"
            )
        else:
            parts.append(
                f"[image failed kind={block.failure.kind} "
                f"description={block.directive.description}]"
            )
    return "".join(parts)
