"""Judge clients and score extraction.

Judges are plain text-completion clients prompted with versioned templates
and asked for constrained JSON. Unparseable replies are retried once and then
floored (raw 1 on every criterion, or 0 for rubric checks) with a logged
warning, so scoring never blocks a run.
"""
from __future__ import annotations

import json
import logging
import re
from collections.abc import Callable, Iterator, Sequence
from importlib import resources
from string import Template
from typing import Protocol

from .orchestrator import FailedImageBlock, ImageBlock, InterleavedDocument, TextBlock
from .rewards import FLOOR_LLM_SCORES, ImageScores, LlmScores

logger = logging.getLogger(__name__)


class TextClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class ScriptedClient:
    """Replays a fixed sequence of replies; raises when exhausted."""

    def __init__(self, replies: Sequence[str]):
        self._replies: Iterator[str] = iter(replies)
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        try:
            return next(self._replies)
        except StopIteration:
            raise RuntimeError("scripted client ran out of replies") from None


class FunctionClient:
    """Computes each reply from the prompt; handy for keyed stubs."""

    def __init__(self, fn: Callable[[str], str]):
        self._fn = fn
        self.calls = 0

    def complete(self, prompt: str) -> str:
        self.calls += 1
        return self._fn(prompt)


def load_prompt(name: str) -> str:
    return resources.files("interweave.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


def render_prompt(name: str, **fields: object) -> str:
    # Templates contain literal JSON braces, so they use $-substitution. The
    # template's own trailing newline is dropped so values substituted at the
    # very end (e.g. a document) stay byte-exact.
    return Template(load_prompt(name).rstrip("\n")).substitute(**fields)


def extract_json(text: str) -> dict | None:
    """Best-effort extraction of one JSON object from a judge reply."""
    text = (text or "").strip()
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj
    except ValueError:
        pass
    start = text.find("{")
    end = text.rfind("}")
    if start != -1 and end > start:
        try:
            obj = json.loads(text[start : end + 1])
            if isinstance(obj, dict):
                return obj
        except ValueError:
            return None
    return None


def _int_field(obj: dict, key: str, lo: int, hi: int) -> int:
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"{key} is not an integer")
    if not lo <= value <= hi:
        raise ValueError(f"{key} out of range")
    return value


def _ask(client: TextClient, prompt: str, parse: Callable[[str], object], *, retries: int = 1):
    """One judge call with a bounded reparse loop; None when all replies fail."""
    for attempt in range(retries + 1):
        reply = client.complete(prompt)
        try:
            return parse(reply)
        except (ValueError, KeyError, TypeError) as err:
            if attempt < retries:
                logger.warning("judge reply unparseable (%s); retrying once", err)
            else:
                logger.warning("judge reply unparseable after retry (%s); flooring scores", err)
    return None


def judge_llm(task: str, response: str, client: TextClient, *, retries: int = 1) -> LlmScores:
    """Score narrative and tag quality of a raw response, floors on failure."""
    prompt = render_prompt("llm_judge", task=task, response=response)

    def parse(reply: str) -> LlmScores:
        obj = extract_json(reply)
        if obj is None:
            raise ValueError("no JSON object in reply")
        return LlmScores(
            text_quality=_int_field(obj, "text_quality", 1, 5),
            tag_quality=_int_field(obj, "tag_quality", 1, 5),
        )

    scores = _ask(client, prompt, parse, retries=retries)
    return scores if scores is not None else FLOOR_LLM_SCORES


def _image_context(doc: InterleavedDocument, position: int, radius: int = 400) -> str:
    before: list[str] = []
    after: list[str] = []
    for i, block in enumerate(doc.segments):
        if isinstance(block, TextBlock):
            if i < position:
                before.append(block.text)
            elif i > position:
                after.append(block.text)
    return "".join(before)[-radius:] + " [image here] " + "".join(after)[:radius]


def judge_mllm(
    doc: InterleavedDocument, task: str, client: TextClient, *, retries: int = 1
) -> list[ImageScores | None]:
    """Per-image criterion scores in reading order; failed images stay None."""
    results: list[ImageScores | None] = []
    for position, block in enumerate(doc.segments):
        if isinstance(block, FailedImageBlock):
            results.append(None)
            continue
        if not isinstance(block, ImageBlock):
            continue
        prov = block.asset.provenance
        image_line = (
            f"source={prov.source.value} digest={prov.params_digest[:16]} "
            f"description={block.directive.description}"
        )
        prompt = render_prompt(
            "mllm_judge", task=task, image=image_line, context=_image_context(doc, position)
        )

        def parse(reply: str) -> ImageScores:
            obj = extract_json(reply)
            if obj is None:
                raise ValueError("no JSON object in reply")
            return ImageScores(
                image_quality=_int_field(obj, "image_quality", 1, 5),
                image_text_alignment=_int_field(obj, "image_text_alignment", 1, 5),
                task_relevance=_int_field(obj, "task_relevance", 1, 5),
            )

        scores = _ask(client, prompt, parse, retries=retries)
        results.append(scores if scores is not None else ImageScores(1, 1, 1))
    return results


def judge_rubric_criterion(
    document_text: str, criterion: str, client: TextClient, *, retries: int = 1
) -> int:
    """Score one verifiable requirement on the 0/1/2 scale; 0 on judge failure."""

    prompt = render_prompt("rubric_judge", criterion=criterion, document=document_text)

    def parse(reply: str) -> int:
        obj = extract_json(reply)
        if obj is None:
            raise ValueError("no JSON object in reply")
        return _int_field(obj, "score", 0, 2)

    score = _ask(client, prompt, parse, retries=retries)
    return score if score is not None else 0


def parse_index_list(reply: str, *, limit: int) -> list[int] | None:
    """Parse a selector reply of comma/space-separated indices; None if hopeless."""
    found = re.findall(r"\d+", reply or "")
    if not found:
        return None
    indices: list[int] = []
    for token in found:
        value = int(token)
        if 0 <= value < limit and value not in indices:
            indices.append(value)
    return indices or None


def uniform_judge(llm: int = 4, image: int = 4, rubric: int = 2) -> FunctionClient:
    """Deterministic stand-in judge for offline runs: fixed scores per schema."""

    def reply(prompt: str) -> str:
        if '"text_quality"' in prompt:
            return json.dumps({"text_quality": llm, "tag_quality": llm})
        if '"image_quality"' in prompt:
            return json.dumps(
                {"image_quality": image, "image_text_alignment": image, "task_relevance": image}
            )
        if '"score"' in prompt:
            return json.dumps({"score": rubric})
        return "0"

    return FunctionClient(reply)
