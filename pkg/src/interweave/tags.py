"""Lexing, parsing and serialization of inline image directives.

The wire format is one JSON object wrapped in a tag pair:

    <imgen>{"source":"search","description":"Eiffel Tower","params":{"query":"eiffel tower photo"}}</imgen>

Four sources are recognized (search, diffusion, code, edit), each with its own
parameter schema. Anything that does not conform is kept in the output as plain
text together with a diagnostic; parsing never raises because of input content.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

OPEN_TAG = "<imgen>"
CLOSE_TAG = "</imgen>"

_TOP_KEYS = ("source", "description", "params")


class SourceKind(Enum):
    """Which of the four visual tools a directive targets."""

    SEARCH = "search"
    DIFFUSION = "diffusion"
    CODE = "code"
    EDIT = "edit"


_SOURCES = {kind.value: kind for kind in SourceKind}


@dataclass(frozen=True)
class SearchParams:
    query: str

    def __post_init__(self) -> None:
        if not isinstance(self.query, str) or not self.query:
            raise ValueError("search query must be a non-empty string")


@dataclass(frozen=True)
class DiffusionParams:
    prompt: str

    def __post_init__(self) -> None:
        if not isinstance(self.prompt, str) or not self.prompt:
            raise ValueError("diffusion prompt must be a non-empty string")


@dataclass(frozen=True)
class CodeParams:
    code: str

    def __post_init__(self) -> None:
        if not isinstance(self.code, str) or not self.code:
            raise ValueError("code script must be a non-empty string")


@dataclass(frozen=True)
class EditParams:
    img_index: int
    prompt: str

    def __post_init__(self) -> None:
        if isinstance(self.img_index, bool) or not isinstance(self.img_index, int):
            raise ValueError("img index must be an integer")
        if self.img_index < 0:
            raise ValueError("img index must be non-negative")
        if not isinstance(self.prompt, str) or not self.prompt:
            raise ValueError("edit prompt must be a non-empty string")


ParamSet = SearchParams | DiffusionParams | CodeParams | EditParams


@dataclass(frozen=True)
class ImageDirective:
    """One parsed tag: where the image comes from and with what parameters.

    ``span`` is the half-open range of the full tag (including the tag
    markers) in the raw response; ``ordinal`` is the directive's 0-based
    position among directives in reading order.
    """

    source: SourceKind
    description: str
    params: ParamSet
    span: tuple[int, int] = (0, 0)
    ordinal: int = 0

    def signature(self) -> tuple[SourceKind, str, ParamSet]:
        """Content identity, ignoring position within the response."""
        return (self.source, self.description, self.params)


@dataclass(frozen=True)
class ParseDiagnostic:
    position: int
    kind: str  # unterminated | invalid-json | unknown-source | schema
    message: str


@dataclass(frozen=True)
class TextSegment:
    text: str
    span: tuple[int, int]


@dataclass(frozen=True)
class DirectiveSegment:
    directive: ImageDirective
    raw: str

    @property
    def span(self) -> tuple[int, int]:
        return self.directive.span


Segment = TextSegment | DirectiveSegment


@dataclass(frozen=True)
class ParsedResponse:
    raw: str
    segments: tuple[Segment, ...]
    diagnostics: tuple[ParseDiagnostic, ...]

    @property
    def directives(self) -> tuple[ImageDirective, ...]:
        return tuple(s.directive for s in self.segments if isinstance(s, DirectiveSegment))

    def reconstruct(self) -> str:
        """Concatenation of segment source text; always equals ``raw``."""
        return "".join(s.text if isinstance(s, TextSegment) else s.raw for s in self.segments)


class _PayloadError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.message = message


def parse_response(raw: str) -> ParsedResponse:
    """Split a raw model response into text segments and image directives.

    Total over arbitrary input: malformed tags become text segments with one
    diagnostic each, and never disturb later well-formed tags. Concatenating
    the segments always reproduces the input exactly.
    """
    segments: list[Segment] = []
    diagnostics: list[ParseDiagnostic] = []
    pos = 0
    ordinal = 0
    n = len(raw)
    while pos < n:
        start = raw.find(OPEN_TAG, pos)
        if start == -1:
            segments.append(TextSegment(raw[pos:], (pos, n)))
            break
        if start > pos:
            segments.append(TextSegment(raw[pos:start], (pos, start)))
        payload_start = start + len(OPEN_TAG)
        close = _find_close(raw, payload_start)
        if close == -1:
            diagnostics.append(
                ParseDiagnostic(start, "unterminated", "opening tag without a closing tag")
            )
            segments.append(TextSegment(raw[start:], (start, n)))
            break
        end = close + len(CLOSE_TAG)
        try:
            source, description, params = _directive_from_payload(raw[payload_start:close])
        except _PayloadError as err:
            diagnostics.append(ParseDiagnostic(start, err.kind, err.message))
            segments.append(TextSegment(raw[start:end], (start, end)))
        else:
            directive = ImageDirective(source, description, params, (start, end), ordinal)
            segments.append(DirectiveSegment(directive, raw[start:end]))
            ordinal += 1
        pos = end
    return ParsedResponse(raw, tuple(segments), tuple(diagnostics))


def _find_close(raw: str, start: int) -> int:
    # Track JSON string state so a closing tag inside a quoted value (e.g. in
    # a code payload) does not terminate the tag early.
    in_str = False
    escaped = False
    i = start
    n = len(raw)
    while i < n:
        ch = raw[i]
        if in_str:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "<" and raw.startswith(CLOSE_TAG, i):
            return i
        i += 1
    # Malformed payloads can desync the string tracking (an unbalanced quote
    # would swallow the close); fall back to a plain scan for recovery.
    return raw.find(CLOSE_TAG, start)


def _directive_from_payload(payload: str) -> tuple[SourceKind, str, ParamSet]:
    try:
        obj = json.loads(payload)
    except (ValueError, RecursionError) as err:
        raise _PayloadError("invalid-json", f"payload is not valid JSON: {err}") from None
    if not isinstance(obj, dict):
        raise _PayloadError("schema", "payload must be a JSON object")
    if "source" not in obj:
        raise _PayloadError("schema", "missing key: source")
    if not isinstance(obj["source"], str) or obj["source"] not in _SOURCES:
        raise _PayloadError("unknown-source", f"unknown source: {obj['source']!r}")
    source = _SOURCES[obj["source"]]
    extra = sorted(set(obj) - set(_TOP_KEYS))
    if extra:
        raise _PayloadError("schema", f"unexpected keys: {extra}")
    missing = sorted(k for k in _TOP_KEYS if k not in obj)
    if missing:
        raise _PayloadError("schema", f"missing keys: {missing}")
    description = obj["description"]
    if not isinstance(description, str):
        raise _PayloadError("schema", "description must be a string")
    raw_params = obj["params"]
    if not isinstance(raw_params, dict):
        raise _PayloadError("schema", "params must be a JSON object")
    return source, description, _params_from_wire(source, raw_params)


def _params_from_wire(source: SourceKind, raw: dict) -> ParamSet:
    if source is SourceKind.EDIT:
        # The canonical key spelling contains a space; the underscore variant
        # is accepted because some emitters normalize it.
        spellings = [k for k in ("img index", "img_index") if k in raw]
        if not spellings:
            raise _PayloadError("schema", "edit params missing key: img index")
        if len(spellings) == 2:
            raise _PayloadError("schema", "edit params carry both img index spellings")
        expected = {spellings[0], "prompt"}
        _check_param_keys(raw, expected)
        try:
            return EditParams(img_index=raw[spellings[0]], prompt=raw.get("prompt"))
        except ValueError as err:
            raise _PayloadError("schema", str(err)) from None
    single = {SourceKind.SEARCH: "query", SourceKind.DIFFUSION: "prompt", SourceKind.CODE: "code"}
    key = single[source]
    _check_param_keys(raw, {key})
    try:
        if source is SourceKind.SEARCH:
            return SearchParams(query=raw[key])
        if source is SourceKind.DIFFUSION:
            return DiffusionParams(prompt=raw[key])
        return CodeParams(code=raw[key])
    except ValueError as err:
        raise _PayloadError("schema", str(err)) from None


def _check_param_keys(raw: dict, expected: set[str]) -> None:
    missing = sorted(expected - set(raw))
    if missing:
        raise _PayloadError("schema", f"params missing key: {missing[0]}")
    extra = sorted(set(raw) - expected)
    if extra:
        raise _PayloadError("schema", f"params carry unexpected keys: {extra}")


def wire_params(params: ParamSet) -> dict:
    """Parameter object exactly as it appears on the wire."""
    if isinstance(params, SearchParams):
        return {"query": params.query}
    if isinstance(params, DiffusionParams):
        return {"prompt": params.prompt}
    if isinstance(params, CodeParams):
        return {"code": params.code}
    return {"img index": params.img_index, "prompt": params.prompt}


def serialize_directive(directive: ImageDirective) -> str:
    """Render a directive back to its exact wire form.

    Keys are emitted in the order source, description, params;
    ``parse_response(serialize_directive(d))`` recovers ``d`` up to its span.
    """
    obj = {
        "source": directive.source.value,
        "description": directive.description,
        "params": wire_params(directive.params),
    }
    return OPEN_TAG + json.dumps(obj, separators=(",", ":"), ensure_ascii=False) + CLOSE_TAG


def count_directives(parsed: ParsedResponse) -> int:
    """Number of syntactically valid directives, independent of tool success."""
    return sum(1 for s in parsed.segments if isinstance(s, DirectiveSegment))
