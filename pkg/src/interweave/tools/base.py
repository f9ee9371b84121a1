"""Shared tool-client types: assets, failures, provenance and param digests."""
from __future__ import annotations

import hashlib
import json
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass
from typing import TypeVar

from ..tags import SourceKind

MEDIA_TYPES = ("png", "jpeg", "webp")

FAILURE_KINDS = ("timeout", "remote_error", "schema_error", "sandbox_error", "dependency_error")

_EXTENSIONS = {"png": "png", "jpeg": "jpg", "webp": "webp"}


@dataclass(frozen=True)
class ToolProvenance:
    """How an asset came to be: which backend produced it, from what params."""

    source: SourceKind
    params_digest: str
    backend: str
    latency: float = 0.0
    attempts: int = 1

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.latency < 0:
            raise ValueError("latency must be >= 0")


@dataclass(frozen=True)
class ImageAsset:
    content: bytes
    media_type: str
    provenance: ToolProvenance

    def __post_init__(self) -> None:
        if not self.content:
            raise ValueError("asset content must be non-empty")
        if self.media_type not in MEDIA_TYPES:
            raise ValueError(f"media_type must be one of {MEDIA_TYPES}")

    @property
    def extension(self) -> str:
        return _EXTENSIONS[self.media_type]

    def content_digest(self) -> str:
        return hashlib.sha256(self.content).hexdigest()


@dataclass(frozen=True)
class ToolFailure:
    kind: str
    detail: str = ""

    def __post_init__(self) -> None:
        if self.kind not in FAILURE_KINDS:
            raise ValueError(f"failure kind must be one of {FAILURE_KINDS}")


class ToolError(Exception):
    """Raised by tool backends; converted to a ToolFailure at dispatch time."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail

    def failure(self) -> ToolFailure:
        return ToolFailure(self.kind, self.detail)


@dataclass(frozen=True)
class ToolOutcome:
    """Result of dispatching one directive, keyed by its ordinal."""

    ordinal: int
    result: ImageAsset | ToolFailure

    @property
    def ok(self) -> bool:
        return isinstance(self.result, ImageAsset)

    @property
    def asset(self) -> ImageAsset:
        if not isinstance(self.result, ImageAsset):
            raise ValueError(f"outcome for ordinal {self.ordinal} is a failure")
        return self.result

    @property
    def failure(self) -> ToolFailure:
        if not isinstance(self.result, ToolFailure):
            raise ValueError(f"outcome for ordinal {self.ordinal} is a success")
        return self.result


@dataclass(frozen=True)
class ExecLimits:
    """Resource bounds for one code-tool execution."""

    timeout_s: float = 30.0
    output_cap: int = 32768

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.output_cap <= 0:
            raise ValueError("output_cap must be positive")


def canonical_params(params: Mapping[str, object]) -> dict[str, object]:
    """Lowercase key names, sort keys, trim string values."""
    out: dict[str, object] = {}
    for key in sorted(params, key=lambda k: str(k).lower()):
        value = params[key]
        if isinstance(value, str):
            value = value.strip()
        out[str(key).lower()] = value
    return out


def params_digest(params: Mapping[str, object]) -> str:
    """Stable digest of canonicalized params; used for caching and provenance."""
    blob = json.dumps(canonical_params(params), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


T = TypeVar("T")


def call_with_retries(
    fn: Callable[[], T],
    *,
    retries: int = 2,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[T, int]:
    """Call ``fn``, retrying remote errors with exponential backoff.

    Only ``remote_error`` failures are retried; sandbox errors are
    deterministic and retrying them wastes budget. Returns the value and the
    number of attempts actually made.
    """
    attempt = 1
    while True:
        try:
            return fn(), attempt
        except ToolError as err:
            if err.kind != "remote_error" or attempt > retries:
                raise
            sleep(base_delay * (2 ** (attempt - 1)))
            attempt += 1
