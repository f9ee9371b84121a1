"""Uniform interface to the four visual tools with mock and live backends."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .base import (
    ExecLimits,
    ImageAsset,
    ToolError,
    ToolFailure,
    ToolOutcome,
    ToolProvenance,
    call_with_retries,
    canonical_params,
    params_digest,
)
from .cache import AssetCache
from .mock import (
    MockDiffusionClient,
    MockEditClient,
    MockSandbox,
    MockSearchClient,
    SandboxScript,
    render_marker_image,
)
from .sandbox import CodeClient, ExecRequest, ExecResult, ProcessSandbox, SandboxProtocol


class SearchClient(Protocol):
    def search(self, query: str, count: int = 1) -> list[ImageAsset]: ...


class DiffusionClient(Protocol):
    def generate(self, prompt: str) -> ImageAsset: ...


class EditClient(Protocol):
    def edit(self, base: ImageAsset, prompt: str) -> ImageAsset: ...


@dataclass
class ToolSet:
    """The four tool clients an orchestrator dispatches to."""

    search: SearchClient
    diffusion: DiffusionClient
    code: CodeClient
    edit: EditClient


def mock_toolset(
    work_root: Path | str | None = None,
    *,
    latency: float = 0.0,
    sandbox: SandboxProtocol | None = None,
) -> ToolSet:
    """Fully offline toolset; every output is deterministic in its params."""
    root = Path(work_root) if work_root else Path(tempfile.mkdtemp(prefix="interweave-mock-"))
    return ToolSet(
        search=MockSearchClient(latency=latency),
        diffusion=MockDiffusionClient(latency=latency),
        code=CodeClient(sandbox or MockSandbox(), root, backend="mock"),
        edit=MockEditClient(latency=latency),
    )


__all__ = [
    "AssetCache",
    "CodeClient",
    "DiffusionClient",
    "EditClient",
    "ExecLimits",
    "ExecRequest",
    "ExecResult",
    "ImageAsset",
    "MockDiffusionClient",
    "MockEditClient",
    "MockSandbox",
    "MockSearchClient",
    "ProcessSandbox",
    "SandboxProtocol",
    "SandboxScript",
    "SearchClient",
    "ToolError",
    "ToolFailure",
    "ToolOutcome",
    "ToolProvenance",
    "ToolSet",
    "call_with_retries",
    "canonical_params",
    "mock_toolset",
    "params_digest",
    "render_marker_image",
]
