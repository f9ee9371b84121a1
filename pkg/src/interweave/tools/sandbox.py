"""Code-tool client speaking the sandbox runner's line protocol.

One serialized request object per line on the runner's stdin, one result
object per line on its stdout. Binary image data never crosses the pipe;
results reference figure files by path.
"""
from __future__ import annotations

import json
import logging
import queue
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from ..tags import SourceKind
from .base import ExecLimits, ImageAsset, ToolError, ToolProvenance, params_digest

logger = logging.getLogger(__name__)

READ_GRACE_S = 5.0


@dataclass(frozen=True)
class ExecRequest:
    code: str
    timeout_s: float
    workdir: str
    dry_run: bool = False
    output_cap: int = 32768

    def to_wire(self) -> dict:
        return {
            "code": self.code,
            "timeout_s": self.timeout_s,
            "workdir": self.workdir,
            "dry_run": self.dry_run,
            "output_cap": self.output_cap,
        }


@dataclass(frozen=True)
class ExecResult:
    status: str  # ok | error | timeout
    stdout: str = ""
    stderr: str = ""
    images: tuple[str, ...] = ()
    wall_time: float = 0.0

    @classmethod
    def from_wire(cls, obj: dict) -> "ExecResult":
        return cls(
            status=str(obj.get("status", "error")),
            stdout=str(obj.get("stdout", "")),
            stderr=str(obj.get("stderr", "")),
            images=tuple(str(p) for p in obj.get("images", ())),
            wall_time=float(obj.get("wall_time", 0.0)),
        )


class SandboxProtocol(Protocol):
    def run(self, request: ExecRequest) -> ExecResult: ...


class ProcessSandbox:
    """Talks to a runner subprocess; spawns it lazily and restarts it if it wedges.

    The runner command is configured externally and is launched with the
    sandbox root as its only argument. Requests are serialized through a lock:
    one runner process handles requests sequentially.
    """

    def __init__(self, runner_cmd: Sequence[str], root: Path | str, *, grace_s: float = READ_GRACE_S):
        self._cmd = [str(part) for part in runner_cmd]
        self.root = Path(root)
        self._grace_s = grace_s
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._lock = threading.Lock()

    def run(self, request: ExecRequest) -> ExecResult:
        with self._lock:
            self._ensure()
            assert self._proc is not None and self._proc.stdin is not None
            try:
                self._proc.stdin.write(json.dumps(request.to_wire()) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as err:
                self._kill()
                return ExecResult("error", stderr=f"runner pipe broke: {err}")
            deadline = request.timeout_s + self._grace_s
            try:
                line = self._lines.get(timeout=deadline)
            except queue.Empty:
                line = None
            if line is None:
                self._kill()
                return ExecResult(
                    "timeout", stderr=f"runner did not respond within {deadline:.1f}s", wall_time=deadline
                )
            try:
                return ExecResult.from_wire(json.loads(line))
            except (ValueError, TypeError) as err:
                self._kill()
                return ExecResult("error", stderr=f"unparseable runner reply: {err}")

    def close(self) -> None:
        with self._lock:
            self._kill()

    def _ensure(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        self._lines = queue.Queue()
        self._proc = subprocess.Popen(
            self._cmd + [str(self.root)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        threading.Thread(target=self._pump, args=(self._proc,), daemon=True).start()

    def _pump(self, proc: subprocess.Popen) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _kill(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()
        self._proc = None


class CodeClient:
    """Runs code-tool payloads through a sandbox and wraps figures as assets.

    ``work_root`` holds the per-call workdirs; with a process sandbox it must
    sit under the runner's sandbox root, which the runner enforces.
    """

    def __init__(self, sandbox: SandboxProtocol, work_root: Path | str, *, backend: str = "sandbox"):
        self.sandbox = sandbox
        self.work_root = Path(work_root)
        self.backend = backend

    def execute(self, code: str, limits: ExecLimits | None = None) -> ImageAsset:
        if not code:
            raise ValueError("code must be non-empty")
        limits = limits or ExecLimits()
        digest = params_digest({"code": code})
        workdir = self._fresh_workdir(f"exec-{digest[:12]}-")
        request = ExecRequest(
            code=code,
            timeout_s=limits.timeout_s,
            workdir=str(workdir),
            dry_run=False,
            output_cap=limits.output_cap,
        )
        started = time.monotonic()
        result = self.sandbox.run(request)
        latency = time.monotonic() - started
        if result.status == "ok" and result.images:
            path = Path(result.images[0])
            content = path.read_bytes()
            media = {"jpg": "jpeg", "jpeg": "jpeg", "webp": "webp"}.get(path.suffix.lstrip(".").lower(), "png")
            provenance = ToolProvenance(SourceKind.CODE, digest, self.backend, latency, 1)
            return ImageAsset(content, media, provenance)
        if result.status == "timeout":
            raise ToolError("timeout", result.stderr or f"execution exceeded {limits.timeout_s}s")
        detail = result.stderr or result.stdout or "no figure produced"
        raise ToolError("sandbox_error", detail)

    def check(self, code: str, *, timeout_s: float = 10.0) -> ExecResult:
        """Compile-only validation used by the structural tool-call check."""
        if not code:
            raise ValueError("code must be non-empty")
        workdir = self._fresh_workdir("check-")
        return self.sandbox.run(
            ExecRequest(code=code, timeout_s=timeout_s, workdir=str(workdir), dry_run=True)
        )

    def _fresh_workdir(self, prefix: str) -> Path:
        # Workdirs must be unique even across client instances sharing a root.
        self.work_root.mkdir(parents=True, exist_ok=True)
        return Path(tempfile.mkdtemp(prefix=prefix, dir=self.work_root))
