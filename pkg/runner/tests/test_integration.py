"""Integration through the host package's sandbox client.

The host spawns the runner with the sandbox root as its only argument and
talks the line protocol; these tests exercise that exact surface. They need
the ``interweave`` package installed (``pip install -e .`` at the repo root).
"""
from __future__ import annotations

import sys
from pathlib import Path

import pytest

interweave = pytest.importorskip("interweave")

from interweave.tools import ExecLimits, ToolError  # noqa: E402
from interweave.tools.sandbox import CodeClient, ExecRequest, ProcessSandbox  # noqa: E402

RUNNER = Path(__file__).resolve().parent.parent / "sandbox_runner.py"

GOLDEN_SCRIPT = """\
import matplotlib.pyplot as plt
fig, ax = plt.subplots()
ax.bar(["a", "b", "c"], [3, 1, 2])
fig.savefig("bars.png")
"""


@pytest.fixture(scope="module")
def sandbox(tmp_path_factory):
    root = tmp_path_factory.mktemp("sandbox-root")
    process = ProcessSandbox([sys.executable, str(RUNNER)], root)
    yield process
    process.close()


def test_execute_code_returns_png_asset(sandbox, tmp_path):
    client = CodeClient(sandbox, sandbox.root / "work")
    asset = client.execute(GOLDEN_SCRIPT, ExecLimits(timeout_s=50))
    assert asset.media_type == "png"
    assert asset.content[:8] == b"\x89PNG\r\n\x1a\n"
    assert asset.provenance.backend == "sandbox"


def test_execute_code_failure_carries_traceback(sandbox, tmp_path):
    client = CodeClient(sandbox, sandbox.root / "work")
    with pytest.raises(ToolError) as err:
        client.execute("nope()\n", ExecLimits(timeout_s=30))
    assert err.value.kind == "sandbox_error"
    assert "NameError" in err.value.detail


def test_execute_code_timeout(sandbox, tmp_path):
    client = CodeClient(sandbox, sandbox.root / "work")
    with pytest.raises(ToolError) as err:
        client.execute("while True: pass\n", ExecLimits(timeout_s=2))
    assert err.value.kind == "timeout"


def test_dry_run_check_through_client(sandbox, tmp_path):
    client = CodeClient(sandbox, sandbox.root / "work")
    assert client.check("x = 1\n").status == "ok"
    bad = client.check("def broken(:\n")
    assert bad.status == "error"
    assert "SyntaxError" in bad.stderr


def test_sandbox_survives_runner_death(tmp_path):
    root = tmp_path / "root"
    process = ProcessSandbox([sys.executable, str(RUNNER)], root)
    try:
        first = process.run(
            ExecRequest(code="x = 1", timeout_s=5, workdir=str(root / "w1"), dry_run=True)
        )
        assert first.status == "ok"
        process._proc.kill()  # simulate a crashed runner
        process._proc.wait()
        second = process.run(
            ExecRequest(code="x = 1", timeout_s=5, workdir=str(root / "w2"), dry_run=True)
        )
        assert second.status == "ok"
    finally:
        process.close()
