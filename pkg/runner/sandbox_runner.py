#!/usr/bin/env python3
"""Isolated executor for plotting scripts, driven over a line protocol.

One JSON request per stdin line, one JSON result per stdout line:

    request:  {"code": str, "timeout_s": float, "workdir": str,
               "dry_run": bool, "output_cap": int}
    result:   {"status": "ok|error|timeout", "stdout": str, "stderr": str,
               "images": [str], "wall_time": float}

Launch contract: ``python sandbox_runner.py <sandbox-root>``. Every request
runs in a fresh child process with no network access, a private home and
temp directory, bounded memory/CPU/file size, and wall-clock enforcement
with a hard kill. Figure capture hooks the plotting library's save path, so
scripts that only call ``show()`` still produce files. Binary image data
never crosses the pipe; results reference files inside the request workdir.

Isolation is process-level (resource limits plus Python audit hooks), not
container-grade; see README for the documented boundary.
"""
from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time
import traceback
from pathlib import Path

HARD_TIMEOUT_CAP_S = 60.0
DEFAULT_TIMEOUT_S = 30.0
DEFAULT_OUTPUT_CAP = 32768
CAPTURE_NAME = ".capture.json"
KILL_GRACE_NOTE = "hard kill at wall-clock limit"

# Runs inside the child process. Order matters: library imports first (the
# audit hook would otherwise flag matplotlib's font-cache build), then
# resource limits, then the hooks, then the untrusted script.
HARNESS_SOURCE = r'''
import json, os, sys, traceback

request = json.loads(sys.stdin.read())
code = request["code"]
workdir = os.path.realpath(request["workdir"])
cpu_cap = int(request.get("cpu_s", 65))
capture_path = os.path.join(workdir, ".capture.json")

import matplotlib
matplotlib.use("Agg", force=True)
import matplotlib.pyplot as plt
from matplotlib.figure import Figure

captured = []

def _record(path):
    try:
        real = os.path.realpath(str(path))
    except Exception:
        return
    if real.startswith(workdir + os.sep) and os.path.isfile(real) and real not in captured:
        captured.append(real)

_original_savefig = Figure.savefig
_saved_figures = set()

def _capturing_savefig(self, fname, *args, **kwargs):
    result = _original_savefig(self, fname, *args, **kwargs)
    _saved_figures.add(id(self))
    if isinstance(fname, (str, os.PathLike)):
        _record(fname)
    return result

Figure.savefig = _capturing_savefig

_auto_counter = [0]

def _save_open_figures():
    # Figures the script never saved itself are captured automatically.
    for num in list(plt.get_fignums()):
        figure = plt.figure(num)
        if id(figure) in _saved_figures:
            continue
        _auto_counter[0] += 1
        figure.savefig(os.path.join(workdir, "figure_auto_%d.png" % _auto_counter[0]))
    plt.close("all")

plt.show = lambda *args, **kwargs: _save_open_figures()

import resource
for limit, value in (
    (resource.RLIMIT_AS, 2 << 30),        # 2 GiB address space
    (resource.RLIMIT_FSIZE, 64 << 20),    # 64 MiB per file
    (resource.RLIMIT_CPU, cpu_cap),
):
    try:
        resource.setrlimit(limit, (value, value))
    except (ValueError, OSError):
        pass

_allowed_roots = [workdir]
_mpl_dir = os.environ.get("MPLCONFIGDIR")
if _mpl_dir:
    _allowed_roots.append(os.path.realpath(_mpl_dir))

def _writable(path):
    if isinstance(path, int):
        return True
    try:
        real = os.path.realpath(os.fspath(path))
    except Exception:
        return False
    if real == os.devnull:
        return True
    return any(real == root or real.startswith(root + os.sep) for root in _allowed_roots)

_WRITE_FLAGS = os.O_WRONLY | os.O_RDWR | os.O_APPEND | os.O_CREAT | os.O_TRUNC
_BLOCKED_CALLS = (
    "subprocess.Popen", "os.system", "os.exec", "os.fork", "os.forkpty",
    "os.posix_spawn", "os.spawn", "pty.spawn",
)
_PATH_EVENTS = (
    "os.remove", "os.unlink", "os.rename", "os.rmdir", "os.mkdir",
    "os.link", "os.symlink", "os.truncate", "shutil.rmtree", "shutil.move",
)

def _gate(event, args):
    if event.startswith("socket."):
        raise PermissionError("network access is disabled in the sandbox")
    if event.startswith(_BLOCKED_CALLS):
        raise PermissionError("spawning processes is disabled in the sandbox")
    if event == "open":
        path, mode, flags = args
        wants_write = False
        if mode is None:
            wants_write = bool(flags & _WRITE_FLAGS)
        elif isinstance(mode, str):
            wants_write = any(ch in mode for ch in "wax+")
        if wants_write and not _writable(path):
            raise PermissionError("write outside the sandbox workdir: %r" % (path,))
        return
    if event in _PATH_EVENTS:
        for arg in args:
            if isinstance(arg, (str, bytes, os.PathLike)) and not _writable(arg):
                raise PermissionError("filesystem change outside the sandbox workdir: %r" % (arg,))

sys.addaudithook(_gate)

status = 0
script_globals = {"__name__": "__main__", "__file__": os.path.join(workdir, "script.py")}
try:
    exec(compile(code, "script.py", "exec"), script_globals)
except SystemExit as exn:
    status = exn.code if isinstance(exn.code, int) else (0 if exn.code is None else 1)
except BaseException:
    traceback.print_exc()
    status = 1
finally:
    try:
        _save_open_figures()
    except Exception:
        pass
    try:
        with open(capture_path, "w") as fh:
            json.dump({"images": captured}, fh)
    except Exception:
        pass
sys.exit(status)
'''


def _truncated(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return text[:cap] + f"\n... [truncated at {cap} bytes]"


def _result(status: str, *, stdout: str = "", stderr: str = "", images: list[str] | None = None,
            wall_time: float = 0.0, cap: int = DEFAULT_OUTPUT_CAP) -> dict:
    return {
        "status": status,
        "stdout": _truncated(stdout, cap),
        "stderr": _truncated(stderr, cap),
        "images": images or [],
        "wall_time": wall_time,
    }


def _dry_run(code: str, cap: int) -> dict:
    started = time.monotonic()
    try:
        compile(code, "script.py", "exec")
    except SyntaxError as err:
        message = "".join(traceback.format_exception_only(type(err), err))
        return _result("error", stderr=message, wall_time=time.monotonic() - started, cap=cap)
    return _result("ok", wall_time=time.monotonic() - started, cap=cap)


def _child_env(workdir: Path, mpl_dir: Path, tmp_dir: Path) -> dict[str, str]:
    return {
        "PATH": "/usr/bin:/bin",
        "HOME": str(workdir),
        "TMPDIR": str(tmp_dir),
        "MPLCONFIGDIR": str(mpl_dir),
        "MPLBACKEND": "Agg",
        "PYTHONDONTWRITEBYTECODE": "1",
        "LANG": os.environ.get("LANG", "C.UTF-8"),
    }


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    proc.wait()


def _collect_images(workdir: Path) -> list[str]:
    capture = workdir / CAPTURE_NAME
    if not capture.is_file():
        return []
    try:
        listed = json.loads(capture.read_text()).get("images", [])
    except (ValueError, OSError):
        return []
    images = []
    for item in listed:
        path = Path(str(item))
        try:
            inside = path.resolve().is_relative_to(workdir.resolve())
        except (OSError, ValueError):
            inside = False
        if inside and path.is_file():
            images.append(str(path))
    return images


def handle_request(request: dict, root: Path, harness_path: Path, mpl_dir: Path) -> dict:
    code = request.get("code")
    cap = int(request.get("output_cap", DEFAULT_OUTPUT_CAP) or DEFAULT_OUTPUT_CAP)
    if not isinstance(code, str) or not code:
        return _result("error", stderr="request carries no code", cap=cap)
    timeout_s = float(request.get("timeout_s", DEFAULT_TIMEOUT_S))
    timeout_s = min(max(timeout_s, 0.1), HARD_TIMEOUT_CAP_S)
    if request.get("dry_run"):
        return _dry_run(code, cap)

    raw_workdir = request.get("workdir")
    if not raw_workdir:
        return _result("error", stderr="request carries no workdir", cap=cap)
    workdir = Path(raw_workdir)
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        if not workdir.resolve().is_relative_to(root.resolve()):
            return _result("error", stderr=f"workdir {workdir} is outside the sandbox root", cap=cap)
        if any(workdir.iterdir()):
            return _result("error", stderr=f"workdir {workdir} is not empty", cap=cap)
        tmp_dir = workdir / "tmp"
        tmp_dir.mkdir()
    except OSError as err:
        return _result("error", stderr=f"workdir setup failed: {err}", cap=cap)

    payload = json.dumps({"code": code, "workdir": str(workdir), "cpu_s": int(timeout_s) + 5})
    started = time.monotonic()
    proc = subprocess.Popen(
        [sys.executable, "-B", str(harness_path)],
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        cwd=str(workdir),
        env=_child_env(workdir, mpl_dir, tmp_dir),
        text=True,
        start_new_session=True,
    )
    try:
        stdout, stderr = proc.communicate(input=payload, timeout=timeout_s)
    except subprocess.TimeoutExpired:
        _kill_group(proc)
        stdout, stderr = proc.communicate()
        wall = time.monotonic() - started
        return _result(
            "timeout",
            stdout=stdout or "",
            stderr=(stderr or "") + f"\n{KILL_GRACE_NOTE}: {timeout_s:.1f}s",
            wall_time=wall,
            cap=cap,
        )
    wall = time.monotonic() - started
    images = _collect_images(workdir)
    if proc.returncode == 0 and images:
        return _result("ok", stdout=stdout, stderr=stderr, images=images, wall_time=wall, cap=cap)
    if proc.returncode == 0:
        return _result(
            "error", stdout=stdout,
            stderr=(stderr or "") + "\nscript completed without producing a figure",
            wall_time=wall, cap=cap,
        )
    return _result("error", stdout=stdout, stderr=stderr, wall_time=wall, cap=cap)


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: sandbox_runner.py <sandbox-root>", file=sys.stderr)
        return 2
    root = Path(args[0]).resolve()
    root.mkdir(parents=True, exist_ok=True)
    harness_path = root / "_harness.py"
    harness_path.write_text(HARNESS_SOURCE)
    mpl_dir = root / ".mplcache"
    mpl_dir.mkdir(exist_ok=True)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            result = handle_request(request, root, harness_path, mpl_dir)
        except Exception as err:  # noqa: BLE001 - every request line gets a reply
            result = _result("error", stderr=f"runner fault: {type(err).__name__}: {err}")
        sys.stdout.write(json.dumps(result) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
