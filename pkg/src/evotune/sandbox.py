"""Run candidate programs in a child interpreter under time and memory limits."""

from __future__ import annotations

import json
import logging
import math
import os
import signal
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from evotune.tasks import InstanceSet, save_instance_set

logger = logging.getLogger(__name__)

STATUSES = ("ok", "timeout", "memory_exceeded", "runtime_error", "invalid_output")
STDERR_LIMIT = 4096


@dataclass
class ResourceLimits:
    wall_clock_seconds: float = 60.0
    memory_bytes: int = 5 * 2**30

    def __post_init__(self):
        if self.wall_clock_seconds <= 0 or self.memory_bytes <= 0:
            raise ValueError("resource limits must be positive")

    @classmethod
    def for_task(cls, task_name: str, **overrides) -> "ResourceLimits":
        defaults = {"tsp": 90.0}
        kw = {"wall_clock_seconds": defaults.get(task_name, 60.0)}
        kw.update(overrides)
        return cls(**kw)


@dataclass
class ExecutionResult:
    status: str
    per_instance_scores: Optional[list[float]] = None
    reward: Optional[float] = None
    stderr_excerpt: str = ""
    duration_seconds: float = 0.0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "per_instance_scores": self.per_instance_scores,
            "reward": self.reward,
            "stderr_excerpt": self.stderr_excerpt,
            "duration_seconds": self.duration_seconds,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionResult":
        return cls(**{k: d.get(k) for k in ("status", "per_instance_scores", "reward")},
                   stderr_excerpt=d.get("stderr_excerpt", ""),
                   duration_seconds=d.get("duration_seconds", 0.0),
                   detail=d.get("detail", ""))


def _tail(text: str, limit: int = STDERR_LIMIT) -> str:
    data = text.encode("utf-8", "replace")
    if len(data) <= limit:
        return text
    return data[-limit:].decode("utf-8", "replace")


def _child_env() -> dict:
    env = dict(os.environ)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = "1"
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "") if env.get("PYTHONPATH") else src
    return env


class Sandbox:
    """Evaluates programs, one child process per candidate.

    ``workers`` child processes may run at once (default: cores - 1, at
    least 1). Results of :meth:`evaluate_many` come back in input order.
    """

    def __init__(self, python: str = sys.executable, workers: Optional[int] = None):
        self.python = python
        self.workers = workers or max(1, (os.cpu_count() or 2) - 1)
        self._env = _child_env()

    def evaluate(self, source: str, task_name: str, instances: Path | str | InstanceSet,
                 limits: ResourceLimits) -> ExecutionResult:
        if not source or not source.strip():
            raise ValueError("empty program source")
        if isinstance(instances, InstanceSet):
            if not instances.instances:
                raise ValueError("empty instance set")
            with tempfile.TemporaryDirectory() as tmp:
                path = save_instance_set(instances, Path(tmp) / "instances.json")
                return self._run(source, task_name, path, limits)
        return self._run(source, task_name, Path(instances), limits)

    def evaluate_many(self, sources: Sequence[str], task_name: str, instances: Path | str,
                      limits: ResourceLimits) -> list[ExecutionResult]:
        if self.workers == 1 or len(sources) <= 1:
            return [self.evaluate(s, task_name, instances, limits) for s in sources]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda s: self.evaluate(s, task_name, instances, limits), sources))

    def _run(self, source: str, task_name: str, path: Path, limits: ResourceLimits) -> ExecutionResult:
        message = json.dumps({"source": source, "task_name": task_name, "instance_path": str(path)})
        cmd = [self.python, "-m", "evotune._driver", "--memory-bytes", str(int(limits.memory_bytes))]
        start = time.monotonic()
        proc = subprocess.Popen(
            cmd,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            env=self._env,
            start_new_session=True,
        )
        try:
            out, err = proc.communicate(message.encode(), timeout=limits.wall_clock_seconds)
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            out, err = proc.communicate()
            return ExecutionResult(
                status="timeout",
                stderr_excerpt=_tail(err.decode("utf-8", "replace")),
                duration_seconds=time.monotonic() - start,
                detail=f"exceeded {limits.wall_clock_seconds:g} s",
            )
        finally:
            if proc.poll() is None:
                _kill_group(proc)
        # reap stray grandchildren the candidate may have started
        _kill_group(proc)
        duration = time.monotonic() - start
        stderr = _tail(err.decode("utf-8", "replace"))
        return _interpret(out, stderr, proc.returncode, duration)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def _interpret(out: bytes, stderr: str, returncode: int, duration: float) -> ExecutionResult:
    try:
        msg = json.loads(out.decode("utf-8")) if out.strip() else None
    except ValueError:
        msg = None
    if not isinstance(msg, dict) or msg.get("status") not in STATUSES:
        status = "memory_exceeded" if "MemoryError" in stderr else "runtime_error"
        return ExecutionResult(status, stderr_excerpt=stderr, duration_seconds=duration,
                               detail=f"child exited with code {returncode} without a result")
    status = msg["status"]
    detail = _tail(str(msg.get("detail", "")))
    if status != "ok":
        return ExecutionResult(status, stderr_excerpt=stderr, duration_seconds=duration, detail=detail)
    scores = msg.get("per_instance_scores")
    if (not isinstance(scores, list) or not scores
            or not all(isinstance(s, (int, float)) and math.isfinite(s) for s in scores)):
        return ExecutionResult("invalid_output", stderr_excerpt=stderr, duration_seconds=duration,
                               detail="malformed per-instance scores")
    scores = [float(s) for s in scores]
    reward = -math.fsum(scores) / len(scores)
    return ExecutionResult("ok", per_instance_scores=scores, reward=reward,
                           stderr_excerpt=stderr, duration_seconds=duration)
