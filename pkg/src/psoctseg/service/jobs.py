"""In-process background job registry for long-running operations."""

from __future__ import annotations

import threading
import time
import traceback
import uuid
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from .schemas import JobInfo


class JobManager:
    """Single-worker job queue; training jobs must not run concurrently."""

    def __init__(self, max_workers: int = 1):
        self._executor = ThreadPoolExecutor(max_workers=max_workers)
        self._jobs: dict[str, JobInfo] = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn: Callable[[], dict]) -> JobInfo:
        job_id = uuid.uuid4().hex[:12]
        info = JobInfo(job_id=job_id, kind=kind, status="pending", created=time.time())
        with self._lock:
            self._jobs[job_id] = info

        def run():
            with self._lock:
                info.status = "running"
                info.started = time.time()
            try:
                result = fn()
                with self._lock:
                    info.result = result
                    info.status = "succeeded"
            except Exception as exc:  # surfaced through the job record
                with self._lock:
                    info.error = f"{type(exc).__name__}: {exc}"
                    info.status = "failed"
                traceback.print_exc()
            finally:
                with self._lock:
                    info.finished = time.time()

        self._executor.submit(run)
        return info.model_copy()

    def get(self, job_id: str) -> JobInfo | None:
        with self._lock:
            info = self._jobs.get(job_id)
            return info.model_copy() if info else None

    def list(self) -> list[JobInfo]:
        with self._lock:
            return [info.model_copy() for info in self._jobs.values()]

    def wait(self, job_id: str, timeout: float = 3600.0, poll: float = 0.1) -> JobInfo:
        deadline = time.time() + timeout
        while time.time() < deadline:
            info = self.get(job_id)
            if info and info.status in ("succeeded", "failed"):
                return info
            time.sleep(poll)
        raise TimeoutError(f"job {job_id} did not finish within {timeout}s")
