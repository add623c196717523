"""Bulk-synchronous parameter-server rounds, simulated in process with float accounting."""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

WorkerTask = Callable[[int, Any], Any]
ServerTask = Callable[[list], tuple]


class WorkerError(RuntimeError):
    def __init__(self, worker: int, cause: BaseException):
        self.worker = worker
        super().__init__(f"worker {worker} failed: {cause!r}")


@dataclass(frozen=True)
class RoundStats:
    t: int
    floats_pushed: int
    floats_pulled: int
    elapsed_s: float


def payload_size(payload) -> int:
    if payload is None:
        return 0
    return int(np.size(payload))


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MDD_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class RoundEngine:
    """``m`` workers exchanging one pull and one push per round with a serial server.

    ``server_task`` receives the pushes in worker order and returns
    ``(next_pulls, stop)``. Pull payloads for a round are counted when they
    are delivered, so a stop issued by the server ends the run without
    charging a further pull.
    """

    m: int
    worker_task: WorkerTask
    server_task: ServerTask
    threads: Optional[int] = None
    floats_pushed: int = 0
    floats_pulled: int = 0
    rounds: int = 0
    trace: list = field(default_factory=list)

    def _worker_phase(self, pulls: Sequence, pool) -> list:
        def call(i):
            try:
                return self.worker_task(i, pulls[i])
            except Exception as exc:
                raise WorkerError(i, exc) from exc

        if pool is None:
            return [call(i) for i in range(self.m)]
        futures = [pool.submit(call, i) for i in range(self.m)]
        # collect in worker order so a failure reports the lowest failing id
        return [f.result() for f in futures]


def run(engine: RoundEngine, initial_pulls: Sequence, max_iters: int) -> tuple[Any, list[RoundStats]]:
    """Alternate worker and server phases until the server stops or ``max_iters`` rounds.

    Returns the last server output (``next_pulls``) and per-round
    cumulative counters.
    """
    if engine.m < 1:
        raise ValueError("engine needs at least one worker")
    if len(initial_pulls) != engine.m:
        raise ValueError(f"{len(initial_pulls)} initial pulls for {engine.m} workers")
    threads = engine.threads if engine.threads is not None else default_threads()
    threads = min(threads, engine.m)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    trace = engine.trace
    pulls = list(initial_pulls)
    start = time.perf_counter()
    try:
        for t in range(1, max_iters + 1):
            engine.floats_pulled += sum(payload_size(p) for p in pulls)
            pushes = engine._worker_phase(pulls, pool)
            engine.floats_pushed += sum(payload_size(p) for p in pushes)
            # barrier: the server sees every push before any worker starts round t+1
            pulls, stop = engine.server_task(pushes)
            engine.rounds = t
            trace.append(
                RoundStats(t, engine.floats_pushed, engine.floats_pulled, time.perf_counter() - start)
            )
            if stop:
                break
            if len(pulls) != engine.m:
                raise ValueError(f"server returned {len(pulls)} pulls for {engine.m} workers")
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return pulls, trace
