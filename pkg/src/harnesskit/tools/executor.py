"""Batch partitioning and ordered streaming execution.

Consecutive concurrent-safe requests share a batch and run in parallel;
exclusive requests run alone. Outcomes are always emitted in request order
no matter when each tool finishes. A failing Bash command raises the
sibling-abort signal: in-flight subprocesses are killed and Bash requests
that have not started yet are cancelled.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterator, Sequence

from .builtins import invoke_tool
from .spec import Concurrency, ToolContext, ToolOutcome, ToolRequest, ToolSpec

__all__ = ["SiblingAbort", "partition_tool_calls", "execute_streaming"]


class SiblingAbort:
    """Shared cancellation signal plus the registry of killable processes."""

    def __init__(self) -> None:
        self._event = threading.Event()
        self._procs: list = []
        self._lock = threading.Lock()

    def is_set(self) -> bool:
        return self._event.is_set()

    def fire(self) -> None:
        self._event.set()
        with self._lock:
            procs = list(self._procs)
        for proc in procs:
            try:
                proc.kill()
            except OSError:
                pass

    def register(self, proc) -> None:
        with self._lock:
            self._procs.append(proc)
        if self._event.is_set():
            try:
                proc.kill()
            except OSError:
                pass

    def unregister(self, proc) -> None:
        with self._lock:
            if proc in self._procs:
                self._procs.remove(proc)


def partition_tool_calls(
    requests: Sequence[ToolRequest], pool: Sequence[ToolSpec]
) -> list[list[ToolRequest]]:
    """Greedy left-to-right batching; order preserved across batches.

    Unknown tool names travel through as singleton batches so the executor
    can emit their error outcomes in position.
    """
    specs = {t.name: t for t in pool}
    batches: list[list[ToolRequest]] = []
    current: list[ToolRequest] = []
    for req in requests:
        spec = specs.get(req.tool_name)
        safe = spec is not None and spec.concurrency is Concurrency.CONCURRENT_SAFE
        if safe:
            current.append(req)
            continue
        if current:
            batches.append(current)
            current = []
        batches.append([req])
    if current:
        batches.append(current)
    return batches


def execute_streaming(
    requests: Sequence[ToolRequest],
    pool: Sequence[ToolSpec],
    ctx: ToolContext,
    invoke: Callable[[ToolRequest, ToolContext, ToolSpec], ToolOutcome] = invoke_tool,
) -> Iterator[ToolOutcome]:
    """Run batches with intra-batch parallelism, yielding in request order."""
    specs = {t.name: t for t in pool}
    abort = ctx.abort_signal if isinstance(ctx.abort_signal, SiblingAbort) else SiblingAbort()
    ctx.abort_signal = abort

    def run_one(req: ToolRequest) -> ToolOutcome:
        spec = specs.get(req.tool_name)
        if spec is None:
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"unknown tool: {req.tool_name}",
                is_error=True,
            )
        if req.tool_name == "Bash" and abort.is_set():
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content="cancelled: sibling_abort",
                is_error=True,
            )
        outcome = invoke(req, ctx, spec)
        if req.tool_name == "Bash" and outcome.is_error:
            abort.fire()
        return outcome

    for batch in partition_tool_calls(requests, pool):
        if len(batch) == 1:
            yield run_one(batch[0])
            continue
        with ThreadPoolExecutor(max_workers=len(batch)) as executor:
            futures = [executor.submit(run_one, req) for req in batch]
            for future in futures:
                yield future.result()
