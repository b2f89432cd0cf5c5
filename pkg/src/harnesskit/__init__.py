"""harnesskit: a model-agnostic agentic coding harness.

The package wires a reactive turn loop around a pluggable model backend:
deny-first permission evaluation, lifecycle hooks, an ordered streaming
tool executor, a graduated context-compaction pipeline, hierarchical
instruction memory, subagent delegation with sidechain transcripts, and
append-only JSONL session persistence. A deterministic scripted backend
makes every behavior reproducible offline.
"""

__version__ = "0.1.0"

from .backend import Backend, ScriptedBackend  # noqa: E402
from .loop import LoopEvent, LoopEventKind, StopReason, TurnDeps, run_turn  # noqa: E402
from .permissions import PermissionMode  # noqa: E402
from .session import SessionRuntime, fork_from, open_session, resume_session  # noqa: E402

__all__ = [
    "__version__",
    "Backend",
    "ScriptedBackend",
    "LoopEvent",
    "LoopEventKind",
    "StopReason",
    "TurnDeps",
    "run_turn",
    "PermissionMode",
    "SessionRuntime",
    "open_session",
    "resume_session",
    "fork_from",
]
