"""Tool capability vocabulary shared by the pool, the executor, and the gate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

__all__ = [
    "Concurrency",
    "ToolOrigin",
    "ToolSpec",
    "ToolRequest",
    "ToolOutcome",
    "ToolContext",
    "INFINITE",
]

INFINITE = math.inf


class Concurrency(str, Enum):
    CONCURRENT_SAFE = "concurrent_safe"
    EXCLUSIVE = "exclusive"


class ToolOrigin(str, Enum):
    BUILTIN = "builtin"
    MCP = "mcp"
    SKILL = "skill"


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    input_schema: dict[str, Any]
    concurrency: Concurrency
    read_only: bool
    max_result_size_chars: float = INFINITE
    origin: ToolOrigin = ToolOrigin.BUILTIN

    def __post_init__(self) -> None:
        if self.read_only and self.concurrency is not Concurrency.CONCURRENT_SAFE:
            raise ValueError("read-only tools must be concurrent_safe")
        if self.origin is ToolOrigin.MCP and not self.name.startswith("mcp__"):
            raise ValueError("mcp tool names must start with mcp__")


@dataclass(frozen=True)
class ToolRequest:
    tool_use_id: str
    tool_name: str
    input: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ToolOutcome:
    for_tool_use_id: str
    content: str
    is_error: bool = False
    attachments: tuple[str, ...] = ()


@dataclass
class ToolContext:
    """Ambient services a tool implementation may touch during invocation.

    ``file_checkpoint`` is called with the absolute target path before any
    mutation. ``sandbox_wrap`` receives a shell command and returns the
    command actually executed. ``services`` carries module-specific hooks
    (skill registry, agent runner, mcp router) without import cycles.
    """

    project_dir: str
    session_id: str = ""
    file_checkpoint: Callable[[str], None] | None = None
    sandbox_wrap: Callable[[str], str] | None = None
    should_sandbox: Callable[[str], bool] | None = None
    abort_signal: Any = None
    services: dict[str, Any] = field(default_factory=dict)
