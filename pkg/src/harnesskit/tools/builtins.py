"""The eight built-in tools and per-turn pool assembly."""

from __future__ import annotations

import os
import re
import signal
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import jsonschema

from ..permissions import PermissionRule, prefilter_tools
from .spec import Concurrency, ToolContext, ToolOrigin, ToolOutcome, ToolRequest, ToolSpec

__all__ = [
    "BUILTIN_TOOLS",
    "ToolPoolConfig",
    "assemble_tool_pool",
    "invoke_tool",
    "DEFAULT_RESULT_CAP",
    "SIMPLE_MODE_TOOLS",
]

DEFAULT_RESULT_CAP = 40_000
SIMPLE_MODE_TOOLS = ("Bash", "FileRead", "FileEdit")

_SCHEMAS: dict[str, dict[str, Any]] = {
    "Bash": {
        "type": "object",
        "properties": {
            "command": {"type": "string"},
            "timeout_ms": {"type": "number"},
            "opt_out_sandbox": {"type": "boolean"},
        },
        "required": ["command"],
    },
    "FileRead": {
        "type": "object",
        "properties": {
            "file_path": {"type": "string"},
            "offset": {"type": "integer", "minimum": 0},
            "limit": {"type": "integer", "minimum": 1},
        },
        "required": ["file_path"],
    },
    "FileWrite": {
        "type": "object",
        "properties": {
            "file_path": {"type": "string"},
            "content": {"type": "string"},
        },
        "required": ["file_path", "content"],
    },
    "FileEdit": {
        "type": "object",
        "properties": {
            "file_path": {"type": "string"},
            "old_string": {"type": "string"},
            "new_string": {"type": "string"},
            "replace_all": {"type": "boolean"},
        },
        "required": ["file_path", "old_string", "new_string"],
    },
    "Glob": {
        "type": "object",
        "properties": {
            "pattern": {"type": "string"},
            "path": {"type": "string"},
        },
        "required": ["pattern"],
    },
    "Grep": {
        "type": "object",
        "properties": {
            "pattern": {"type": "string"},
            "path": {"type": "string"},
            "glob": {"type": "string"},
        },
        "required": ["pattern"],
    },
    "Skill": {
        "type": "object",
        "properties": {
            "name": {"type": "string"},
            "args": {"type": "string"},
        },
        "required": ["name"],
    },
    "Agent": {
        "type": "object",
        "properties": {
            "agent_type": {"type": "string"},
            "prompt": {"type": "string"},
            "isolation": {"type": "string", "enum": ["in_process", "worktree"]},
            "background": {"type": "boolean"},
        },
        "required": ["agent_type", "prompt"],
    },
}


def _spec(
    name: str,
    description: str,
    concurrency: Concurrency,
    read_only: bool,
) -> ToolSpec:
    return ToolSpec(
        name=name,
        description=description,
        input_schema=_SCHEMAS[name],
        concurrency=concurrency,
        read_only=read_only,
        max_result_size_chars=DEFAULT_RESULT_CAP,
        origin=ToolOrigin.BUILTIN,
    )


BUILTIN_TOOLS: tuple[ToolSpec, ...] = (
    _spec("Bash", "Run a shell command and capture its output", Concurrency.EXCLUSIVE, False),
    _spec("FileRead", "Read a file as numbered lines", Concurrency.CONCURRENT_SAFE, True),
    _spec("FileWrite", "Create or overwrite a file", Concurrency.EXCLUSIVE, False),
    _spec("FileEdit", "Replace an exact string occurrence in a file", Concurrency.EXCLUSIVE, False),
    _spec("Glob", "Find files matching a glob pattern", Concurrency.CONCURRENT_SAFE, True),
    _spec("Grep", "Search file contents with a regular expression", Concurrency.CONCURRENT_SAFE, True),
    _spec("Skill", "Load a named skill's instructions into context", Concurrency.EXCLUSIVE, False),
    _spec("Agent", "Delegate a task to an isolated subagent", Concurrency.EXCLUSIVE, False),
)


@dataclass(frozen=True)
class ToolPoolConfig:
    simple_mode: bool = False
    disabled_tools: tuple[str, ...] = ()


def assemble_tool_pool(
    config: ToolPoolConfig,
    mcp_tools: Sequence[ToolSpec],
    rules: Sequence[PermissionRule],
) -> list[ToolSpec]:
    """Five fixed steps: built-ins, mode filter, deny prefilter, MCP merge
    (also deny-filtered), dedupe with built-in precedence."""
    pool = list(BUILTIN_TOOLS)
    if config.simple_mode:
        pool = [t for t in pool if t.name in SIMPLE_MODE_TOOLS]
    if config.disabled_tools:
        pool = [t for t in pool if t.name not in config.disabled_tools]
    pool = prefilter_tools(pool, rules)
    merged = pool + prefilter_tools(list(mcp_tools), rules)
    seen: dict[str, ToolSpec] = {}
    for spec in merged:
        if spec.name not in seen:
            seen[spec.name] = spec
    return list(seen.values())


# --- implementations -------------------------------------------------------


def _error(req: ToolRequest, text: str) -> ToolOutcome:
    return ToolOutcome(for_tool_use_id=req.tool_use_id, content=text, is_error=True)


def _ok(req: ToolRequest, text: str, attachments: tuple[str, ...] = ()) -> ToolOutcome:
    return ToolOutcome(
        for_tool_use_id=req.tool_use_id, content=text, attachments=attachments
    )


def _resolve(path: str, ctx: ToolContext) -> str:
    if os.path.isabs(path):
        return path
    return os.path.join(ctx.project_dir, path)


class _GroupKill:
    """Kill the command's whole process group.

    The shell's children inherit the output pipes; killing only the shell
    leaves them holding the pipes open and communicate() never returns.
    """

    def __init__(self, proc: subprocess.Popen) -> None:
        self.proc = proc

    def kill(self) -> None:
        try:
            os.killpg(self.proc.pid, signal.SIGKILL)
        except OSError:
            try:
                self.proc.kill()
            except OSError:
                pass


def _run_bash(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    command = req.input["command"]
    timeout = req.input.get("timeout_ms", 120_000) / 1000.0
    abort = ctx.abort_signal
    if abort is not None and abort.is_set():
        return _error(req, "cancelled: sibling_abort")
    notes: list[str] = []
    to_run = command
    opted_out = bool(req.input.get("opt_out_sandbox", False))
    if not opted_out and ctx.should_sandbox is not None and ctx.should_sandbox(command):
        if ctx.sandbox_wrap is not None:
            to_run = ctx.sandbox_wrap(command)
        if to_run == command:
            notes.append("[sandbox: noop runner]")
    try:
        proc = subprocess.Popen(
            to_run,
            shell=True,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            cwd=ctx.project_dir or None,
            start_new_session=True,
        )
    except OSError as exc:
        return _error(req, f"failed to start command: {exc}")
    killer = _GroupKill(proc)
    if abort is not None:
        abort.register(killer)
    try:
        stdout, stderr = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        killer.kill()
        stdout, stderr = proc.communicate()
        return _error(req, f"command timed out after {timeout:g}s")
    finally:
        if abort is not None:
            abort.unregister(killer)
    if abort is not None and abort.is_set() and proc.returncode and proc.returncode < 0:
        return _error(req, "cancelled: sibling_abort")
    parts = [*notes]
    if stdout:
        parts.append(stdout.rstrip("\n"))
    if stderr:
        parts.append(f"stderr: {stderr.rstrip(chr(10))}")
    parts.append(f"exit code: {proc.returncode}")
    content = "\n".join(parts)
    return ToolOutcome(
        for_tool_use_id=req.tool_use_id,
        content=content,
        is_error=proc.returncode != 0,
    )


def _read_file(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    path = _resolve(req.input["file_path"], ctx)
    offset = req.input.get("offset", 0)
    limit = req.input.get("limit", 2000)
    try:
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        return _error(req, f"file not found: {path}")
    except IsADirectoryError:
        return _error(req, f"is a directory: {path}")
    window = lines[offset : offset + limit]
    numbered = "\n".join(f"{offset + i + 1:6d}\t{line}" for i, line in enumerate(window))
    return _ok(req, numbered)


def _checkpoint(ctx: ToolContext, path: str) -> None:
    if ctx.file_checkpoint is not None:
        ctx.file_checkpoint(path)


def _write_file(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    path = _resolve(req.input["file_path"], ctx)
    _checkpoint(ctx, path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(req.input["content"])
    return _ok(req, f"wrote {len(req.input['content'])} chars to {path}")


def _edit_file(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    path = _resolve(req.input["file_path"], ctx)
    old = req.input["old_string"]
    new = req.input["new_string"]
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        return _error(req, f"file not found: {path}")
    count = text.count(old)
    if count == 0:
        return _error(req, "old_string not found in file")
    if count > 1 and not req.input.get("replace_all", False):
        return _error(req, f"ambiguous match: old_string occurs {count} times")
    _checkpoint(ctx, path)
    if req.input.get("replace_all", False):
        text = text.replace(old, new)
    else:
        text = text.replace(old, new, 1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return _ok(req, f"edited {path}")


def _glob(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    root = Path(_resolve(req.input.get("path", "") or ".", ctx))
    try:
        matches = sorted(str(p) for p in root.glob(req.input["pattern"]))
    except (ValueError, OSError) as exc:
        return _error(req, f"glob failed: {exc}")
    return _ok(req, "\n".join(matches))


def _grep(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    try:
        pattern = re.compile(req.input["pattern"])
    except re.error as exc:
        return _error(req, f"bad pattern: {exc}")
    root = Path(_resolve(req.input.get("path", "") or ".", ctx))
    file_glob = req.input.get("glob")
    hits: list[str] = []
    candidates = (
        [root]
        if root.is_file()
        else sorted(p for p in root.rglob(file_glob or "*") if p.is_file())
    )
    for path in candidates:
        if ".git" in path.parts:
            continue
        try:
            text = path.read_text(encoding="utf-8")
        except (UnicodeDecodeError, OSError):
            continue
        for lineno, line in enumerate(text.splitlines(), 1):
            if pattern.search(line):
                hits.append(f"{path}:{lineno}:{line}")
                if len(hits) >= 1000:
                    return _ok(req, "\n".join(hits))
    return _ok(req, "\n".join(hits))


def _skill(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    registry = ctx.services.get("skill_registry")
    if registry is None:
        return _error(req, "no skills available")
    invocation = registry.invoke(req.input["name"], req.input.get("args", ""))
    if invocation is None:
        return _error(req, f"unknown skill: {req.input['name']}")
    return _ok(
        req,
        f"skill {req.input['name']} loaded",
        attachments=(invocation.attachment_text,),
    )


def _agent(req: ToolRequest, ctx: ToolContext) -> ToolOutcome:
    runner = ctx.services.get("agent_runner")
    if runner is None:
        return _error(req, "subagent delegation unavailable")
    return runner(req)


_IMPLEMENTATIONS: dict[str, Callable[[ToolRequest, ToolContext], ToolOutcome]] = {
    "Bash": _run_bash,
    "FileRead": _read_file,
    "FileWrite": _write_file,
    "FileEdit": _edit_file,
    "Glob": _glob,
    "Grep": _grep,
    "Skill": _skill,
    "Agent": _agent,
}


def invoke_tool(req: ToolRequest, ctx: ToolContext, spec: ToolSpec) -> ToolOutcome:
    """Validate input against the tool's schema and run it.

    Tool failures are reported as error outcomes, never raised.
    """
    try:
        jsonschema.validate(req.input, spec.input_schema)
    except jsonschema.ValidationError as exc:
        return _error(req, f"input validation failed: {exc.message}")
    if spec.origin is ToolOrigin.MCP:
        router = ctx.services.get("mcp_router")
        if router is None:
            return _error(req, "mcp routing unavailable")
        return router(req)
    impl = _IMPLEMENTATIONS.get(spec.name)
    if impl is None:
        return _error(req, f"tool not implemented: {spec.name}")
    try:
        return impl(req, ctx)
    except Exception as exc:  # reported, not thrown
        return _error(req, f"tool failed: {exc}")
