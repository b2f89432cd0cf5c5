"""Subagent delegation: definitions, permission scoping, sidechain runs.

A subagent is a fresh runtime with its own transcript sitting next to the
parent's (``<parent>-agent-<n>.jsonl``). Only a text summary of the child
conversation returns to the parent, so parent context cost is independent
of how much the child did.
"""
from __future__ import annotations

import json
import subprocess
import tempfile
import threading
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from .context import ContextAssembler
from .hooks import HookEvent, fire
from .loop import PermissionAsk, TurnDeps, run_turn
from .model import (
    Message,
    Role,
    SessionHandle,
    TurnState,
    now_rfc3339,
    text_block,
)
from .permissions import (
    PermissionMode,
    PermissionRule,
    RuleEffect,
    RuleParseError,
    RuleSource,
    parse_rule,
)
from .persistence import SessionStore
from .session import SessionRuntime
from .tools.builtins import BUILTIN_TOOLS, ToolPoolConfig
from .tools.spec import ToolOutcome, ToolRequest

MAX_AGENT_DEPTH = 2


@dataclass(frozen=True)
class AgentDefinition:
    name: str
    description: str
    system_prompt: str
    tools: tuple[str, ...] | None = None
    disallowed_tools: tuple[str, ...] = ()
    permission_mode: Optional[PermissionMode] = None
    model: Optional[str] = None


BUILTIN_AGENTS: tuple[AgentDefinition, ...] = (
    AgentDefinition(
        name="Explore",
        description="Read-only codebase exploration and question answering",
        system_prompt=(
            "You explore the workspace to answer a question. You must not "
            "modify any file; report findings as text."
        ),
        disallowed_tools=("FileWrite", "FileEdit"),
    ),
    AgentDefinition(
        name="Plan",
        description="Produce an implementation plan without changing code",
        system_prompt=(
            "You research the workspace and produce a step-by-step plan. "
            "Write the plan to a *.plan.md file; change nothing else."
        ),
        tools=("FileRead", "Glob", "Grep", "FileWrite(*.plan.md)"),
        permission_mode=PermissionMode.PLAN,
    ),
    AgentDefinition(
        name="general-purpose",
        description="Autonomous multi-step task execution with all tools",
        system_prompt=(
            "You complete the delegated task end to end and report a "
            "concise summary of what changed."
        ),
    ),
)


def _listify(value: Any) -> tuple[str, ...] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return tuple(str(v).strip() for v in value)


def load_agent_definitions(
    dirs: Sequence[str | Path],
) -> tuple[list[AgentDefinition], list[str]]:
    """Parse ``*.md`` agent files; files without a description are skipped."""
    defs: list[AgentDefinition] = []
    notes: list[str] = []
    for d in dirs:
        directory = Path(d)
        if not directory.is_dir():
            continue
        for path in sorted(directory.glob("*.md")):
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                notes.append(f"unreadable agent file {path}: {exc}")
                continue
            meta: dict[str, Any] = {}
            body = text
            if text.startswith("---"):
                parts = text.split("---", 2)
                if len(parts) == 3:
                    try:
                        meta = yaml.safe_load(parts[1]) or {}
                    except yaml.YAMLError as exc:
                        notes.append(f"bad agent frontmatter {path}: {exc}")
                        continue
                    body = parts[2]
            description = str(meta.get("description", "")).strip()
            if not description:
                notes.append(f"agent file {path} skipped: missing description")
                continue
            mode = None
            if meta.get("permissionMode"):
                try:
                    mode = PermissionMode(meta["permissionMode"])
                except ValueError:
                    notes.append(
                        f"agent file {path}: unknown permissionMode "
                        f"{meta['permissionMode']!r}"
                    )
                    continue
            defs.append(
                AgentDefinition(
                    name=str(meta.get("name", path.stem)),
                    description=description,
                    system_prompt=body.strip(),
                    tools=_listify(meta.get("tools")),
                    disallowed_tools=_listify(meta.get("disallowedTools")) or (),
                    permission_mode=mode,
                    model=meta.get("model"),
                )
            )
    return defs, notes


def agent_registry(
    extra_dirs: Sequence[str | Path] = (),
) -> tuple[dict[str, AgentDefinition], list[str]]:
    """Built-ins plus user definitions; user files override by name."""
    registry = {d.name: d for d in BUILTIN_AGENTS}
    loaded, notes = load_agent_definitions(extra_dirs)
    for d in loaded:
        registry[d.name] = d
    return registry, notes


_PARENT_MODE_WINS = (
    PermissionMode.BYPASS_PERMISSIONS,
    PermissionMode.ACCEPT_EDITS,
    PermissionMode.AUTO,
)


def resolve_permission_override(
    parent_mode: PermissionMode, agent_mode: Optional[PermissionMode]
) -> PermissionMode:
    """Broad parent modes win; otherwise the definition's override applies."""
    if parent_mode in _PARENT_MODE_WINS:
        return parent_mode
    if agent_mode is not None:
        return agent_mode
    return parent_mode


def scope_tools(
    defn: AgentDefinition, parent_rules: Sequence[PermissionRule]
) -> tuple[list[PermissionRule], tuple[str, ...]]:
    """Child rule list and pool-disable list for a definition.

    Parent session-scoped grants never reach the child; the parent's
    configured rules (managed, settings, cli) carry over unchanged.
    """
    rules = [r for r in parent_rules if r.source is not RuleSource.SESSION]
    disabled: tuple[str, ...] = ()
    if defn.tools is not None:
        allowed_names = {entry.split("(", 1)[0].strip() for entry in defn.tools}
        disabled = tuple(
            spec.name for spec in BUILTIN_TOOLS if spec.name not in allowed_names
        )
        for entry in defn.tools:
            try:
                rules.append(parse_rule(entry, RuleEffect.ALLOW, RuleSource.AGENT))
            except RuleParseError:
                continue
    for entry in defn.disallowed_tools:
        try:
            rules.append(parse_rule(entry, RuleEffect.DENY, RuleSource.AGENT))
        except RuleParseError:
            continue
    return rules, disabled


def _add_worktree(project_dir: str) -> tuple[str | None, str | None]:
    target = tempfile.mkdtemp(prefix="agent-worktree-")
    proc = subprocess.run(
        ["git", "worktree", "add", "--detach", target, "HEAD"],
        cwd=project_dir,
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        return None, proc.stderr.strip() or "git worktree add failed"
    return target, None


def _remove_worktree(project_dir: str, target: str) -> None:
    subprocess.run(
        ["git", "worktree", "remove", "--force", target],
        cwd=project_dir,
        capture_output=True,
        text=True,
    )


def _child_runtime(
    parent: SessionRuntime,
    defn: AgentDefinition,
    child_id: str,
    cwd: str,
) -> SessionRuntime:
    rules, disabled = scope_tools(defn, parent.base_rules)
    store = None
    if parent.store is not None:
        store = SessionStore(parent.store.path.parent / f"{child_id}.jsonl", child_id)
    child = SessionRuntime(
        handle=SessionHandle(
            session_id=child_id,
            project_dir=cwd,
            mode=resolve_permission_override(parent.handle.mode, defn.permission_mode),
            state=TurnState(),
        ),
        assembler=ContextAssembler(
            cwd, home=parent.home, managed_root=parent.assembler.managed_root
        ),
        hooks=parent.hooks,
        home=parent.home,
        store=store,
        skills=parent.skills,
        sandbox=parent.sandbox,
        compaction_cfg=parent.compaction_cfg,
        pool_config=ToolPoolConfig(disabled_tools=disabled),
        base_rules=rules,
        mcp_tools=list(parent.mcp_tools),
        mcp_clients=dict(parent.mcp_clients),
        agent_defs=dict(parent.agent_defs),
        backend=parent.backend,
        classifier=parent.classifier,
        is_sidechain=True,
        depth=parent.depth + 1,
    )
    child.set_summarizer(parent._summarizer)
    return child


def _write_meta(
    parent: SessionRuntime,
    child_id: str,
    defn: AgentDefinition,
    prompt: str,
    isolation: str,
    background: bool,
) -> None:
    if parent.store is None:
        return
    meta_path = parent.store.path.parent / f"{child_id}.meta.json"
    meta_path.write_text(
        json.dumps(
            {
                "agentType": defn.name,
                "parentSessionId": parent.handle.session_id,
                "isolation": isolation,
                "background": background,
                "prompt": prompt,
                "startedAt": now_rfc3339(),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def _consume_child_turn(
    child: SessionRuntime, prompt: str, deps: TurnDeps
) -> tuple[str, str]:
    """Run the child loop to completion; returns (summary, stop reason)."""
    stop_reason = "aborted"
    for event in run_turn(child, prompt, deps):
        if event.kind.value == "done":
            stop_reason = event.payload.get("reason", "aborted")
    summary = ""
    for msg in reversed(child.handle.state.messages):
        if msg.role is Role.ASSISTANT:
            summary = msg.text()
            if summary:
                break
    if not summary:
        summary = "(subagent produced no text output)"
    return summary, stop_reason


def agent_runner_factory(parent: SessionRuntime, parent_deps: TurnDeps):
    """Build the Agent tool implementation bound to this parent runtime."""

    def forwarding_resolver(ask: PermissionAsk) -> str:
        if parent_deps.ask_resolver is None:
            return "deny"
        return parent_deps.ask_resolver(dc_replace(ask, from_subagent=True))

    def run(req: ToolRequest) -> ToolOutcome:
        agent_type = str(req.input.get("agent_type", ""))
        prompt = str(req.input.get("prompt", ""))
        isolation = str(req.input.get("isolation", "in_process"))
        background = bool(req.input.get("background", False))

        if parent.depth + 1 >= MAX_AGENT_DEPTH:
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"subagent depth limit reached ({MAX_AGENT_DEPTH})",
                is_error=True,
            )
        defn = parent.agent_defs.get(agent_type)
        if defn is None:
            known = ", ".join(sorted(parent.agent_defs)) or "none"
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"unknown agent type: {agent_type} (available: {known})",
                is_error=True,
            )

        cwd = parent.handle.project_dir
        worktree: str | None = None
        if isolation == "worktree":
            worktree, err = _add_worktree(cwd)
            if worktree is None:
                return ToolOutcome(
                    for_tool_use_id=req.tool_use_id,
                    content=f"worktree isolation failed: {err}",
                    is_error=True,
                )
            cwd = worktree

        child_id = f"{parent.handle.session_id}-agent-{parent.next_agent_index()}"
        child = _child_runtime(parent, defn, child_id, cwd)
        _write_meta(parent, child_id, defn, prompt, isolation, background)
        child_deps = TurnDeps(
            backend=parent_deps.backend,
            model_id=defn.model or parent_deps.model_id,
            fallback_model=parent_deps.fallback_model,
            max_turns=parent_deps.max_turns,
            base_system_prompt=defn.system_prompt,
            max_output_tokens=parent_deps.max_output_tokens,
            ask_resolver=forwarding_resolver,
            abort=parent_deps.abort,
            agent_runner_factory=agent_runner_factory,
        )
        parent.notify_subagent(
            {"agentId": child_id, "agentType": defn.name, "status": "started"}
        )

        def finish() -> tuple[str, str]:
            try:
                summary, reason = _consume_child_turn(child, prompt, child_deps)
                fire(
                    HookEvent.SUBAGENT_STOP,
                    {
                        "agentId": child_id,
                        "agentType": defn.name,
                        "stopReason": reason,
                    },
                    parent.hooks,
                )
                return summary, reason
            finally:
                child_store = child.store
                if child_store is not None:
                    child_store.close()
                if worktree is not None:
                    _remove_worktree(parent.handle.project_dir, worktree)

        if background:
            def task() -> None:
                try:
                    summary, reason = finish()
                except Exception as exc:
                    summary, reason = f"subagent crashed: {exc}", "aborted"
                parent.notify_subagent(
                    {
                        "agentId": child_id,
                        "agentType": defn.name,
                        "status": "finished",
                        "stopReason": reason,
                    }
                )
                parent.queue_pending_attachment(
                    Message.create(
                        role=Role.ATTACHMENT,
                        blocks=[
                            text_block(
                                f"Background subagent {child_id} ({defn.name}) "
                                f"finished ({reason}):\n{summary}"
                            )
                        ],
                        parent_uuid=None,
                        is_sidechain=parent.is_sidechain,
                    )
                )

            threading.Thread(target=task, daemon=True).start()
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"subagent {child_id} started in background",
            )

        try:
            summary, reason = finish()
        except Exception as exc:
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"subagent failed: {exc}",
                is_error=True,
            )
        parent.notify_subagent(
            {
                "agentId": child_id,
                "agentType": defn.name,
                "status": "finished",
                "stopReason": reason,
            }
        )
        return ToolOutcome(
            for_tool_use_id=req.tool_use_id,
            content=summary,
            is_error=reason in ("prompt_too_long", "aborted"),
        )

    return run
