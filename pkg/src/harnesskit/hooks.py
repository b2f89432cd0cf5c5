"""Lifecycle hook registry, firing, and output merging.

Command hooks receive one JSON document on stdin and answer with one JSON
document on stdout. Hook failures never abort anything: timeout, nonzero
exit, and malformed output all degrade to a neutral contribution plus a
notification the caller can surface.
"""

from __future__ import annotations

import fnmatch
import json
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Sequence

__all__ = [
    "HookEvent",
    "HookRegistration",
    "HookOutput",
    "MergedHookOutcome",
    "HookRegistry",
    "fire",
    "run_command_hook",
    "NEUTRAL_OUTPUT",
    "TOOL_SCOPED_EVENTS",
]


class HookEvent(str, Enum):
    # Implemented lifecycle points.
    PRE_TOOL_USE = "PreToolUse"
    POST_TOOL_USE = "PostToolUse"
    POST_TOOL_USE_FAILURE = "PostToolUseFailure"
    PERMISSION_REQUEST = "PermissionRequest"
    PERMISSION_DENIED = "PermissionDenied"
    USER_PROMPT_SUBMIT = "UserPromptSubmit"
    SESSION_START = "SessionStart"
    SESSION_END = "SessionEnd"
    STOP = "Stop"
    SUBAGENT_STOP = "SubagentStop"
    PRE_COMPACT = "PreCompact"
    POST_COMPACT = "PostCompact"
    NOTIFICATION = "Notification"
    # Recognized so configs parse, but never fired.
    SETUP = "Setup"
    STOP_FAILURE = "StopFailure"
    ELICITATION = "Elicitation"
    ELICITATION_RESULT = "ElicitationResult"
    SUBAGENT_START = "SubagentStart"
    TEAMMATE_IDLE = "TeammateIdle"
    TASK_CREATED = "TaskCreated"
    TASK_COMPLETED = "TaskCompleted"
    INSTRUCTIONS_LOADED = "InstructionsLoaded"
    CONFIG_CHANGE = "ConfigChange"
    CWD_CHANGED = "CwdChanged"
    FILE_CHANGED = "FileChanged"
    WORKTREE_CREATE = "WorktreeCreate"
    WORKTREE_REMOVE = "WorktreeRemove"


IMPLEMENTED_EVENTS = frozenset(
    {
        HookEvent.PRE_TOOL_USE,
        HookEvent.POST_TOOL_USE,
        HookEvent.POST_TOOL_USE_FAILURE,
        HookEvent.PERMISSION_REQUEST,
        HookEvent.PERMISSION_DENIED,
        HookEvent.USER_PROMPT_SUBMIT,
        HookEvent.SESSION_START,
        HookEvent.SESSION_END,
        HookEvent.STOP,
        HookEvent.SUBAGENT_STOP,
        HookEvent.PRE_COMPACT,
        HookEvent.POST_COMPACT,
        HookEvent.NOTIFICATION,
    }
)

TOOL_SCOPED_EVENTS = frozenset(
    {
        HookEvent.PRE_TOOL_USE,
        HookEvent.POST_TOOL_USE,
        HookEvent.POST_TOOL_USE_FAILURE,
        HookEvent.PERMISSION_REQUEST,
        HookEvent.PERMISSION_DENIED,
    }
)

# Wire field -> (attribute, events where the field is legal).
_FIELD_RULES: dict[str, tuple[str, frozenset[HookEvent]]] = {
    "permissionDecision": (
        "permission_decision",
        frozenset({HookEvent.PRE_TOOL_USE}),
    ),
    "permissionDecisionReason": (
        "permission_decision_reason",
        frozenset({HookEvent.PRE_TOOL_USE}),
    ),
    "updatedInput": ("updated_input", frozenset({HookEvent.PRE_TOOL_USE})),
    "additionalContext": (
        "additional_context",
        frozenset(
            {
                HookEvent.PRE_TOOL_USE,
                HookEvent.POST_TOOL_USE,
                HookEvent.POST_TOOL_USE_FAILURE,
                HookEvent.USER_PROMPT_SUBMIT,
                HookEvent.SESSION_START,
                HookEvent.PRE_COMPACT,
                HookEvent.POST_COMPACT,
            }
        ),
    ),
    "updatedMCPToolOutput": (
        "updated_mcp_tool_output",
        frozenset({HookEvent.POST_TOOL_USE}),
    ),
    "decision": ("decision", frozenset({HookEvent.PERMISSION_REQUEST})),
    "retry": ("retry", frozenset({HookEvent.PERMISSION_DENIED})),
    "continue": ("continue_", frozenset({HookEvent.POST_TOOL_USE})),
}


@dataclass(frozen=True)
class HookRegistration:
    event: HookEvent
    matcher: str | None = None
    command_type: str = "command"  # command | callback
    spec: str | Callable[[dict[str, Any]], dict[str, Any] | None] = ""
    timeout: float = 60.0

    def matches(self, tool_name: str | None) -> bool:
        if self.event not in TOOL_SCOPED_EVENTS or not self.matcher:
            return True
        return fnmatch.fnmatch(tool_name or "", self.matcher)


@dataclass(frozen=True)
class HookOutput:
    permission_decision: str | None = None  # deny | ask
    permission_decision_reason: str | None = None
    updated_input: Any = None
    additional_context: str | None = None
    updated_mcp_tool_output: str | None = None
    decision: str | None = None  # allow | deny
    retry: str | None = None
    continue_: bool = True

    @staticmethod
    def parse(raw: Any, event: HookEvent) -> "HookOutput":
        """Validate decoded hook output against the event's legal fields."""
        if raw is None:
            return NEUTRAL_OUTPUT
        if not isinstance(raw, dict):
            raise ValueError("hook output must be a JSON object")
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            rule = _FIELD_RULES.get(key)
            if rule is None:
                raise ValueError(f"unknown hook output field: {key}")
            attr, legal_events = rule
            if event not in legal_events:
                raise ValueError(f"field {key} not valid for event {event.value}")
            kwargs[attr] = value
        if "permission_decision" in kwargs and kwargs["permission_decision"] not in (
            "deny",
            "ask",
        ):
            raise ValueError("permissionDecision must be deny or ask")
        if "decision" in kwargs and kwargs["decision"] not in ("allow", "deny"):
            raise ValueError("decision must be allow or deny")
        if "continue_" in kwargs and not isinstance(kwargs["continue_"], bool):
            raise ValueError("continue must be a boolean")
        return HookOutput(**kwargs)


NEUTRAL_OUTPUT = HookOutput()


@dataclass
class MergedHookOutcome:
    permission_decision: str | None = None
    permission_decision_reason: str | None = None
    updated_input: Any = None
    additional_context: str = ""
    updated_mcp_tool_output: str | None = None
    decision: str | None = None
    retry: str | None = None
    continue_: bool = True
    notifications: list[str] = field(default_factory=list)

    @property
    def hook_stopped_continuation(self) -> bool:
        return not self.continue_


class HookRegistry:
    """Immutable ordered collection of hook registrations."""

    def __init__(self, registrations: Sequence[HookRegistration] = ()) -> None:
        self._registrations = tuple(registrations)

    @property
    def registrations(self) -> tuple[HookRegistration, ...]:
        return self._registrations

    def matching(self, event: HookEvent, tool_name: str | None) -> list[HookRegistration]:
        return [
            r
            for r in self._registrations
            if r.event is event and r.matches(tool_name)
        ]

    @staticmethod
    def from_config(entries: Sequence[dict[str, Any]]) -> "HookRegistry":
        regs: list[HookRegistration] = []
        for entry in entries:
            event = HookEvent(entry["event"])
            timeout_ms = entry.get("timeout_ms")
            regs.append(
                HookRegistration(
                    event=event,
                    matcher=entry.get("matcher"),
                    command_type=entry.get("type", "command"),
                    spec=entry.get("command", ""),
                    timeout=(timeout_ms / 1000.0) if timeout_ms else 60.0,
                )
            )
        return HookRegistry(regs)

    def extended(self, registrations: Sequence[HookRegistration]) -> "HookRegistry":
        return HookRegistry(self._registrations + tuple(registrations))


def run_command_hook(
    spec: str, payload: dict[str, Any], event: HookEvent, timeout: float = 60.0
) -> tuple[HookOutput, str | None]:
    """Run one shell hook; returns (output, failure-note or None)."""
    try:
        proc = subprocess.run(
            spec,
            shell=True,
            input=json.dumps(payload, ensure_ascii=False),
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired:
        return NEUTRAL_OUTPUT, f"hook timed out after {timeout:g}s: {spec}"
    except OSError as exc:
        return NEUTRAL_OUTPUT, f"hook failed to start: {exc}"
    if proc.returncode != 0:
        return NEUTRAL_OUTPUT, f"hook exited {proc.returncode}: {spec}"
    stdout = proc.stdout.strip()
    if not stdout:
        return NEUTRAL_OUTPUT, None
    try:
        decoded = json.loads(stdout)
        return HookOutput.parse(decoded, event), None
    except ValueError as exc:
        return NEUTRAL_OUTPUT, f"hook output malformed: {exc}"


def _run_one(
    reg: HookRegistration, event: HookEvent, payload: dict[str, Any]
) -> tuple[HookOutput, str | None]:
    if reg.command_type == "callback":
        try:
            raw = reg.spec(payload)  # type: ignore[operator]
            return HookOutput.parse(raw, event), None
        except Exception as exc:  # degrade, never abort
            return NEUTRAL_OUTPUT, f"callback hook failed: {exc}"
    return run_command_hook(str(reg.spec), payload, event, reg.timeout)


def fire(
    event: HookEvent,
    payload: dict[str, Any],
    registry: HookRegistry,
) -> MergedHookOutcome:
    """Run matching hooks and merge their outputs deterministically.

    Hooks may execute concurrently but merging follows registration order:
    any deny wins, then any ask; updated_input is last-writer-wins;
    additional_context concatenates with newlines.
    """
    outcome = MergedHookOutcome()
    if event not in IMPLEMENTED_EVENTS:
        return outcome
    matching = registry.matching(event, payload.get("toolName"))
    if not matching:
        return outcome
    wire_payload = {"hookEventName": event.value, **payload}
    if len(matching) == 1:
        results = [_run_one(matching[0], event, wire_payload)]
    else:
        with ThreadPoolExecutor(max_workers=len(matching)) as pool:
            futures = [
                pool.submit(_run_one, reg, event, wire_payload) for reg in matching
            ]
            results = [f.result() for f in futures]
    contexts: list[str] = []
    for output, failure in results:
        if failure is not None:
            outcome.notifications.append(failure)
            continue
        if output.permission_decision == "deny":
            outcome.permission_decision = "deny"
            outcome.permission_decision_reason = (
                output.permission_decision_reason or "denied by hook"
            )
        elif output.permission_decision == "ask" and outcome.permission_decision != "deny":
            outcome.permission_decision = "ask"
            if output.permission_decision_reason:
                outcome.permission_decision_reason = output.permission_decision_reason
        if output.updated_input is not None:
            outcome.updated_input = output.updated_input
        if output.additional_context:
            contexts.append(output.additional_context)
        if output.updated_mcp_tool_output is not None:
            outcome.updated_mcp_tool_output = output.updated_mcp_tool_output
        if output.decision == "deny":
            outcome.decision = "deny"
        elif output.decision == "allow" and outcome.decision != "deny":
            outcome.decision = "allow"
        if output.retry is not None:
            outcome.retry = output.retry
        if not output.continue_:
            outcome.continue_ = False
    outcome.additional_context = "\n".join(contexts)
    return outcome
