"""Deny-first permission evaluation.

Rules parse from a small grammar (`Tool` or `Tool(spec)`), merge across
sources, and evaluate strictly deny > ask > allow before the mode default
gets a say. Evaluation is pure; rule sets are immutable snapshots.
"""

from __future__ import annotations

import fnmatch
import os.path
import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

from .tools.spec import ToolRequest, ToolSpec

__all__ = [
    "RuleEffect",
    "RuleSource",
    "SpecifierKind",
    "Specifier",
    "PermissionRule",
    "PermissionMode",
    "Verdict",
    "DecisionLayer",
    "Decision",
    "SandboxConfig",
    "RuleParseError",
    "BubbleEscalation",
    "parse_rule",
    "matches_rule",
    "evaluate",
    "mode_default",
    "classify",
    "should_use_sandbox",
    "prefilter_tools",
    "split_command_segments",
    "READ_ONLY_TOOLS",
    "ACCEPT_EDITS_SHELL_COMMANDS",
    "DANGEROUS_COMMAND_PATTERNS",
]


class RuleEffect(str, Enum):
    ALLOW = "allow"
    DENY = "deny"
    ASK = "ask"


class RuleSource(str, Enum):
    MANAGED = "managed"
    SETTINGS = "settings"
    SESSION = "session"
    CLI = "cli"
    AGENT = "agent"


class SpecifierKind(str, Enum):
    PREFIX = "prefix"
    EXACT = "exact"
    GLOB = "glob"
    MCP_SERVER = "mcp_server"


@dataclass(frozen=True)
class Specifier:
    kind: SpecifierKind
    value: str

    def __post_init__(self) -> None:
        if not self.value:
            raise ValueError("specifier value must be non-empty")


@dataclass(frozen=True)
class PermissionRule:
    effect: RuleEffect
    tool: str
    specifier: Specifier | None
    source: RuleSource
    bypass_immune: bool

    def __post_init__(self) -> None:
        if (
            self.specifier is not None
            and self.specifier.kind is SpecifierKind.MCP_SERVER
            and not self.tool.startswith("mcp__")
        ):
            raise ValueError("mcp_server specifier requires an mcp__ tool name")

    def display(self) -> str:
        if self.specifier is None or self.specifier.kind is SpecifierKind.MCP_SERVER:
            return self.tool
        if self.specifier.kind is SpecifierKind.PREFIX:
            return f"{self.tool}(prefix:{self.specifier.value})"
        return f"{self.tool}({self.specifier.value})"


class PermissionMode(str, Enum):
    PLAN = "plan"
    DEFAULT = "default"
    ACCEPT_EDITS = "acceptEdits"
    AUTO = "auto"
    DONT_ASK = "dontAsk"
    BYPASS_PERMISSIONS = "bypassPermissions"
    BUBBLE = "bubble"


class Verdict(str, Enum):
    ALLOW = "allow"
    DENY = "deny"
    ASK = "ask"


class DecisionLayer(str, Enum):
    RULE = "rule"
    MODE = "mode"
    CLASSIFIER = "classifier"
    HOOK = "hook"
    PREFILTER = "prefilter"


@dataclass(frozen=True)
class Decision:
    verdict: Verdict
    reason: str
    layer: DecisionLayer

    def __post_init__(self) -> None:
        if self.verdict is Verdict.DENY and not self.reason:
            raise ValueError("deny decisions must carry a reason")


@dataclass(frozen=True)
class SandboxConfig:
    globally_enabled: bool = False
    exclusion_patterns: tuple[str, ...] = ()
    per_invocation_opt_out: bool = False


class RuleParseError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        super().__init__(f"{message} (at position {position})")
        self.position = position


class BubbleEscalation(Exception):
    """Raised instead of a verdict when the mode defers to a parent session."""

    def __init__(self, request: ToolRequest) -> None:
        super().__init__(f"escalation required for {request.tool_name}")
        self.request = request


PATH_TOOLS = frozenset({"FileRead", "FileEdit", "FileWrite", "Glob", "Grep"})
READ_ONLY_TOOLS = frozenset({"FileRead", "Glob", "Grep"})
ACCEPT_EDITS_SHELL_COMMANDS = frozenset(
    {"mkdir", "rmdir", "touch", "rm", "mv", "cp", "sed"}
)

# Stage-2 classifier table: label, compiled pattern. Order is significant
# only for the reason string; any match denies.
DANGEROUS_COMMAND_PATTERNS: tuple[tuple[str, re.Pattern[str]], ...] = (
    ("recursive-delete-root", re.compile(r"\brm\s+(-\w*[rR]\w*\s+)+(/|~|\$HOME)(\s|$|/\*)")),
    ("sudo", re.compile(r"(^|\s)sudo\s")),
    ("make-filesystem", re.compile(r"\bmkfs(\.\w+)?\b")),
    ("raw-disk-write", re.compile(r"\bdd\s+[^|;]*\bof=/dev/")),
    ("world-writable-root", re.compile(r"\bchmod\s+(-\w+\s+)*777\s+/(\s|$)")),
    ("fork-bomb", re.compile(r":\(\)\s*\{.*\};\s*:")),
    ("pipe-to-shell", re.compile(r"\b(curl|wget)\b[^|;]*\|\s*(ba|z|da)?sh\b")),
    ("force-push", re.compile(r"\bgit\s+push\b[^|;]*(--force\b|-f\b)")),
    ("power-control", re.compile(r"\b(shutdown|reboot|halt|poweroff)\b")),
    ("kill-init", re.compile(r"\bkill\s+(-9\s+)?1(\s|$)")),
    ("history-wipe", re.compile(r"\bhistory\s+-c\b")),
    ("device-overwrite", re.compile(r">\s*/dev/sd[a-z]\b")),
)

_SEGMENT_SPLIT_OPERATORS = ("&&", "||", ";", "|")


def parse_rule(
    text: str,
    effect: RuleEffect,
    source: RuleSource,
    bypass_immune: bool | None = None,
) -> PermissionRule:
    text = text.strip()
    if not text:
        raise RuleParseError("empty rule", 0)
    immune = bypass_immune if bypass_immune is not None else source is RuleSource.MANAGED
    open_idx = text.find("(")
    if open_idx == -1:
        if ")" in text:
            raise RuleParseError("unbalanced parenthesis", text.find(")"))
        return PermissionRule(
            effect=effect,
            tool=text,
            specifier=_server_wildcard(text),
            source=source,
            bypass_immune=immune,
        )
    if open_idx == 0:
        raise RuleParseError("missing tool name", 0)
    if not text.endswith(")"):
        raise RuleParseError("unbalanced parenthesis", len(text) - 1)
    name = text[:open_idx]
    spec_text = text[open_idx + 1 : -1]
    if not spec_text:
        raise RuleParseError("empty specifier", open_idx + 1)
    if spec_text.startswith("prefix:"):
        value = spec_text[len("prefix:") :]
        if not value:
            raise RuleParseError("empty prefix", open_idx + 1 + len("prefix:"))
        spec = Specifier(SpecifierKind.PREFIX, value)
    elif name in PATH_TOOLS:
        spec = Specifier(SpecifierKind.GLOB, spec_text)
    else:
        spec = Specifier(SpecifierKind.EXACT, spec_text)
    return PermissionRule(
        effect=effect, tool=name, specifier=spec, source=source, bypass_immune=immune
    )


def _server_wildcard(name: str) -> Specifier | None:
    """Bare `mcp__<server>` (no tool segment) matches the whole server."""
    if not name.startswith("mcp__"):
        return None
    remainder = name[len("mcp__") :]
    if not remainder or "__" in remainder:
        return None
    return Specifier(SpecifierKind.MCP_SERVER, remainder)


def _target_string(req: ToolRequest) -> str:
    """The input field a content-level specifier is matched against."""
    value = req.input.get("command")
    if isinstance(value, str):
        return value
    for key in ("file_path", "path", "pattern", "name"):
        value = req.input.get(key)
        if isinstance(value, str):
            return value
    return ""


def _target_path(req: ToolRequest) -> str:
    for key in ("file_path", "path"):
        value = req.input.get(key)
        if isinstance(value, str):
            return value
    return ""


def matches_rule(rule: PermissionRule, req: ToolRequest) -> bool:
    spec = rule.specifier
    if spec is not None and spec.kind is SpecifierKind.MCP_SERVER:
        return req.tool_name.startswith(f"mcp__{spec.value}__")
    if rule.tool != req.tool_name:
        return False
    if spec is None:
        return True
    if spec.kind is SpecifierKind.PREFIX:
        tokens = _target_string(req).split()
        prefix_tokens = spec.value.split()
        return tokens[: len(prefix_tokens)] == prefix_tokens
    if spec.kind is SpecifierKind.GLOB:
        path = _target_path(req)
        return bool(path) and fnmatch.fnmatch(path, spec.value)
    return _target_string(req) == spec.value


def split_command_segments(command: str) -> list[str]:
    """Split a shell line on top-level `&&`, `||`, `;`, `|` outside quotes."""
    segments: list[str] = []
    current: list[str] = []
    i = 0
    quote: str | None = None
    n = len(command)
    while i < n:
        ch = command[i]
        if quote is not None:
            current.append(ch)
            if ch == quote and command[i - 1] != "\\":
                quote = None
            i += 1
            continue
        if ch in ("'", '"'):
            quote = ch
            current.append(ch)
            i += 1
            continue
        matched = None
        for op in _SEGMENT_SPLIT_OPERATORS:
            if command.startswith(op, i):
                matched = op
                break
        if matched is not None:
            segments.append("".join(current))
            current = []
            i += len(matched)
            continue
        current.append(ch)
        i += 1
    segments.append("".join(current))
    return [s.strip() for s in segments if s.strip()]


_VERDICT_STRICTNESS = {Verdict.DENY: 2, Verdict.ASK: 1, Verdict.ALLOW: 0}


def evaluate(
    rules: Sequence[PermissionRule],
    mode: PermissionMode,
    req: ToolRequest,
    project_dir: str = "",
    classifier: Callable[[ToolRequest], Decision] | None = None,
) -> Decision:
    """Deny-first verdict for one request under the active mode.

    Multi-command shell lines are judged per segment and the strictest
    segment verdict wins.
    """
    if req.tool_name == "Bash":
        command = req.input.get("command", "")
        segments = split_command_segments(command) if isinstance(command, str) else []
        if len(segments) > 1:
            strictest: Decision | None = None
            for segment in segments:
                seg_req = ToolRequest(
                    tool_use_id=req.tool_use_id,
                    tool_name="Bash",
                    input={**req.input, "command": segment},
                )
                decision = _evaluate_single(rules, mode, seg_req, project_dir, classifier)
                if (
                    strictest is None
                    or _VERDICT_STRICTNESS[decision.verdict]
                    > _VERDICT_STRICTNESS[strictest.verdict]
                ):
                    strictest = decision
                if strictest.verdict is Verdict.DENY:
                    break
            assert strictest is not None
            return strictest
    return _evaluate_single(rules, mode, req, project_dir, classifier)


def _evaluate_single(
    rules: Sequence[PermissionRule],
    mode: PermissionMode,
    req: ToolRequest,
    project_dir: str,
    classifier: Callable[[ToolRequest], Decision] | None,
) -> Decision:
    for rule in rules:
        if rule.effect is not RuleEffect.DENY or not matches_rule(rule, req):
            continue
        if mode is PermissionMode.BYPASS_PERMISSIONS and not rule.bypass_immune:
            continue
        return Decision(
            verdict=Verdict.DENY,
            reason=f"denied by rule {rule.display()}",
            layer=DecisionLayer.RULE,
        )
    for rule in rules:
        if rule.effect is not RuleEffect.ASK or not matches_rule(rule, req):
            continue
        if mode in (PermissionMode.DONT_ASK, PermissionMode.BYPASS_PERMISSIONS):
            # These modes never prompt; a matching ask rule degrades to the
            # mode's allow rather than blocking on an impossible question.
            return Decision(
                verdict=Verdict.ALLOW,
                reason=f"ask rule {rule.display()} suppressed by mode {mode.value}",
                layer=DecisionLayer.MODE,
            )
        return Decision(
            verdict=Verdict.ASK,
            reason=f"ask rule {rule.display()}",
            layer=DecisionLayer.RULE,
        )
    for rule in rules:
        if rule.effect is RuleEffect.ALLOW and matches_rule(rule, req):
            return Decision(
                verdict=Verdict.ALLOW,
                reason=f"allowed by rule {rule.display()}",
                layer=DecisionLayer.RULE,
            )
    return mode_default(mode, req, project_dir, classifier)


def mode_default(
    mode: PermissionMode,
    req: ToolRequest,
    project_dir: str = "",
    classifier: Callable[[ToolRequest], Decision] | None = None,
) -> Decision:
    if mode is PermissionMode.PLAN:
        if req.tool_name in READ_ONLY_TOOLS:
            return Decision(Verdict.ALLOW, "read-only tool in plan mode", DecisionLayer.MODE)
        return Decision(Verdict.DENY, "plan-unapproved", DecisionLayer.MODE)
    if mode is PermissionMode.DEFAULT:
        return Decision(Verdict.ASK, "no matching rule", DecisionLayer.MODE)
    if mode is PermissionMode.ACCEPT_EDITS:
        if req.tool_name in ("FileEdit", "FileWrite"):
            path = _target_path(req)
            if path and _is_under(path, project_dir):
                return Decision(
                    Verdict.ALLOW, "edit inside project directory", DecisionLayer.MODE
                )
        if req.tool_name == "Bash":
            tokens = req.input.get("command", "").split()
            if tokens and tokens[0] in ACCEPT_EDITS_SHELL_COMMANDS:
                return Decision(
                    Verdict.ALLOW, f"auto-approved shell command {tokens[0]}", DecisionLayer.MODE
                )
        return Decision(Verdict.ASK, "no matching rule", DecisionLayer.MODE)
    if mode is PermissionMode.AUTO:
        return (classifier or classify)(req)
    if mode is PermissionMode.DONT_ASK:
        return Decision(Verdict.ALLOW, "dontAsk mode never prompts", DecisionLayer.MODE)
    if mode is PermissionMode.BYPASS_PERMISSIONS:
        return Decision(Verdict.ALLOW, "permissions bypassed", DecisionLayer.MODE)
    if mode is PermissionMode.BUBBLE:
        raise BubbleEscalation(req)
    raise ValueError(f"unknown mode: {mode}")


def _is_under(path: str, root: str) -> bool:
    if not root:
        return False
    # Relative tool paths resolve against the project dir, matching execution.
    if not os.path.isabs(path):
        path = os.path.join(root, path)
    abs_path = os.path.abspath(path)
    abs_root = os.path.abspath(root)
    return abs_path == abs_root or abs_path.startswith(abs_root.rstrip("/") + "/")


def classify(req: ToolRequest, transcript: object = None) -> Decision:
    """Bundled deterministic heuristic: fast read-only pass, then the table."""
    if req.tool_name in READ_ONLY_TOOLS:
        return Decision(Verdict.ALLOW, "read-only fast path", DecisionLayer.CLASSIFIER)
    command = req.input.get("command", "") if req.tool_name == "Bash" else ""
    if isinstance(command, str):
        for label, pattern in DANGEROUS_COMMAND_PATTERNS:
            if pattern.search(command):
                return Decision(
                    Verdict.DENY,
                    f"dangerous pattern: {label}",
                    DecisionLayer.CLASSIFIER,
                )
    return Decision(Verdict.ASK, "not classifiable as safe", DecisionLayer.CLASSIFIER)


def should_use_sandbox(cfg: SandboxConfig, command: str) -> bool:
    if not command:
        raise ValueError("command must be non-empty")
    if not cfg.globally_enabled or cfg.per_invocation_opt_out:
        return False
    return not any(fnmatch.fnmatch(command, p) for p in cfg.exclusion_patterns)


def prefilter_tools(
    pool: Iterable[ToolSpec], rules: Sequence[PermissionRule]
) -> list[ToolSpec]:
    """Drop tools a blanket deny matches, with the runtime matcher."""
    blanket_denies = [
        r
        for r in rules
        if r.effect is RuleEffect.DENY
        and (r.specifier is None or r.specifier.kind is SpecifierKind.MCP_SERVER)
    ]
    kept: list[ToolSpec] = []
    for spec in pool:
        probe = ToolRequest(tool_use_id="", tool_name=spec.name, input={})
        if any(matches_rule(r, probe) for r in blanket_denies):
            continue
        kept.append(spec)
    return kept
