"""Layered settings discovery, validation, and merge.

Settings files are JSON; four locations are consulted in fixed order:
managed, user home, project, project-local. Rules from the managed layer
survive permission-bypass modes; everything else is advisory layering on
top of the same deny-first evaluator.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .permissions import (
    PermissionRule,
    RuleEffect,
    RuleParseError,
    RuleSource,
    SandboxConfig,
    parse_rule,
)

DEFAULT_MANAGED_ROOT = "/etc/harnesskit"

SETTINGS_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "permissions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "allow": {"type": "array", "items": {"type": "string"}},
                "deny": {"type": "array", "items": {"type": "string"}},
                "ask": {"type": "array", "items": {"type": "string"}},
            },
        },
        "sandbox": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "exclude": {"type": "array", "items": {"type": "string"}},
            },
        },
        "hooks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["event", "command"],
                "additionalProperties": False,
                "properties": {
                    "event": {"type": "string"},
                    "matcher": {"type": ["string", "null"]},
                    "type": {"type": "string", "enum": ["command"]},
                    "command": {"type": "string"},
                    "timeout_ms": {"type": "integer", "minimum": 1},
                },
            },
        },
        "mcpServers": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["command"],
                "properties": {
                    "command": {"type": "string"},
                    "args": {"type": "array", "items": {"type": "string"}},
                    "env": {"type": "object"},
                },
            },
        },
    },
}


class ConfigError(Exception):
    """Invalid settings content; callers map this to the config exit code."""


@dataclass
class Settings:
    rules: list[PermissionRule] = field(default_factory=list)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    hook_entries: list[dict[str, Any]] = field(default_factory=list)
    mcp_servers: dict[str, Any] = field(default_factory=dict)
    notifications: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)


def managed_root() -> Path:
    return Path(os.environ.get("HARNESS_MANAGED_ROOT", DEFAULT_MANAGED_ROOT))


def settings_paths(
    cwd: str | Path, home: str | Path, managed: str | Path | None = None
) -> list[tuple[RuleSource, Path]]:
    managed_dir = Path(managed) if managed else managed_root()
    cwd = Path(cwd)
    home = Path(home)
    return [
        (RuleSource.MANAGED, managed_dir / "settings.json"),
        (RuleSource.SETTINGS, home / "settings.json"),
        (RuleSource.SETTINGS, cwd / ".claude" / "settings.json"),
        (RuleSource.SETTINGS, cwd / ".claude" / "settings.local.json"),
    ]


def load_settings_file(path: Path) -> dict[str, Any]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(raw, SETTINGS_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: {exc.message}") from exc
    return raw


_EFFECTS = (
    ("deny", RuleEffect.DENY),
    ("ask", RuleEffect.ASK),
    ("allow", RuleEffect.ALLOW),
)


def _parse_layer_rules(
    raw: dict[str, Any], source: RuleSource, origin: Path
) -> list[PermissionRule]:
    rules: list[PermissionRule] = []
    permissions = raw.get("permissions") or {}
    for key, effect in _EFFECTS:
        for text in permissions.get(key, []):
            try:
                rules.append(parse_rule(text, effect, source))
            except RuleParseError as exc:
                raise ConfigError(f"{origin}: bad rule {text!r}: {exc}") from exc
    return rules


def load_config(
    cwd: str | Path,
    home: str | Path,
    managed: str | Path | None = None,
) -> Settings:
    """Merge every settings layer that exists; missing files are fine."""
    settings = Settings()
    sandbox_enabled = False
    exclusions: list[str] = []
    for source, path in settings_paths(cwd, home, managed):
        if not path.is_file():
            continue
        raw = load_settings_file(path)
        settings.sources.append(str(path))
        settings.rules.extend(_parse_layer_rules(raw, source, path))
        sandbox = raw.get("sandbox") or {}
        if "enabled" in sandbox:
            sandbox_enabled = bool(sandbox["enabled"])
        exclusions.extend(sandbox.get("exclude", []))
        settings.hook_entries.extend(raw.get("hooks", []))
        for name, entry in (raw.get("mcpServers") or {}).items():
            settings.mcp_servers[name] = entry

    mcp_file = Path(cwd) / ".mcp.json"
    if mcp_file.is_file():
        try:
            raw = json.loads(mcp_file.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{mcp_file}: invalid JSON: {exc}") from exc
        for name, entry in (raw.get("mcpServers") or {}).items():
            settings.mcp_servers[name] = entry
        settings.sources.append(str(mcp_file))

    settings.sandbox = SandboxConfig(
        globally_enabled=sandbox_enabled,
        exclusion_patterns=tuple(exclusions),
    )
    return settings


def cli_rules(
    allow: Sequence[str] = (),
    deny: Sequence[str] = (),
    ask: Sequence[str] = (),
) -> list[PermissionRule]:
    """Parse command-line rule flags; errors are config errors."""
    rules: list[PermissionRule] = []
    for texts, effect in ((deny, RuleEffect.DENY), (ask, RuleEffect.ASK), (allow, RuleEffect.ALLOW)):
        for text in texts:
            try:
                rules.append(parse_rule(text, effect, RuleSource.CLI))
            except RuleParseError as exc:
                raise ConfigError(f"bad rule {text!r}: {exc}") from exc
    return rules


def skill_dirs(cwd: str | Path, home: str | Path) -> list[Path]:
    return [Path(home) / "skills", Path(cwd) / ".claude" / "skills"]


def agent_dirs(cwd: str | Path, home: str | Path) -> list[Path]:
    return [Path(home) / "agents", Path(cwd) / ".claude" / "agents"]
