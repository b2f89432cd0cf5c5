"""Skill discovery and invocation.

A skill is a directory containing SKILL.md: YAML frontmatter plus a
markdown body. Invoking one injects the body into context as an attachment
and may extend the session's allow rules for the current turn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from ..permissions import PermissionRule, RuleEffect, RuleParseError, RuleSource, parse_rule

__all__ = ["SkillDef", "SkillInvocation", "SkillRegistry", "load_skills"]


@dataclass(frozen=True)
class SkillDef:
    name: str
    description: str
    body: str
    path: str
    allowed_tools: tuple[str, ...] = ()
    model: str | None = None
    argument_hint: str | None = None


@dataclass(frozen=True)
class SkillInvocation:
    name: str
    attachment_text: str
    allow_rules: tuple[PermissionRule, ...] = ()


def _parse_skill_file(path: Path) -> SkillDef:
    text = path.read_text(encoding="utf-8")
    if not text.startswith("---"):
        raise ValueError("missing frontmatter")
    parts = text.split("---", 2)
    if len(parts) < 3:
        raise ValueError("unterminated frontmatter")
    meta = yaml.safe_load(parts[1])
    if not isinstance(meta, dict):
        raise ValueError("frontmatter is not a mapping")
    description = meta.get("description")
    if not description:
        raise ValueError("missing description")
    allowed = meta.get("allowed-tools") or []
    if isinstance(allowed, str):
        allowed = [t.strip() for t in allowed.split(",") if t.strip()]
    return SkillDef(
        name=str(meta.get("name") or path.parent.name),
        description=str(description),
        body=parts[2].lstrip("\n"),
        path=str(path),
        allowed_tools=tuple(str(t) for t in allowed),
        model=meta.get("model"),
        argument_hint=meta.get("argument-hint"),
    )


def load_skills(dirs: Sequence[str | Path]) -> tuple[list[SkillDef], list[str]]:
    """Scan `<dir>/<skill>/SKILL.md`; malformed files are skipped loudly."""
    skills: list[SkillDef] = []
    notifications: list[str] = []
    seen: set[str] = set()
    for root in dirs:
        root = Path(root)
        if not root.is_dir():
            continue
        for skill_file in sorted(root.glob("*/SKILL.md")):
            try:
                definition = _parse_skill_file(skill_file)
            except (ValueError, yaml.YAMLError) as exc:
                notifications.append(f"skill skipped ({skill_file}): {exc}")
                continue
            if definition.name in seen:
                continue
            seen.add(definition.name)
            skills.append(definition)
    return skills, notifications


class SkillRegistry:
    """Lookup plus turn-scoped allow-rule accumulation."""

    def __init__(self, skills: Sequence[SkillDef] = ()) -> None:
        self._skills = {s.name: s for s in skills}
        self._pending_rules: list[PermissionRule] = []

    @property
    def skills(self) -> list[SkillDef]:
        return list(self._skills.values())

    def get(self, name: str) -> SkillDef | None:
        return self._skills.get(name)

    def tool_listing(self) -> str:
        if not self._skills:
            return "Load a named skill's instructions into context"
        lines = ["Load a named skill's instructions into context. Available:"]
        for s in self._skills.values():
            hint = f" (args: {s.argument_hint})" if s.argument_hint else ""
            lines.append(f"- {s.name}: {s.description}{hint}")
        return "\n".join(lines)

    def invoke(self, name: str, args: str = "") -> SkillInvocation | None:
        definition = self._skills.get(name)
        if definition is None:
            return None
        rules: list[PermissionRule] = []
        for text in definition.allowed_tools:
            try:
                rules.append(parse_rule(text, RuleEffect.ALLOW, RuleSource.SESSION))
            except RuleParseError:
                continue
        self._pending_rules.extend(rules)
        attachment = definition.body
        if args:
            attachment = f"{attachment}\n\nArguments: {args}"
        return SkillInvocation(
            name=name, attachment_text=attachment, allow_rules=tuple(rules)
        )

    def drain_pending_rules(self) -> list[PermissionRule]:
        rules, self._pending_rules = self._pending_rules, []
        return rules
