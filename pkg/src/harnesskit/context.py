"""Hierarchical instruction memory and per-call prompt assembly.

Instruction files load in reverse priority order (managed, user, then
project files from the outermost directory inward, local overrides last)
and are delivered to the model as a user message, never inside the system
prompt. Directory-scoped files below the working directory activate lazily
on first read of a matching path.
"""

from __future__ import annotations

import os
import platform as _platform
import re
import subprocess
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

from .model import Message, Role, text_block

__all__ = [
    "MemoryLevel",
    "MemoryFile",
    "PromptBundle",
    "discover_memory_files",
    "process_memory_file",
    "ContextAssembler",
    "DEFAULT_MANAGED_ROOT",
]

DEFAULT_MANAGED_ROOT = "/etc/harnesskit"

_INCLUDE_RE = re.compile(r"(?:^|(?<=\s))@([~./\w][\w./~-]*)")
_FENCE_RE = re.compile(r"^\s*(```|~~~)")


class MemoryLevel(str, Enum):
    MANAGED = "managed"
    USER = "user"
    PROJECT = "project"
    LOCAL = "local"
    RULES = "rules"


@dataclass(frozen=True)
class MemoryFile:
    level: MemoryLevel
    path: str
    content: str
    directory_scope: str


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    user_context_message: Message
    conversation: tuple[Message, ...]


def _strip_fenced(text: str) -> str:
    """Text with fenced code block contents blanked, for directive scanning."""
    out: list[str] = []
    in_fence = False
    for line in text.splitlines():
        if _FENCE_RE.match(line):
            in_fence = not in_fence
            out.append("")
            continue
        out.append("" if in_fence else line)
    return "\n".join(out)


def _resolve_include(target: str, base_dir: Path, home: Path) -> Path:
    if target.startswith("~/"):
        return home / target[2:]
    if target.startswith("/"):
        return Path(target)
    return base_dir / target


def process_memory_file(
    path: str | Path, seen: set[str] | None = None, home: Path | None = None
) -> str:
    """Expand @include directives depth-first, each file at most once.

    The including file's own text comes first; included files append after
    it. Directives inside fenced code blocks are inert and missing targets
    are dropped silently.
    """
    home = home or Path(os.path.expanduser("~"))
    seen = seen if seen is not None else set()
    path = Path(path)
    try:
        resolved = str(path.resolve())
    except OSError:
        return ""
    if resolved in seen:
        return ""
    seen.add(resolved)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError:
        return ""
    parts = [text]
    for match in _INCLUDE_RE.finditer(_strip_fenced(text)):
        target = _resolve_include(match.group(1), path.parent, home)
        if not target.is_file():
            continue
        expanded = process_memory_file(target, seen, home)
        if expanded:
            parts.append(expanded)
    return "\n".join(parts)


def _recent_memory_files(memory_dir: Path, limit: int = 5) -> list[Path]:
    if not memory_dir.is_dir():
        return []
    files = [p for p in memory_dir.glob("*.md") if p.is_file()]
    files.sort(key=lambda p: p.stat().st_mtime, reverse=True)
    return files[:limit]


def discover_memory_files(
    cwd: str | Path,
    home: str | Path | None = None,
    managed_root: str | Path = DEFAULT_MANAGED_ROOT,
) -> list[MemoryFile]:
    """All instruction files above and at cwd, in loading order."""
    cwd = Path(cwd).resolve()
    home = Path(home) if home else Path(os.path.expanduser("~"))
    out: list[MemoryFile] = []

    def add(level: MemoryLevel, path: Path, scope: Path) -> None:
        if not path.is_file():
            return
        try:
            content = process_memory_file(path, home=home)
        except OSError:
            return
        out.append(
            MemoryFile(
                level=level,
                path=str(path),
                content=content,
                directory_scope=str(scope),
            )
        )

    add(MemoryLevel.MANAGED, Path(managed_root) / "CLAUDE.md", Path(managed_root))
    add(MemoryLevel.USER, home / ".claude" / "CLAUDE.md", home)
    for recent in _recent_memory_files(home / ".claude" / "memory"):
        add(MemoryLevel.USER, recent, home)

    ancestors = [cwd, *cwd.parents]
    for directory in reversed(ancestors):  # outermost first
        add(MemoryLevel.PROJECT, directory / "CLAUDE.md", directory)
        add(MemoryLevel.PROJECT, directory / ".claude" / "CLAUDE.md", directory)
        rules_dir = directory / ".claude" / "rules"
        if rules_dir.is_dir():
            for rule_file in sorted(rules_dir.glob("*.md")):
                add(MemoryLevel.RULES, rule_file, directory)
        add(MemoryLevel.LOCAL, directory / "CLAUDE.local.md", directory)
    return out


def _instruction_files_in(directory: Path) -> list[Path]:
    candidates = [directory / "CLAUDE.md", directory / ".claude" / "CLAUDE.md"]
    rules_dir = directory / ".claude" / "rules"
    if rules_dir.is_dir():
        candidates.extend(sorted(rules_dir.glob("*.md")))
    candidates.append(directory / "CLAUDE.local.md")
    return [p for p in candidates if p.is_file()]


def _git_status_summary(cwd: str) -> str:
    try:
        probe = subprocess.run(
            ["git", "-C", cwd, "rev-parse", "--abbrev-ref", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if probe.returncode != 0:
            return ""
        branch = probe.stdout.strip()
        status = subprocess.run(
            ["git", "-C", cwd, "status", "--porcelain"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        dirty = len([l for l in status.stdout.splitlines() if l.strip()])
        state = "clean" if dirty == 0 else f"{dirty} changed file(s)"
        return f"git: branch {branch}, {state}"
    except (OSError, subprocess.TimeoutExpired):
        return ""


class ContextAssembler:
    """Builds the per-call prompt bundle, memoized until invalidated.

    Invalidaton happens on compaction and on lazy directory-rule
    activation; nothing else clears the memo.
    """

    def __init__(
        self,
        cwd: str,
        home: str | Path | None = None,
        managed_root: str | Path = DEFAULT_MANAGED_ROOT,
        platform: str | None = None,
    ) -> None:
        self.cwd = str(Path(cwd).resolve())
        self.home = Path(home) if home else Path(os.path.expanduser("~"))
        self.managed_root = str(managed_root)
        self.platform = platform or _platform.system().lower()
        self._memo: tuple[str, str, Message] | None = None
        self._activated_dirs: set[str] = set()
        self._activated_files: list[MemoryFile] = []

    def invalidate(self) -> None:
        self._memo = None

    def assemble(
        self, base_system_prompt: str, conversation: Sequence[Message] = ()
    ) -> PromptBundle:
        if self._memo is not None and self._memo[0] == base_system_prompt:
            _, system_prompt, user_context = self._memo
            return PromptBundle(system_prompt, user_context, tuple(conversation))
        system_parts = [base_system_prompt.rstrip()]
        system_parts.append(f"Working directory: {self.cwd}")
        system_parts.append(f"Platform: {self.platform}")
        git_line = _git_status_summary(self.cwd)
        if git_line:
            system_parts.append(git_line)
        system_prompt = "\n".join(p for p in system_parts if p)

        memory = discover_memory_files(self.cwd, self.home, self.managed_root)
        memory = memory + self._activated_files
        context_parts: list[str] = []
        for mf in memory:
            if not mf.content.strip():
                continue
            context_parts.append(f"# Instructions from {mf.path}\n{mf.content.rstrip()}")
        today = datetime.now(timezone.utc).strftime("%Y-%m-%d")
        context_parts.append(f"Today's date: {today}")
        user_context = Message.create(
            role=Role.USER, blocks=[text_block("\n\n".join(context_parts))]
        )
        self._memo = (base_system_prompt, system_prompt, user_context)
        return PromptBundle(system_prompt, user_context, tuple(conversation))

    def lazy_load_rules(self, read_path: str) -> list[MemoryFile]:
        """Activate instruction files for a subdirectory on first read."""
        try:
            resolved = Path(read_path).resolve()
        except OSError:
            return []
        directory = resolved if resolved.is_dir() else resolved.parent
        cwd = Path(self.cwd)
        newly: list[MemoryFile] = []
        current = directory
        while True:
            try:
                current.relative_to(cwd)
            except ValueError:
                break
            if current == cwd:
                break
            key = str(current)
            if key not in self._activated_dirs:
                self._activated_dirs.add(key)
                for path in _instruction_files_in(current):
                    level = (
                        MemoryLevel.LOCAL
                        if path.name == "CLAUDE.local.md"
                        else MemoryLevel.RULES
                        if path.parent.name == "rules"
                        else MemoryLevel.PROJECT
                    )
                    newly.append(
                        MemoryFile(
                            level=level,
                            path=str(path),
                            content=process_memory_file(path, home=self.home),
                            directory_scope=key,
                        )
                    )
            current = current.parent
        if newly:
            self._activated_files.extend(newly)
            self.invalidate()
        return newly
