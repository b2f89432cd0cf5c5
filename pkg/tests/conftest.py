"""Shared fixtures: isolated homes, message builders, scripted runtimes."""
from __future__ import annotations

import itertools
from pathlib import Path

import pytest

from harnesskit.backend import ScriptedBackend
from harnesskit.loop import TurnDeps
from harnesskit.model import (
    Message,
    Role,
    TokenUsage,
    text_block,
    tool_result_block,
    tool_use_block,
)
from harnesskit.permissions import PermissionMode
from harnesskit.session import open_session

_COUNTER = itertools.count(1)


@pytest.fixture(autouse=True)
def isolated_roots(tmp_path, monkeypatch):
    """Keep every test away from real settings, memory, and transcripts."""
    managed = tmp_path / "managed-root"
    home = tmp_path / "harness-home"
    managed.mkdir()
    home.mkdir()
    monkeypatch.setenv("HARNESS_MANAGED_ROOT", str(managed))
    monkeypatch.setenv("HARNESS_HOME", str(home))
    monkeypatch.delenv("HARNESS_API_URL", raising=False)
    return {"managed": managed, "home": home}


@pytest.fixture
def home(isolated_roots) -> Path:
    return isolated_roots["home"]


@pytest.fixture
def managed_root(isolated_roots) -> Path:
    return isolated_roots["managed"]


@pytest.fixture
def project(tmp_path) -> Path:
    p = tmp_path / "proj"
    p.mkdir()
    return p


def user_msg(text: str, parent: str | None = None, **kw) -> Message:
    return Message.create(role=Role.USER, blocks=[text_block(text)], parent_uuid=parent, **kw)


def asst_msg(
    text: str,
    parent: str | None = None,
    usage: tuple[int, int] | None = None,
    tool_uses: list[tuple[str, str, dict]] = (),
    **kw,
) -> Message:
    blocks = [text_block(text)] if text else []
    for tid, name, tinput in tool_uses:
        blocks.append(tool_use_block(tid, name, tinput))
    return Message.create(
        role=Role.ASSISTANT,
        blocks=blocks,
        parent_uuid=parent,
        usage=TokenUsage(*usage) if usage else None,
        **kw,
    )


def result_msg(pairs: list[tuple[str, str]], parent: str | None = None, **kw) -> Message:
    return Message.create(
        role=Role.USER,
        blocks=[tool_result_block(tid, content) for tid, content in pairs],
        parent_uuid=parent,
        **kw,
    )


def chain(*messages: Message) -> list[Message]:
    """Relink messages parent-wise in the given order."""
    out: list[Message] = []
    prev = None
    for m in messages:
        out.append(m.with_parent(prev.uuid if prev else None))
        prev = out[-1]
    return out


@pytest.fixture
def make_runtime(project, home, managed_root):
    """Factory for persisted runtimes with a scripted backend."""
    opened = []

    def build(script=None, mode=PermissionMode.DONT_ASK, cwd=None, **kw):
        backend = ScriptedBackend(script or [])
        rt = open_session(
            cwd or project,
            home=home,
            mode=mode,
            backend=backend,
            connect_mcp=False,
            managed=managed_root,
            **kw,
        )
        opened.append(rt)
        return rt, backend

    yield build
    for rt in opened:
        if rt.store is not None:
            rt.store.close()


@pytest.fixture
def make_deps():
    def build(backend, **kw):
        return TurnDeps(backend=backend, **kw)

    return build
