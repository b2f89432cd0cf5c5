"""Append-only session transcripts, prompt history, and file checkpoints.

Session files only ever grow by whole flushed lines, so any earlier
snapshot of the file is a byte-prefix of the current file and a crash-cut
file loads as its longest whole-line prefix. The loader rebuilds the
in-memory conversation by replaying events, re-applying content
replacements and patching compaction boundaries into a valid chain.
"""

from __future__ import annotations

import fcntl
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .compaction import (
    CollapseEntry,
    CompactionBoundary,
    boundary_marker_message,
    replace_tool_result_content,
)
from .model import (
    Message,
    Role,
    TranscriptEvent,
    new_uuid,
    now_rfc3339,
)

__all__ = [
    "harness_home",
    "projects_root",
    "encode_project_dir",
    "transcript_path",
    "SessionStore",
    "read_events",
    "LoadedSession",
    "load_session",
    "find_transcript",
    "fork_session",
    "append_history",
    "read_history_reverse",
    "FileCheckpoint",
    "checkpoint_file",
    "snapshot_event",
    "rewind_files",
    "list_checkpoints",
]


def harness_home() -> Path:
    return Path(os.environ.get("HARNESS_HOME", os.path.expanduser("~/.harnesskit")))


def projects_root(home: Path | None = None) -> Path:
    return (home or harness_home()) / "projects"


def encode_project_dir(cwd: str) -> str:
    return str(cwd).replace(os.sep, "-")


def transcript_path(root: Path, cwd: str, session_id: str) -> Path:
    return root / encode_project_dir(cwd) / f"{session_id}.jsonl"


class SessionStore:
    """Single writer for one session transcript; whole-line flushed appends."""

    def __init__(self, path: Path, session_id: str) -> None:
        self.path = path
        self.session_id = session_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")
        self.bytes_written = self.path.stat().st_size

    @classmethod
    def open(cls, root: Path, cwd: str, session_id: str) -> "SessionStore":
        return cls(transcript_path(root, cwd, session_id), session_id)

    def append_event(self, event: TranscriptEvent) -> None:
        data = (event.serialize() + "\n").encode("utf-8")
        self._fh.write(data)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.bytes_written += len(data)

    def append_message(self, message: Message) -> TranscriptEvent:
        event = TranscriptEvent.for_message(self.session_id, message)
        self.append_event(event)
        return event

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()


def read_events(path: Path) -> tuple[list[TranscriptEvent], bool]:
    """Parse whole lines; a trailing partial line is reported, not an error."""
    data = path.read_bytes()
    partial = len(data) > 0 and not data.endswith(b"\n")
    # The final split element is either b"" (file ends in newline) or a
    # partial line to ignore; drop it either way.
    whole = data.split(b"\n")[:-1]
    events = [TranscriptEvent.parse(line.decode("utf-8")) for line in whole if line]
    return events, partial


@dataclass
class LoadedSession:
    session_id: str
    path: Path
    project_dir_encoded: str
    messages: list[Message] = field(default_factory=list)
    collapse_store: list[CollapseEntry] = field(default_factory=list)
    replacements: list[dict[str, Any]] = field(default_factory=list)
    boundaries: list[CompactionBoundary] = field(default_factory=list)
    snapshots: list[dict[str, Any]] = field(default_factory=list)
    metas: list[dict[str, Any]] = field(default_factory=list)
    notifications: list[str] = field(default_factory=list)
    pending_snip_freed: int = 0


def find_transcript(session_id: str, root: Path) -> Path | None:
    if not root.is_dir():
        return None
    for project in sorted(root.iterdir()):
        candidate = project / f"{session_id}.jsonl"
        if candidate.is_file():
            return candidate
    return None


def load_session(session_id: str, root: Path) -> LoadedSession:
    """Replay a transcript into the projected conversation.

    Compacted messages keep their original parent uuids on disk; the loader
    relinks each boundary's head to the summary chain (or the boundary
    marker itself when there is no summary). Session-scoped permission
    grants are intentionally not reconstructed.
    """
    path = find_transcript(session_id, root)
    if path is None:
        raise FileNotFoundError(f"unknown session id: {session_id}")
    events, partial = read_events(path)
    loaded = LoadedSession(
        session_id=session_id, path=path, project_dir_encoded=path.parent.name
    )
    if partial:
        loaded.notifications.append("trailing partial line ignored")

    messages: list[Message] = []
    # While a compact summary chain is being read: (boundary, kept segment,
    # summary uuids seen so far).
    awaiting: tuple[CompactionBoundary, list[Message], list[str]] | None = None

    def flush_awaiting() -> None:
        nonlocal awaiting
        if awaiting is None:
            return
        boundary, kept, chain = awaiting
        link = chain[-1] if chain else boundary.uuid
        if kept:
            messages.append(kept[0].with_parent(link))
            messages.extend(kept[1:])
        awaiting = None

    for event in events:
        if event.type == "message":
            msg = event.to_message()
            if awaiting is not None:
                boundary, kept, chain = awaiting
                expected_parent = chain[-1] if chain else boundary.uuid
                is_chain_start = not chain and msg.uuid == boundary.summary_uuid
                continues_chain = bool(chain) and msg.parent_uuid == expected_parent
                if is_chain_start or continues_chain:
                    messages.append(msg)
                    chain.append(msg.uuid)
                    continue
                flush_awaiting()
            messages.append(msg)
            if msg.role is Role.ASSISTANT and msg.usage is not None:
                loaded.pending_snip_freed = 0
        elif event.type == "compact_boundary":
            boundary = CompactionBoundary.from_event(event)
            loaded.boundaries.append(boundary)
            if boundary.kind == "microcompact":
                continue
            flush_awaiting()
            head_idx = next(
                (i for i, m in enumerate(messages) if m.uuid == boundary.head_uuid),
                None,
            )
            kept = messages[head_idx:] if head_idx is not None else []
            marker = boundary_marker_message(boundary, event.timestamp)
            messages.clear()
            messages.append(marker)
            if boundary.kind == "snip":
                if kept:
                    messages.append(kept[0].with_parent(boundary.uuid))
                    messages.extend(kept[1:])
                loaded.pending_snip_freed += boundary.tokens_freed
            else:  # auto_compact: summaries arrive as the next events
                awaiting = (boundary, kept, [])
                loaded.pending_snip_freed += boundary.tokens_freed
        elif event.type == "content_replacement":
            p = event.payload
            loaded.replacements.append(dict(p))
            replaced = replace_tool_result_content(
                messages, p["toolUseId"], p["reference"]
            )
            messages.clear()
            messages.extend(replaced)
        elif event.type == "session_meta":
            meta = dict(event.payload)
            if meta.get("kind") == "collapse":
                loaded.collapse_store.append(
                    CollapseEntry(
                        from_uuid=meta["fromUuid"],
                        to_uuid=meta["toUuid"],
                        summary_text=meta["summaryText"],
                    )
                )
            else:
                loaded.metas.append(meta)
        elif event.type == "file_history_snapshot":
            loaded.snapshots.append(dict(event.payload))
    flush_awaiting()
    loaded.messages = messages
    return loaded


def fork_session(
    session_id: str, root: Path, at_uuid: str | None = None
) -> str:
    """Copy a transcript (up to an optional cut point) under a fresh id."""
    source = find_transcript(session_id, root)
    if source is None:
        raise FileNotFoundError(f"unknown session id: {session_id}")
    new_id = new_uuid()
    target = source.parent / f"{new_id}.jsonl"
    events, _ = read_events(source)
    origin = TranscriptEvent(
        type="session_meta",
        uuid=new_uuid(),
        parent_uuid=None,
        timestamp=now_rfc3339(),
        session_id=new_id,
        payload={"kind": "origin", "forkedFrom": session_id, "atUuid": at_uuid},
    )
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(origin.serialize() + "\n")
        for event in events:
            rewritten = TranscriptEvent(
                type=event.type,
                uuid=event.uuid,
                parent_uuid=event.parent_uuid,
                timestamp=event.timestamp,
                session_id=new_id,
                payload=event.payload,
            )
            fh.write(rewritten.serialize() + "\n")
            if at_uuid is not None and event.uuid == at_uuid:
                break
    return new_id


# --- global prompt history ------------------------------------------------


def append_history(prompt: str, home: Path | None = None, cwd: str = "") -> None:
    home = home or harness_home()
    home.mkdir(parents=True, exist_ok=True)
    entry = {"prompt": prompt, "timestamp": now_rfc3339(), "cwd": cwd}
    line = json.dumps(entry, ensure_ascii=False, separators=(",", ":")) + "\n"
    with open(home / "history.jsonl", "a", encoding="utf-8") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            fh.write(line)
            fh.flush()
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def read_history_reverse(limit: int, home: Path | None = None) -> list[dict[str, Any]]:
    """Newest-first prompt entries, at most ``limit``."""
    if limit <= 0:
        return []
    path = (home or harness_home()) / "history.jsonl"
    if not path.is_file():
        return []
    entries: list[dict[str, Any]] = []
    with open(path, "rb") as fh:
        data = fh.read()
    for raw in data.split(b"\n"):
        if not raw:
            continue
        try:
            entries.append(json.loads(raw.decode("utf-8")))
        except (ValueError, UnicodeDecodeError):
            continue
    return list(reversed(entries))[:limit]


# --- file-history checkpoints ----------------------------------------------


@dataclass(frozen=True)
class FileCheckpoint:
    session_id: str
    original_path: str
    snapshot_path: str | None
    sequence: int
    absent: bool
    timestamp: str


def _file_history_dir(home: Path, session_id: str) -> Path:
    return home / "file-history" / session_id


def list_checkpoints(session_id: str, home: Path | None = None) -> list[FileCheckpoint]:
    home = home or harness_home()
    index = _file_history_dir(home, session_id) / "index.jsonl"
    if not index.is_file():
        return []
    out: list[FileCheckpoint] = []
    for raw in index.read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        rec = json.loads(raw)
        out.append(
            FileCheckpoint(
                session_id=session_id,
                original_path=rec["originalPath"],
                snapshot_path=rec.get("snapshotPath"),
                sequence=rec["sequence"],
                absent=rec.get("absent", False),
                timestamp=rec.get("timestamp", ""),
            )
        )
    return out


def checkpoint_file(
    session_id: str, path: str, home: Path | None = None
) -> FileCheckpoint:
    """Snapshot current bytes (or an absent-marker) before a mutation."""
    home = home or harness_home()
    root = _file_history_dir(home, session_id)
    root.mkdir(parents=True, exist_ok=True)
    existing = list_checkpoints(session_id, home)
    sequence = existing[-1].sequence + 1 if existing else 1
    original = os.path.abspath(path)
    absent = not os.path.exists(original)
    snapshot_path: str | None = None
    if not absent:
        snapshot = root / f"{sequence:06d}-{os.path.basename(original)}"
        shutil.copyfile(original, snapshot)
        snapshot_path = str(snapshot)
    checkpoint = FileCheckpoint(
        session_id=session_id,
        original_path=original,
        snapshot_path=snapshot_path,
        sequence=sequence,
        absent=absent,
        timestamp=now_rfc3339(),
    )
    record = {
        "sequence": sequence,
        "originalPath": original,
        "snapshotPath": snapshot_path,
        "absent": absent,
        "timestamp": checkpoint.timestamp,
    }
    with open(root / "index.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
        fh.flush()
    return checkpoint


def snapshot_event(checkpoint: FileCheckpoint, session_id: str) -> TranscriptEvent:
    return TranscriptEvent(
        type="file_history_snapshot",
        uuid=new_uuid(),
        parent_uuid=None,
        timestamp=checkpoint.timestamp,
        session_id=session_id,
        payload={
            "originalPath": checkpoint.original_path,
            "snapshotPath": checkpoint.snapshot_path or "",
            "sequence": checkpoint.sequence,
            "absent": checkpoint.absent,
        },
    )


def rewind_files(
    session_id: str, to_sequence: int | None = None, home: Path | None = None
) -> list[str]:
    """Restore snapshots newest-to-oldest down to (and including) the target.

    ``to_sequence=None`` undoes every recorded mutation. Files that were
    absent at checkpoint time are deleted.
    """
    home = home or harness_home()
    checkpoints = list_checkpoints(session_id, home)
    target = to_sequence if to_sequence is not None else 1
    restored: list[str] = []
    for cp in sorted(checkpoints, key=lambda c: c.sequence, reverse=True):
        if cp.sequence < target:
            break
        if cp.absent:
            if os.path.exists(cp.original_path):
                os.remove(cp.original_path)
        else:
            assert cp.snapshot_path is not None
            os.makedirs(os.path.dirname(cp.original_path), exist_ok=True)
            shutil.copyfile(cp.snapshot_path, cp.original_path)
        restored.append(cp.original_path)
    return restored
