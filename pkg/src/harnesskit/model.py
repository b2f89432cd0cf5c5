"""Shared vocabulary: messages, content blocks, transcript events, token math.

Every other module builds on these value types. Transcript events serialize
to exactly one JSONL line with a fixed field order, so byte-prefix checks on
session files are exact and deserialize/reserialize is byte-identical.
"""

from __future__ import annotations

import json
import math
import uuid as _uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Any

__all__ = [
    "Role",
    "ContentBlock",
    "TokenUsage",
    "Message",
    "TranscriptEvent",
    "SessionHandle",
    "TurnState",
    "CompactionTracking",
    "RecoveryCounters",
    "ChainViolation",
    "new_uuid",
    "now_rfc3339",
    "text_block",
    "thinking_block",
    "tool_use_block",
    "tool_result_block",
    "message_char_size",
    "char_estimate",
    "estimate_context_tokens",
    "validate_chain",
]


def new_uuid() -> str:
    return _uuid.uuid4().hex


def now_rfc3339() -> str:
    """Current UTC instant as RFC-3339 with millisecond precision."""
    dt = datetime.now(timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{dt.microsecond // 1000:03d}Z"


class Role(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"
    SYSTEM = "system"
    ATTACHMENT = "attachment"


@dataclass(frozen=True)
class ContentBlock:
    """One unit of message content.

    kind=text/thinking use ``text``; kind=tool_use uses ``tool_name``,
    ``tool_use_id`` and ``input``; kind=tool_result uses ``for_tool_use_id``,
    ``content`` and ``is_error``.
    """

    kind: str
    text: str = ""
    tool_name: str = ""
    tool_use_id: str = ""
    input: Any = None
    for_tool_use_id: str = ""
    content: str = ""
    is_error: bool = False

    def to_wire(self) -> dict[str, Any]:
        if self.kind == "text":
            return {"type": "text", "text": self.text}
        if self.kind == "thinking":
            return {"type": "thinking", "text": self.text}
        if self.kind == "tool_use":
            return {
                "type": "tool_use",
                "id": self.tool_use_id,
                "name": self.tool_name,
                "input": self.input,
            }
        if self.kind == "tool_result":
            return {
                "type": "tool_result",
                "tool_use_id": self.for_tool_use_id,
                "content": self.content,
                "is_error": self.is_error,
            }
        raise ValueError(f"unknown block kind: {self.kind}")

    @staticmethod
    def from_wire(obj: dict[str, Any]) -> "ContentBlock":
        kind = obj.get("type")
        if kind in ("text", "thinking"):
            return ContentBlock(kind=kind, text=obj.get("text", ""))
        if kind == "tool_use":
            return ContentBlock(
                kind="tool_use",
                tool_use_id=obj.get("id", ""),
                tool_name=obj.get("name", ""),
                input=obj.get("input"),
            )
        if kind == "tool_result":
            return ContentBlock(
                kind="tool_result",
                for_tool_use_id=obj.get("tool_use_id", ""),
                content=obj.get("content", ""),
                is_error=bool(obj.get("is_error", False)),
            )
        raise ValueError(f"unknown block kind: {kind!r}")


def text_block(text: str) -> ContentBlock:
    return ContentBlock(kind="text", text=text)


def thinking_block(text: str) -> ContentBlock:
    return ContentBlock(kind="thinking", text=text)


def tool_use_block(tool_use_id: str, tool_name: str, input: Any) -> ContentBlock:
    return ContentBlock(
        kind="tool_use", tool_use_id=tool_use_id, tool_name=tool_name, input=input
    )


def tool_result_block(
    for_tool_use_id: str, content: str, is_error: bool = False
) -> ContentBlock:
    return ContentBlock(
        kind="tool_result",
        for_tool_use_id=for_tool_use_id,
        content=content,
        is_error=is_error,
    )


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def to_wire(self) -> dict[str, int]:
        return {"input_tokens": self.input_tokens, "output_tokens": self.output_tokens}

    @staticmethod
    def from_wire(obj: dict[str, Any]) -> "TokenUsage":
        return TokenUsage(
            input_tokens=int(obj["input_tokens"]),
            output_tokens=int(obj["output_tokens"]),
        )


@dataclass(frozen=True)
class Message:
    uuid: str
    parent_uuid: str | None
    role: Role
    blocks: tuple[ContentBlock, ...]
    timestamp: str
    usage: TokenUsage | None = None
    is_sidechain: bool = False

    @staticmethod
    def create(
        role: Role,
        blocks: list[ContentBlock] | tuple[ContentBlock, ...],
        parent_uuid: str | None = None,
        usage: TokenUsage | None = None,
        is_sidechain: bool = False,
        uuid: str | None = None,
        timestamp: str | None = None,
    ) -> "Message":
        return Message(
            uuid=uuid or new_uuid(),
            parent_uuid=parent_uuid,
            role=role,
            blocks=tuple(blocks),
            timestamp=timestamp or now_rfc3339(),
            usage=usage,
            is_sidechain=is_sidechain,
        )

    def with_parent(self, parent_uuid: str | None) -> "Message":
        return replace(self, parent_uuid=parent_uuid)

    def with_blocks(self, blocks: tuple[ContentBlock, ...]) -> "Message":
        return replace(self, blocks=blocks)

    def text(self) -> str:
        return "".join(b.text for b in self.blocks if b.kind == "text")

    def tool_uses(self) -> list[ContentBlock]:
        return [b for b in self.blocks if b.kind == "tool_use"]

    def tool_results(self) -> list[ContentBlock]:
        return [b for b in self.blocks if b.kind == "tool_result"]


def _canonical_value(value: Any) -> Any:
    """Sort free-form dicts so canonical serialization is deterministic."""
    if isinstance(value, dict):
        return {k: _canonical_value(value[k]) for k in sorted(value)}
    if isinstance(value, (list, tuple)):
        return [_canonical_value(v) for v in value]
    return value


def _dumps(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


EVENT_TYPES = (
    "message",
    "compact_boundary",
    "file_history_snapshot",
    "content_replacement",
    "session_meta",
)

_PAYLOAD_KEY = {
    "message": "message",
    "compact_boundary": "boundary",
    "file_history_snapshot": "snapshot",
    "content_replacement": "replacement",
    "session_meta": "meta",
}


@dataclass(frozen=True)
class TranscriptEvent:
    """One durable line of a session log.

    ``payload`` is the type-specific record keyed per the JSONL schema:
    message / boundary / snapshot / replacement / meta.
    """

    type: str
    uuid: str
    parent_uuid: str | None
    timestamp: str
    session_id: str
    payload: dict[str, Any]

    def serialize(self) -> str:
        if self.type not in _PAYLOAD_KEY:
            raise ValueError(f"unknown event type: {self.type}")
        record = {
            "type": self.type,
            "uuid": self.uuid,
            "parentUuid": self.parent_uuid,
            "timestamp": self.timestamp,
            "sessionId": self.session_id,
            _PAYLOAD_KEY[self.type]: _canonical_payload(self.type, self.payload),
        }
        line = _dumps(record)
        if "\n" in line or "\r" in line:
            raise ValueError("serialized event must be a single line")
        return line

    @staticmethod
    def parse(line: str) -> "TranscriptEvent":
        record = json.loads(line)
        etype = record.get("type")
        if etype not in _PAYLOAD_KEY:
            raise ValueError(f"unknown event type: {etype!r}")
        return TranscriptEvent(
            type=etype,
            uuid=record["uuid"],
            parent_uuid=record.get("parentUuid"),
            timestamp=record["timestamp"],
            session_id=record.get("sessionId", ""),
            payload=record[_PAYLOAD_KEY[etype]],
        )

    @staticmethod
    def for_message(session_id: str, message: Message) -> "TranscriptEvent":
        return TranscriptEvent(
            type="message",
            uuid=message.uuid,
            parent_uuid=message.parent_uuid,
            timestamp=message.timestamp,
            session_id=session_id,
            payload=message_payload(message),
        )

    def to_message(self) -> Message:
        if self.type != "message":
            raise ValueError("not a message event")
        p = self.payload
        usage = TokenUsage.from_wire(p["usage"]) if p.get("usage") else None
        return Message(
            uuid=self.uuid,
            parent_uuid=self.parent_uuid,
            role=Role(p["role"]),
            blocks=tuple(ContentBlock.from_wire(b) for b in p["content"]),
            timestamp=self.timestamp,
            usage=usage,
            is_sidechain=bool(p.get("isSidechain", False)),
        )


def message_payload(message: Message) -> dict[str, Any]:
    return {
        "role": message.role.value,
        "isSidechain": message.is_sidechain,
        "usage": message.usage.to_wire() if message.usage else None,
        "content": [b.to_wire() for b in message.blocks],
    }


def _canonical_payload(etype: str, payload: dict[str, Any]) -> dict[str, Any]:
    """Fixed field order per event type; free-form values get sorted keys."""
    if etype == "message":
        return {
            "role": payload["role"],
            "isSidechain": payload.get("isSidechain", False),
            "usage": _canonical_value(payload.get("usage")),
            "content": [_canonical_block(b) for b in payload["content"]],
        }
    if etype == "compact_boundary":
        return {
            "kind": payload["kind"],
            "headUuid": payload["headUuid"],
            "anchorUuid": payload["anchorUuid"],
            "tailUuid": payload["tailUuid"],
            "tokensFreed": payload["tokensFreed"],
            "summaryUuid": payload.get("summaryUuid"),
        }
    if etype == "file_history_snapshot":
        return {
            "originalPath": payload["originalPath"],
            "snapshotPath": payload["snapshotPath"],
            "sequence": payload["sequence"],
            "absent": payload.get("absent", False),
        }
    if etype == "content_replacement":
        return {
            "toolUseId": payload["toolUseId"],
            "originalSizeChars": payload["originalSizeChars"],
            "reference": payload["reference"],
            "persisted": payload.get("persisted", True),
            "origin": payload.get("origin", "budget"),
        }
    if etype == "session_meta":
        return _canonical_value(payload)
    raise ValueError(f"unknown event type: {etype}")


def _canonical_block(obj: dict[str, Any]) -> dict[str, Any]:
    kind = obj.get("type")
    if kind in ("text", "thinking"):
        return {"type": kind, "text": obj.get("text", "")}
    if kind == "tool_use":
        return {
            "type": "tool_use",
            "id": obj.get("id", ""),
            "name": obj.get("name", ""),
            "input": _canonical_value(obj.get("input")),
        }
    if kind == "tool_result":
        return {
            "type": "tool_result",
            "tool_use_id": obj.get("tool_use_id", ""),
            "content": obj.get("content", ""),
            "is_error": bool(obj.get("is_error", False)),
        }
    raise ValueError(f"unknown block kind: {kind!r}")


# --- token accounting ---------------------------------------------------


def message_char_size(message: Message) -> int:
    """Character count of the message's serialized content blocks."""
    return len(_dumps([_canonical_block(b.to_wire()) for b in message.blocks]))


def char_estimate(message: Message) -> int:
    return math.ceil(message_char_size(message) / 4)


def estimate_context_tokens(messages: list[Message], snip_tokens_freed: int = 0) -> int:
    """Estimated context tokens for the projected (post-shaper) conversation.

    Anchors on the most recent assistant message that carries usage; newer
    messages are charged at chars/4. Savings from trims that the anchored
    usage cannot see are subtracted via ``snip_tokens_freed``.
    """
    anchor = None
    for i in range(len(messages) - 1, -1, -1):
        m = messages[i]
        if m.role is Role.ASSISTANT and m.usage is not None:
            anchor = i
            break
    if anchor is None:
        return sum(char_estimate(m) for m in messages)
    total = messages[anchor].usage.input_tokens
    total += sum(char_estimate(m) for m in messages[anchor + 1 :])
    total -= snip_tokens_freed
    return max(total, 0)


# --- chain validation ---------------------------------------------------


@dataclass(frozen=True)
class ChainViolation:
    uuid: str
    reason: str


def validate_chain(messages: list[Message]) -> list[ChainViolation]:
    """Empty list iff uuids are unique and every parent is an earlier message."""
    violations: list[ChainViolation] = []
    seen: set[str] = set()
    for m in messages:
        if m.uuid in seen:
            violations.append(ChainViolation(m.uuid, "duplicate uuid"))
        if m.parent_uuid is not None and m.parent_uuid not in seen:
            violations.append(ChainViolation(m.uuid, "parent not an earlier message"))
        seen.add(m.uuid)
    return violations


# --- session-scoped mutable state ----------------------------------------


@dataclass
class CompactionTracking:
    snip_tokens_freed: int = 0
    last_boundary_uuid: str | None = None
    shaper_trace: list[str] = field(default_factory=list)


@dataclass
class RecoveryCounters:
    output_token_escalations: int = 0
    reactive_compact_attempted: bool = False
    fallback_switched: bool = False


@dataclass
class TurnState:
    """All mutable loop state; replaced whole at loop continue-points."""

    messages: list[Message] = field(default_factory=list)
    tool_context: dict[str, Any] = field(default_factory=dict)
    compaction: CompactionTracking = field(default_factory=CompactionTracking)
    recovery_counters: RecoveryCounters = field(default_factory=RecoveryCounters)

    def evolve(self, **changes: Any) -> "TurnState":
        merged = {
            "messages": self.messages,
            "tool_context": self.tool_context,
            "compaction": self.compaction,
            "recovery_counters": self.recovery_counters,
        }
        merged.update(changes)
        return TurnState(**merged)


@dataclass
class SessionHandle:
    """Session identity plus in-memory turn state.

    ``session_id`` and ``project_dir`` are set together at open/resume/fork
    and never mutated independently afterwards.
    """

    session_id: str
    project_dir: str
    mode: Any = None  # PermissionMode; typed loosely to avoid an import cycle
    state: TurnState = field(default_factory=TurnState)
