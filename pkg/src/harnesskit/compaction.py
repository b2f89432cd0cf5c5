"""Pre-model context shaping: five sequential reducers plus replay helpers.

Order is fixed: tool-result budget, snip, microcompact, collapse projection,
auto-compact. Every reducer is a pure transform over the message list that
also returns the transcript events needed to make the reduction replayable;
nothing here writes to disk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace as dc_replace
from typing import Any, Callable, Sequence

from .hooks import HookEvent, HookRegistry, fire
from .model import (
    ContentBlock,
    Message,
    Role,
    TranscriptEvent,
    char_estimate,
    estimate_context_tokens,
    new_uuid,
    now_rfc3339,
    text_block,
)

__all__ = [
    "CompactionConfig",
    "CompactionBoundary",
    "CollapseEntry",
    "ShaperOutcome",
    "microcompact_placeholder",
    "budget_reference",
    "boundary_marker_message",
    "split_turns",
    "apply_tool_result_budget",
    "snip",
    "microcompact",
    "apply_collapses",
    "auto_compact",
    "annotate_boundary",
    "run_shapers",
    "SHAPER_ORDER",
    "AUTO_COMPACT_MARKER_TEXT",
    "SNIP_MARKER_TEXT",
    "COMPACT_PROMPT",
]

SHAPER_ORDER = ("budget", "snip", "microcompact", "collapse", "auto_compact")

AUTO_COMPACT_MARKER_TEXT = "[conversation history compacted above this point]"
SNIP_MARKER_TEXT = "[older conversation trimmed above this point]"

COMPACT_PROMPT = (
    "Summarize the conversation so far for continuation. Preserve: the "
    "user's goals, decisions made, file paths touched, commands run with "
    "their outcomes, and any unresolved work. Be specific and complete."
)


@dataclass(frozen=True)
class CompactionConfig:
    window_tokens: int = 200_000
    autocompact_threshold: float = 0.92
    snip_retention_turns: int = 20
    microcompact_age_turns: int = 5
    budget_chars: int = 40_000
    keep_fraction: float = 0.3
    snip_enabled: bool = True
    microcompact_enabled: bool = True
    collapse_enabled: bool = True
    autocompact_enabled: bool = True


@dataclass(frozen=True)
class CompactionBoundary:
    uuid: str
    kind: str  # auto_compact | microcompact | snip
    head_uuid: str
    anchor_uuid: str
    tail_uuid: str
    tokens_freed: int
    summary_uuid: str | None = None

    def to_event(self, session_id: str, timestamp: str | None = None) -> TranscriptEvent:
        return TranscriptEvent(
            type="compact_boundary",
            uuid=self.uuid,
            parent_uuid=None,
            timestamp=timestamp or now_rfc3339(),
            session_id=session_id,
            payload={
                "kind": self.kind,
                "headUuid": self.head_uuid,
                "anchorUuid": self.anchor_uuid,
                "tailUuid": self.tail_uuid,
                "tokensFreed": self.tokens_freed,
                "summaryUuid": self.summary_uuid,
            },
        )

    @staticmethod
    def from_event(event: TranscriptEvent) -> "CompactionBoundary":
        p = event.payload
        return CompactionBoundary(
            uuid=event.uuid,
            kind=p["kind"],
            head_uuid=p["headUuid"],
            anchor_uuid=p["anchorUuid"],
            tail_uuid=p["tailUuid"],
            tokens_freed=p["tokensFreed"],
            summary_uuid=p.get("summaryUuid"),
        )


@dataclass(frozen=True)
class CollapseEntry:
    from_uuid: str
    to_uuid: str
    summary_text: str


@dataclass
class ShaperOutcome:
    messages: list[Message]
    view: list[Message]
    trace: list[str] = field(default_factory=list)
    events: list[TranscriptEvent] = field(default_factory=list)
    snip_tokens_freed: int = 0
    compacted: bool = False
    boundary: CompactionBoundary | None = None
    notifications: list[str] = field(default_factory=list)


def microcompact_placeholder(tool_use_id: str) -> str:
    return f"[tool result replaced: {tool_use_id}]"


def budget_reference(tool_use_id: str, original_size: int) -> str:
    return f"[oversized tool result replaced: {tool_use_id} ({original_size} chars)]"


def boundary_marker_message(boundary: CompactionBoundary, timestamp: str) -> Message:
    text = (
        AUTO_COMPACT_MARKER_TEXT if boundary.kind == "auto_compact" else SNIP_MARKER_TEXT
    )
    return Message(
        uuid=boundary.uuid,
        parent_uuid=None,
        role=Role.SYSTEM,
        blocks=(text_block(text),),
        timestamp=timestamp,
    )


def split_turns(messages: Sequence[Message]) -> list[list[Message]]:
    """Group messages into turns.

    A user message carrying no tool_result blocks opens a new turn; every
    other message belongs to the turn in progress.
    """
    turns: list[list[Message]] = []
    for m in messages:
        starts_turn = (
            m.role is Role.USER
            and not m.tool_results()
            and not m.is_sidechain
        )
        if starts_turn or not turns:
            turns.append([m])
        else:
            turns[-1].append(m)
    return turns


def _tool_names_by_use_id(messages: Sequence[Message]) -> dict[str, str]:
    names: dict[str, str] = {}
    for m in messages:
        for b in m.tool_uses():
            names[b.tool_use_id] = b.tool_name
    return names


def _replacement_event(
    session_id: str, tool_use_id: str, original_size: int, reference: str, origin: str
) -> TranscriptEvent:
    return TranscriptEvent(
        type="content_replacement",
        uuid=new_uuid(),
        parent_uuid=None,
        timestamp=now_rfc3339(),
        session_id=session_id,
        payload={
            "toolUseId": tool_use_id,
            "originalSizeChars": original_size,
            "reference": reference,
            "persisted": True,
            "origin": origin,
        },
    )


def replace_tool_result_content(
    messages: list[Message], tool_use_id: str, new_content: str
) -> list[Message]:
    """Rewrite the matching tool_result block's content, preserving uuids."""
    out: list[Message] = []
    for m in messages:
        hit = any(
            b.kind == "tool_result" and b.for_tool_use_id == tool_use_id
            for b in m.blocks
        )
        if not hit:
            out.append(m)
            continue
        new_blocks = tuple(
            dc_replace(b, content=new_content)
            if b.kind == "tool_result" and b.for_tool_use_id == tool_use_id
            else b
            for b in m.blocks
        )
        out.append(m.with_blocks(new_blocks))
    return out


def apply_tool_result_budget(
    messages: list[Message],
    caps: dict[str, float],
    default_cap: float,
    session_id: str = "",
) -> tuple[list[Message], list[TranscriptEvent]]:
    """Clamp oversized tool results to a reference string, one event each."""
    names = _tool_names_by_use_id(messages)
    events: list[TranscriptEvent] = []
    out = list(messages)
    for m in messages:
        for b in m.blocks:
            if b.kind != "tool_result":
                continue
            tool = names.get(b.for_tool_use_id, "")
            cap = caps.get(tool, default_cap)
            if cap == math.inf or len(b.content) <= cap:
                continue
            reference = budget_reference(b.for_tool_use_id, len(b.content))
            if b.content == reference:
                continue
            out = replace_tool_result_content(out, b.for_tool_use_id, reference)
            events.append(
                _replacement_event(
                    session_id, b.for_tool_use_id, len(b.content), reference, "budget"
                )
            )
    return out, events


def snip(
    messages: list[Message], retention: int, session_id: str = ""
) -> tuple[list[Message], int, CompactionBoundary | None]:
    """Drop whole oldest turns beyond the retention count.

    The freed-token figure is net of the marker message the trim leaves in
    place, so the context estimator moves by exactly this amount.

    The turn holding the newest assistant usage always survives: once that
    anchor is gone the estimator reprices the survivors at chars/4, which
    can move the estimate up instead of down.
    """
    turns = split_turns(messages)
    cut = len(turns) - retention
    anchor_uuid = None
    for m in reversed(messages):
        if m.role is Role.ASSISTANT and m.usage is not None:
            anchor_uuid = m.uuid
            break
    if anchor_uuid is not None:
        for idx, turn in enumerate(turns):
            if any(m.uuid == anchor_uuid for m in turn):
                cut = min(cut, idx)
                break
    if cut <= 0:
        return messages, 0, None
    removed_turns = turns[:cut]
    kept: list[Message] = [m for turn in turns[cut:] for m in turn]
    removed = [m for turn in removed_turns for m in turn]
    if not kept:
        return messages, 0, None
    boundary_uuid = new_uuid()
    boundary = CompactionBoundary(
        uuid=boundary_uuid,
        kind="snip",
        head_uuid=kept[0].uuid,
        anchor_uuid=kept[0].uuid,
        tail_uuid=kept[-1].uuid,
        tokens_freed=0,
        summary_uuid=None,
    )
    marker = boundary_marker_message(boundary, now_rfc3339())
    freed = sum(char_estimate(m) for m in removed) - char_estimate(marker)
    if freed <= 0:
        # The marker would cost more than the trim saves; leave history alone
        # so the context estimate never moves upward.
        return messages, 0, None
    boundary = dc_replace(boundary, tokens_freed=freed)
    patched_head = kept[0].with_parent(boundary_uuid)
    return [marker, patched_head, *kept[1:]], freed, boundary


def microcompact(
    messages: list[Message],
    age_threshold: int,
    session_id: str = "",
) -> tuple[list[Message], list[TranscriptEvent], CompactionBoundary | None]:
    """Placeholder-substitute tool results older than N assistant turns.

    Works purely by tool_use_id; running it twice is the identity because
    already-substituted content matches its own placeholder.
    """
    assistant_positions: dict[str, int] = {}
    assistant_count = 0
    for m in messages:
        if m.role is Role.ASSISTANT:
            assistant_count += 1
            for b in m.tool_uses():
                assistant_positions[b.tool_use_id] = assistant_count
    out = list(messages)
    events: list[TranscriptEvent] = []
    touched_message_uuids: list[str] = []
    for m in messages:
        for b in m.blocks:
            if b.kind != "tool_result":
                continue
            born = assistant_positions.get(b.for_tool_use_id)
            if born is None:
                continue
            age = assistant_count - born
            if age <= age_threshold:
                continue
            placeholder = microcompact_placeholder(b.for_tool_use_id)
            if b.content == placeholder or len(b.content) <= len(placeholder):
                continue
            out = replace_tool_result_content(out, b.for_tool_use_id, placeholder)
            events.append(
                _replacement_event(
                    session_id,
                    b.for_tool_use_id,
                    len(b.content),
                    placeholder,
                    "microcompact",
                )
            )
            touched_message_uuids.append(m.uuid)
    boundary: CompactionBoundary | None = None
    if touched_message_uuids:
        freed = sum(
            math.ceil(e.payload["originalSizeChars"] / 4) for e in events
        )
        boundary = CompactionBoundary(
            uuid=new_uuid(),
            kind="microcompact",
            head_uuid=touched_message_uuids[0],
            anchor_uuid=touched_message_uuids[0],
            tail_uuid=touched_message_uuids[-1],
            tokens_freed=freed,
            summary_uuid=None,
        )
    return out, events, boundary


def _collapse_summary_message(entry: CollapseEntry, parent_uuid: str | None) -> Message:
    # Deterministic uuid so repeated projections compare equal.
    uid = f"collapse-{entry.from_uuid[:12]}-{entry.to_uuid[:12]}"
    return Message(
        uuid=uid,
        parent_uuid=parent_uuid,
        role=Role.USER,
        blocks=(text_block(entry.summary_text),),
        timestamp="1970-01-01T00:00:00.000Z",
    )


def apply_collapses(
    history: Sequence[Message], store: Sequence[CollapseEntry]
) -> tuple[list[Message], list[str]]:
    """Read-time projection replacing stored ranges with summary messages.

    The history list is never modified. Entries whose endpoints no longer
    exist in the history are skipped and reported.
    """
    notifications: list[str] = []
    index = {m.uuid: i for i, m in enumerate(history)}
    spans: list[tuple[int, int, CollapseEntry]] = []
    for entry in store:
        i = index.get(entry.from_uuid)
        j = index.get(entry.to_uuid)
        if i is None or j is None or i > j:
            notifications.append(
                f"collapse entry skipped: range {entry.from_uuid}..{entry.to_uuid} not found"
            )
            continue
        spans.append((i, j, entry))
    spans.sort(key=lambda s: s[0])
    span_starts: dict[int, tuple[int, CollapseEntry]] = {}
    prev_end = -1
    for i, j, entry in spans:
        if i <= prev_end:
            notifications.append(
                f"collapse entry skipped: range {entry.from_uuid}..{entry.to_uuid} overlaps"
            )
            continue
        span_starts[i] = (j, entry)
        prev_end = j
    projected: list[Message] = []
    pending_parent: str | None = None
    idx = 0
    while idx < len(history):
        span = span_starts.get(idx)
        if span is not None:
            j, entry = span
            parent = pending_parent if pending_parent is not None else history[idx].parent_uuid
            summary = _collapse_summary_message(entry, parent)
            projected.append(summary)
            pending_parent = summary.uuid
            idx = j + 1
            continue
        m = history[idx]
        if pending_parent is not None:
            m = m.with_parent(pending_parent)
            pending_parent = None
        projected.append(m)
        idx += 1
    return projected, notifications


def annotate_boundary(
    boundary: CompactionBoundary,
    kept_segment: Sequence[Message],
    summary_uuid: str | None,
) -> CompactionBoundary:
    if not kept_segment:
        anchor = summary_uuid or boundary.uuid
        return dc_replace(
            boundary,
            head_uuid=anchor,
            anchor_uuid=anchor,
            tail_uuid=anchor,
            summary_uuid=summary_uuid,
        )
    return dc_replace(
        boundary,
        head_uuid=kept_segment[0].uuid,
        anchor_uuid=kept_segment[0].uuid,
        tail_uuid=kept_segment[-1].uuid,
        summary_uuid=summary_uuid,
    )


def _kept_tail(messages: list[Message], keep_budget: int) -> list[Message]:
    """Longest suffix of whole turns whose estimate fits the keep budget.

    Falls back to a message-level suffix when even the newest turn is over
    budget, and never keeps the entire history (compaction must free
    something).
    """
    turns = split_turns(messages)
    kept_turns: list[list[Message]] = []
    total = 0
    for turn in reversed(turns):
        cost = sum(char_estimate(m) for m in turn)
        if kept_turns and total + cost > keep_budget:
            break
        if not kept_turns and cost > keep_budget:
            tail: list[Message] = []
            t = 0
            for m in reversed(turn):
                if tail and t + char_estimate(m) > keep_budget:
                    break
                tail.insert(0, m)
                t += char_estimate(m)
            if len(tail) == len(messages) and len(messages) > 1:
                tail = tail[1:]
            return tail
        kept_turns.insert(0, turn)
        total += cost
    kept = [m for turn in kept_turns for m in turn]
    if len(kept) == len(messages):
        if len(turns) > 1:
            kept = kept[len(turns[0]) :]
        elif len(messages) > 1:
            kept = kept[1:]
    return kept


def auto_compact(
    messages: list[Message],
    summarizer: Callable[[list[Message], str], list[Message] | None],
    cfg: CompactionConfig,
    session_id: str = "",
    registry: HookRegistry | None = None,
    attachments: Sequence[Message] = (),
) -> tuple[list[Message], list[TranscriptEvent], CompactionBoundary | None, list[str]]:
    """Summarize old history behind a boundary marker.

    Output order is fixed: boundary marker, summary messages, kept tail,
    attachments, hook-result messages. Summarizer failure leaves the
    conversation untouched.
    """
    notifications: list[str] = []
    registry = registry or HookRegistry()
    pre = fire(
        HookEvent.PRE_COMPACT,
        {"sessionId": session_id, "messageCount": len(messages)},
        registry,
    )
    notifications.extend(pre.notifications)
    compact_prompt = COMPACT_PROMPT
    if pre.additional_context:
        compact_prompt = f"{COMPACT_PROMPT}\n{pre.additional_context}"
    keep_budget = int(cfg.window_tokens * cfg.keep_fraction)
    kept = _kept_tail(messages, keep_budget)
    to_summarize = messages[: len(messages) - len(kept)]
    if not to_summarize:
        return messages, [], None, notifications
    try:
        summary_messages = summarizer(to_summarize, compact_prompt)
    except Exception as exc:
        notifications.append(f"compaction summarizer failed: {exc}")
        summary_messages = None
    if not summary_messages:
        if summary_messages is not None:
            notifications.append("compaction summarizer returned nothing")
        return messages, [], None, notifications
    boundary_uuid = new_uuid()
    timestamp = now_rfc3339()
    first_summary_uuid = summary_messages[0].uuid
    boundary = annotate_boundary(
        CompactionBoundary(
            uuid=boundary_uuid,
            kind="auto_compact",
            head_uuid="",
            anchor_uuid="",
            tail_uuid="",
            tokens_freed=0,
        ),
        kept,
        first_summary_uuid,
    )
    marker = boundary_marker_message(boundary, timestamp)
    chained_summaries: list[Message] = []
    prev_uuid = boundary_uuid
    for sm in summary_messages:
        chained = sm.with_parent(prev_uuid)
        chained_summaries.append(chained)
        prev_uuid = chained.uuid
    if kept:
        kept = [kept[0].with_parent(chained_summaries[-1].uuid), *kept[1:]]
    freed = max(
        sum(char_estimate(m) for m in to_summarize)
        - char_estimate(marker)
        - sum(char_estimate(m) for m in chained_summaries),
        0,
    )
    boundary = dc_replace(boundary, tokens_freed=freed)
    post = fire(
        HookEvent.POST_COMPACT,
        {"sessionId": session_id, "keptCount": len(kept), "tokensFreed": freed},
        registry,
    )
    notifications.extend(post.notifications)
    hook_result_messages: list[Message] = []
    if post.additional_context:
        hook_result_messages.append(
            Message.create(
                role=Role.ATTACHMENT,
                blocks=[text_block(post.additional_context)],
                parent_uuid=None,
            )
        )
    result = [marker, *chained_summaries, *kept, *list(attachments), *hook_result_messages]
    events: list[TranscriptEvent] = [boundary.to_event(session_id, timestamp)]
    for sm in chained_summaries:
        events.append(TranscriptEvent.for_message(session_id, sm))
    for am in [*list(attachments), *hook_result_messages]:
        events.append(TranscriptEvent.for_message(session_id, am))
    return result, events, boundary, notifications


def run_shapers(
    messages: list[Message],
    store: Sequence[CollapseEntry],
    cfg: CompactionConfig,
    caps: dict[str, float] | None = None,
    summarizer: Callable[[list[Message], str], list[Message] | None] | None = None,
    session_id: str = "",
    registry: HookRegistry | None = None,
    pending_snip_freed: int = 0,
) -> ShaperOutcome:
    """The five-stage pre-model pipeline, in documented order."""
    outcome = ShaperOutcome(messages=list(messages), view=[], snip_tokens_freed=pending_snip_freed)

    out, events = apply_tool_result_budget(
        outcome.messages, caps or {}, cfg.budget_chars, session_id
    )
    outcome.messages = out
    outcome.events.extend(events)
    outcome.trace.append("budget")

    if cfg.snip_enabled:
        out, freed, boundary = snip(outcome.messages, cfg.snip_retention_turns, session_id)
        outcome.messages = out
        if boundary is not None:
            # Stamp the event with the marker's timestamp so a replayed
            # marker is byte-identical to the live one.
            outcome.events.append(boundary.to_event(session_id, out[0].timestamp))
            outcome.snip_tokens_freed += freed
        outcome.trace.append("snip")

    if cfg.microcompact_enabled:
        out, events, boundary = microcompact(
            outcome.messages, cfg.microcompact_age_turns, session_id
        )
        outcome.messages = out
        outcome.events.extend(events)
        if boundary is not None:
            outcome.events.append(boundary.to_event(session_id))
        outcome.trace.append("microcompact")

    view = outcome.messages
    if cfg.collapse_enabled:
        view, notes = apply_collapses(outcome.messages, store)
        outcome.notifications.extend(notes)
        outcome.trace.append("collapse")

    if cfg.autocompact_enabled and summarizer is not None:
        estimate = estimate_context_tokens(view, outcome.snip_tokens_freed)
        if estimate > cfg.autocompact_threshold * cfg.window_tokens:
            compacted, events, boundary, notes = auto_compact(
                outcome.messages, summarizer, cfg, session_id, registry
            )
            outcome.notifications.extend(notes)
            if boundary is not None:
                outcome.messages = compacted
                outcome.events.extend(events)
                outcome.compacted = True
                outcome.boundary = boundary
                # The last recorded usage counted the summarized-away content,
                # so its freed size joins the estimator credit until a fresh
                # usage re-anchors the count.
                outcome.snip_tokens_freed += boundary.tokens_freed
                if cfg.collapse_enabled:
                    view, notes = apply_collapses(outcome.messages, store)
                    outcome.notifications.extend(notes)
                else:
                    view = outcome.messages
        outcome.trace.append("auto_compact")

    outcome.view = view
    return outcome
