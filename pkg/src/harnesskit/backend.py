"""Model provider abstraction and the deterministic scripted backend.

Every backend speaks the same event grammar per call: zero or more content
events, then usage, then end — or a terminal error event. Transport-level
failures raise instead, so callers can distinguish "the model answered
badly" from "no model answered".
"""

from __future__ import annotations

import json
import math
import os
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Protocol, Sequence

from .model import (
    ContentBlock,
    Message,
    Role,
    TokenUsage,
    char_estimate,
    text_block,
    tool_use_block,
)
from .tools.spec import ToolSpec

__all__ = [
    "BackendEventKind",
    "BackendEvent",
    "ModelCall",
    "Backend",
    "BackendResponse",
    "BackendError",
    "BackendUnavailable",
    "ScriptExhausted",
    "ScriptedBackend",
    "HttpBackend",
    "collect_response",
    "normalize_for_model",
    "summarize",
]


class BackendEventKind(str, Enum):
    DELTA_TEXT = "delta_text"
    BLOCK_START = "block_start"
    BLOCK_STOP = "block_stop"
    USAGE = "usage"
    ERROR_OUTPUT_CAP = "error_output_cap"
    ERROR_PROMPT_TOO_LONG = "error_prompt_too_long"
    END = "end"


@dataclass(frozen=True)
class BackendEvent:
    kind: BackendEventKind
    payload: Any = None


@dataclass
class ModelCall:
    system_prompt: str
    messages: list[Message]
    tools: list[ToolSpec]
    model_id: str
    max_output_tokens: int
    thinking: dict[str, Any] | None = None
    abort: Any = None


class Backend(Protocol):
    def call(self, call: ModelCall) -> Iterator[BackendEvent]: ...


class BackendError(Exception):
    pass


class BackendUnavailable(BackendError):
    """Transport-level failure; retriable, possibly on a fallback model."""


class ScriptExhausted(BackendError):
    """The scripted backend received more calls than its script covers."""


@dataclass
class BackendResponse:
    message: Message | None
    error: str | None = None  # output_cap | prompt_too_long
    usage: TokenUsage | None = None


def collect_response(
    events: Iterable[BackendEvent],
    parent_uuid: str | None,
    is_sidechain: bool = False,
    abort: Any = None,
) -> BackendResponse:
    """Assemble one assistant message from a backend event stream."""
    blocks: list[ContentBlock] = []
    open_block: dict[str, Any] | None = None
    text_parts: list[str] = []
    usage: TokenUsage | None = None
    for event in events:
        if abort is not None and abort.is_set():
            return BackendResponse(message=None, error="aborted")
        if event.kind is BackendEventKind.BLOCK_START:
            open_block = dict(event.payload or {"type": "text"})
            text_parts = []
        elif event.kind is BackendEventKind.DELTA_TEXT:
            text_parts.append(str(event.payload))
        elif event.kind is BackendEventKind.BLOCK_STOP:
            if open_block is None:
                open_block = {"type": "text"}
            btype = open_block.get("type", "text")
            if btype in ("text", "thinking"):
                blocks.append(
                    ContentBlock(kind=btype, text="".join(text_parts))
                )
            elif btype == "tool_use":
                blocks.append(
                    tool_use_block(
                        open_block.get("id", ""),
                        open_block.get("name", ""),
                        open_block.get("input", {}),
                    )
                )
            open_block = None
            text_parts = []
        elif event.kind is BackendEventKind.USAGE:
            usage = TokenUsage(
                input_tokens=int(event.payload["input_tokens"]),
                output_tokens=int(event.payload["output_tokens"]),
            )
        elif event.kind is BackendEventKind.ERROR_OUTPUT_CAP:
            return BackendResponse(message=None, error="output_cap")
        elif event.kind is BackendEventKind.ERROR_PROMPT_TOO_LONG:
            return BackendResponse(message=None, error="prompt_too_long")
        elif event.kind is BackendEventKind.END:
            break
    message = Message.create(
        role=Role.ASSISTANT,
        blocks=blocks,
        parent_uuid=parent_uuid,
        usage=usage,
        is_sidechain=is_sidechain,
    )
    return BackendResponse(message=message, usage=usage)


def normalize_for_model(messages: Sequence[Message]) -> list[Message]:
    """Wire framing: everything that is not assistant output is user input.

    Attachment and marker messages become user messages; assistant messages
    pass through. Identity fields are preserved so transcripts stay stable.
    """
    out: list[Message] = []
    for m in messages:
        if m.role in (Role.USER, Role.ASSISTANT):
            out.append(m)
        else:
            out.append(
                Message(
                    uuid=m.uuid,
                    parent_uuid=m.parent_uuid,
                    role=Role.USER,
                    blocks=m.blocks,
                    timestamp=m.timestamp,
                    usage=m.usage,
                    is_sidechain=m.is_sidechain,
                )
            )
    return out


class ScriptedBackend:
    """Plays back a fixed script of responses; errors when over-consumed.

    Each step is a dict:
      {"text": "..."}                       one text block
      {"blocks": [{"type": ..., ...}]}      explicit blocks
      {"inject": "output_cap" | "prompt_too_long" | "unavailable",
       "inject_times": 1}                   error before the blocks play
      {"usage": {"input_tokens": n, "output_tokens": n}}  explicit usage

    Without explicit usage, input is the chars/4 estimate of the call's
    messages and output the chars/4 estimate of the step's text.
    """

    def __init__(self, script: Sequence[dict[str, Any]]) -> None:
        self._script = [dict(step) for step in script]
        self._cursor = 0
        self.calls: list[ModelCall] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    @property
    def steps_remaining(self) -> int:
        return len(self._script) - self._cursor

    def call(self, call: ModelCall) -> Iterator[BackendEvent]:
        self.calls.append(call)
        if self._cursor >= len(self._script):
            raise ScriptExhausted(
                f"script exhausted after {len(self._script)} steps"
            )
        step = self._script[self._cursor]
        inject = step.get("inject")
        if inject and step.get("inject_times", 1) > 0:
            step["inject_times"] = step.get("inject_times", 1) - 1
            if inject == "unavailable":
                self._cursor += 1 if step.get("consume_on_inject") else 0
                raise BackendUnavailable("scripted transport failure")
            kind = (
                BackendEventKind.ERROR_OUTPUT_CAP
                if inject == "output_cap"
                else BackendEventKind.ERROR_PROMPT_TOO_LONG
            )
            return iter([BackendEvent(kind)])
        self._cursor += 1
        return self._play(step, call)

    def _play(self, step: dict[str, Any], call: ModelCall) -> Iterator[BackendEvent]:
        blocks = step.get("blocks")
        if blocks is None:
            blocks = [{"type": "text", "text": step.get("text", "")}]
        total_text = ""
        auto_id = 0
        for raw in blocks:
            block = dict(raw)
            btype = block.get("type", "text")
            if btype in ("text", "thinking"):
                yield BackendEvent(BackendEventKind.BLOCK_START, {"type": btype})
                text = block.get("text", "")
                total_text += text
                if text:
                    yield BackendEvent(BackendEventKind.DELTA_TEXT, text)
                yield BackendEvent(BackendEventKind.BLOCK_STOP)
            elif btype == "tool_use":
                if not block.get("id"):
                    block["id"] = f"tu{len(self.calls)}_{auto_id}"
                    auto_id += 1
                yield BackendEvent(BackendEventKind.BLOCK_START, block)
                yield BackendEvent(BackendEventKind.BLOCK_STOP)
            else:
                raise ValueError(f"unknown scripted block type: {btype}")
        usage = step.get("usage")
        if usage is None:
            usage = {
                "input_tokens": sum(char_estimate(m) for m in call.messages),
                "output_tokens": math.ceil(len(total_text) / 4),
            }
        yield BackendEvent(BackendEventKind.USAGE, usage)
        yield BackendEvent(BackendEventKind.END)


class HttpBackend:
    """Minimal non-incremental adapter to a provider-neutral JSON endpoint.

    Reads HARNESS_API_URL and HARNESS_API_KEY from the environment. The
    response document carries {"content": [blocks], "usage": {...}} or an
    {"error": "output_cap" | "prompt_too_long"} marker.
    """

    def __init__(self, url: str | None = None, api_key: str | None = None) -> None:
        self.url = url or os.environ.get("HARNESS_API_URL", "")
        self.api_key = api_key or os.environ.get("HARNESS_API_KEY", "")
        if not self.url:
            raise BackendUnavailable("HARNESS_API_URL not configured")

    def call(self, call: ModelCall) -> Iterator[BackendEvent]:
        body = {
            "model": call.model_id,
            "system": call.system_prompt,
            "max_output_tokens": call.max_output_tokens,
            "messages": [
                {
                    "role": m.role.value,
                    "content": [b.to_wire() for b in m.blocks],
                }
                for m in normalize_for_model(call.messages)
            ],
            "tools": [
                {
                    "name": t.name,
                    "description": t.description,
                    "input_schema": t.input_schema,
                }
                for t in call.tools
            ],
        }
        request = urllib.request.Request(
            self.url,
            data=json.dumps(body).encode("utf-8"),
            headers={
                "content-type": "application/json",
                "authorization": f"Bearer {self.api_key}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=120) as resp:
                document = json.loads(resp.read().decode("utf-8"))
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc
        error = document.get("error")
        if error == "output_cap":
            yield BackendEvent(BackendEventKind.ERROR_OUTPUT_CAP)
            return
        if error == "prompt_too_long":
            yield BackendEvent(BackendEventKind.ERROR_PROMPT_TOO_LONG)
            return
        for block in document.get("content", []):
            btype = block.get("type", "text")
            if btype in ("text", "thinking"):
                yield BackendEvent(BackendEventKind.BLOCK_START, {"type": btype})
                if block.get("text"):
                    yield BackendEvent(BackendEventKind.DELTA_TEXT, block["text"])
                yield BackendEvent(BackendEventKind.BLOCK_STOP)
            elif btype == "tool_use":
                yield BackendEvent(BackendEventKind.BLOCK_START, block)
                yield BackendEvent(BackendEventKind.BLOCK_STOP)
        usage = document.get("usage") or {"input_tokens": 0, "output_tokens": 0}
        yield BackendEvent(BackendEventKind.USAGE, usage)
        yield BackendEvent(BackendEventKind.END)


def summarize(
    messages: Sequence[Message],
    compact_prompt: str,
    backend: Backend,
    model_id: str = "summarizer",
) -> list[Message] | None:
    """One backend call that turns old history into summary message(s)."""
    if not messages:
        return None
    call = ModelCall(
        system_prompt=compact_prompt,
        messages=normalize_for_model(messages),
        tools=[],
        model_id=model_id,
        max_output_tokens=8192,
    )
    try:
        response = collect_response(backend.call(call), parent_uuid=None)
    except BackendError:
        return None
    if response.error or response.message is None:
        return None
    summary_text = response.message.text()
    if not summary_text:
        return None
    return [Message.create(role=Role.USER, blocks=[text_block(summary_text)])]
