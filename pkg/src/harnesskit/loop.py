"""Reactive turn engine.

One submitted prompt drives a loop of model calls and tool dispatches
until a stop condition holds.  The engine is a generator: consumers
iterate LoopEvents and may block the generator inside their own
callbacks (permission prompts), which keeps event order deterministic
without extra synchronization.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Optional

from .backend import (
    Backend,
    BackendEvent,
    BackendEventKind,
    BackendUnavailable,
    ModelCall,
    collect_response,
    normalize_for_model,
)
from .compaction import run_shapers
from .hooks import HookEvent, HookRegistry, MergedHookOutcome, fire
from .model import (
    Message,
    RecoveryCounters,
    Role,
    estimate_context_tokens,
    new_uuid,
    text_block,
    tool_result_block,
)
from .permissions import (
    BubbleEscalation,
    Decision,
    DecisionLayer,
    PermissionRule,
    RuleEffect,
    RuleSource,
    Specifier,
    SpecifierKind,
    Verdict,
    evaluate,
)
from .tools.executor import execute_streaming
from .tools.spec import ToolOutcome, ToolRequest

DEFAULT_SYSTEM_PROMPT = (
    "You are a coding agent operating on a local workspace. Use the "
    "available tools to inspect and modify files, run commands, and "
    "answer the user. Be direct and act on the task at hand."
)

DEFAULT_OUTPUT_TOKENS = 8192
MAX_OUTPUT_ESCALATIONS = 3


class LoopEventKind(str, Enum):
    STREAM_DELTA = "stream_delta"
    REQUEST_START = "request_start"
    MESSAGE = "message"
    TOMBSTONE = "tombstone"
    TOOL_USE_SUMMARY = "tool_use_summary"
    PERMISSION_REQUEST = "permission_request"
    NOTIFICATION = "notification"
    DONE = "done"


class StopReason(str, Enum):
    TEXT_ONLY = "text_only"
    MAX_TURNS = "max_turns"
    PROMPT_TOO_LONG = "prompt_too_long"
    HOOK_STOPPED = "hook_stopped"
    ABORTED = "aborted"


@dataclass(frozen=True)
class LoopEvent:
    kind: LoopEventKind
    payload: dict


@dataclass(frozen=True)
class PermissionAsk:
    """What a consumer needs to resolve an ask verdict."""

    request: ToolRequest
    reason: str
    layer: str
    session_id: str
    from_subagent: bool = False


# Resolver answers: "allow", "deny", "always_allow".
AskResolver = Callable[[PermissionAsk], str]


@dataclass
class TurnDeps:
    backend: Backend
    model_id: str = "scripted"
    fallback_model: Optional[str] = None
    max_turns: Optional[int] = None
    base_system_prompt: str = DEFAULT_SYSTEM_PROMPT
    append_system_prompt: Optional[str] = None
    max_output_tokens: int = DEFAULT_OUTPUT_TOKENS
    ask_resolver: Optional[AskResolver] = None
    abort: threading.Event = field(default_factory=threading.Event)
    agent_runner_factory: Optional[Callable] = None
    thinking: Optional[dict] = None


class RecoveryKind(str, Enum):
    RETRY_LARGER_OUTPUT_CAP = "retry_with_larger_output_cap"
    REACTIVE_COMPACT_THEN_RETRY = "reactive_compact_then_retry"
    SWITCH_FALLBACK_MODEL = "switch_fallback_model"
    FAIL = "fail"


@dataclass(frozen=True)
class RecoveryAction:
    kind: RecoveryKind
    detail: str = ""


def recover(
    error_kind: str,
    counters: RecoveryCounters,
    fallback_available: bool,
) -> RecoveryAction:
    """Pick the recovery step for a failed model call.

    Total over the three error kinds; anything else fails outright.
    """
    if error_kind == "output_cap":
        if counters.output_token_escalations < MAX_OUTPUT_ESCALATIONS:
            return RecoveryAction(RecoveryKind.RETRY_LARGER_OUTPUT_CAP)
        return RecoveryAction(RecoveryKind.FAIL, "output cap retries exhausted")
    if error_kind == "prompt_too_long":
        if not counters.reactive_compact_attempted:
            return RecoveryAction(RecoveryKind.REACTIVE_COMPACT_THEN_RETRY)
        return RecoveryAction(RecoveryKind.FAIL, "prompt_too_long")
    if error_kind == "unavailable":
        if fallback_available and not counters.fallback_switched:
            return RecoveryAction(RecoveryKind.SWITCH_FALLBACK_MODEL)
        return RecoveryAction(RecoveryKind.FAIL, "backend unavailable")
    return RecoveryAction(RecoveryKind.FAIL, f"unrecoverable error: {error_kind}")


def check_stop(
    *,
    aborted: bool,
    hook_stopped: bool,
    prompt_too_long: bool,
    turns: int,
    max_turns: Optional[int],
    has_tool_use: bool,
) -> Optional[StopReason]:
    """Stop-condition precedence; None means keep looping."""
    if aborted:
        return StopReason.ABORTED
    if hook_stopped:
        return StopReason.HOOK_STOPPED
    if prompt_too_long:
        return StopReason.PROMPT_TOO_LONG
    if max_turns is not None and turns >= max_turns:
        return StopReason.MAX_TURNS
    if not has_tool_use:
        return StopReason.TEXT_ONLY
    return None


def _note(text: str, **extra) -> LoopEvent:
    return LoopEvent(LoopEventKind.NOTIFICATION, {"message": text, **extra})


def _tool_payload(req: ToolRequest) -> dict:
    return {
        "toolName": req.tool_name,
        "toolUseId": req.tool_use_id,
        "toolInput": dict(req.input),
    }


@dataclass
class _GateResult:
    request: ToolRequest
    decision: Decision
    merged: MergedHookOutcome


def _evaluate_request(rt, req: ToolRequest) -> Decision:
    try:
        return evaluate(
            rt.effective_rules(),
            rt.handle.mode,
            req,
            str(rt.handle.project_dir),
            rt.classifier,
        )
    except BubbleEscalation:
        return Decision(
            Verdict.ASK,
            reason="escalated to parent session",
            layer=DecisionLayer.MODE,
        )


def _denial_outcome(req: ToolRequest, reason: str, retry: Optional[str]) -> ToolOutcome:
    content = f"permission denied: {reason}"
    if retry:
        content += f"\nsuggested retry: {retry}"
    return ToolOutcome(for_tool_use_id=req.tool_use_id, content=content, is_error=True)


def _always_allow_rule(req: ToolRequest) -> PermissionRule:
    if req.tool_name == "Bash":
        command = str(req.input.get("command", "")).strip()
        spec = Specifier(SpecifierKind.EXACT, command) if command else None
    else:
        spec = None
    return PermissionRule(
        effect=RuleEffect.ALLOW,
        tool=req.tool_name,
        specifier=spec,
        source=RuleSource.SESSION,
        bypass_immune=False,
    )


def _stream_model_call(backend: Backend, call: ModelCall):
    """Yield stream_delta events while buffering backend events.

    Generator return value is the buffered event list.
    """
    buffered: list[BackendEvent] = []
    for ev in backend.call(call):
        buffered.append(ev)
        if ev.kind is BackendEventKind.DELTA_TEXT:
            yield LoopEvent(LoopEventKind.STREAM_DELTA, {"text": str(ev.payload)})
    return buffered


def run_turn(rt, prompt: str, deps: TurnDeps) -> Iterator[LoopEvent]:
    """Run one full prompt-to-stop turn against the session runtime.

    Exactly one done event is emitted per invocation, always last.
    """
    registry: HookRegistry = rt.hooks
    state = rt.handle.state
    state.recovery_counters = RecoveryCounters()
    rt.clear_turn_rules()

    current_model = deps.model_id
    output_cap = deps.max_output_tokens
    turns = 0
    hook_stopped = False

    def finish(reason: StopReason) -> Iterator[LoopEvent]:
        fire(
            HookEvent.STOP,
            {"reason": reason.value, "sessionId": rt.handle.session_id},
            registry,
        )
        rt.clear_turn_rules()
        yield LoopEvent(LoopEventKind.DONE, {"reason": reason.value})

    # Prompt submission hooks run before the user message is recorded.
    submit = fire(HookEvent.USER_PROMPT_SUBMIT, {"prompt": prompt}, registry)
    for note in submit.notifications:
        yield _note(note)
    if not submit.continue_:
        yield from finish(StopReason.HOOK_STOPPED)
        return

    last_uuid = state.messages[-1].uuid if state.messages else None
    user_msg = Message.create(
        role=Role.USER,
        blocks=[text_block(prompt)],
        parent_uuid=last_uuid,
        is_sidechain=rt.is_sidechain,
    )
    rt.append_message(user_msg)
    yield LoopEvent(LoopEventKind.MESSAGE, {"message": user_msg})

    if submit.additional_context:
        ctx_msg = Message.create(
            role=Role.ATTACHMENT,
            blocks=[text_block(submit.additional_context)],
            parent_uuid=user_msg.uuid,
            is_sidechain=rt.is_sidechain,
        )
        rt.append_message(ctx_msg)
        yield LoopEvent(LoopEventKind.MESSAGE, {"message": ctx_msg})

    # Results from background subagents land at the next turn boundary.
    for attachment in rt.drain_pending_attachments():
        rt.append_message(attachment)
        yield LoopEvent(LoopEventKind.MESSAGE, {"message": attachment})

    while True:
        if deps.abort.is_set():
            yield from finish(StopReason.ABORTED)
            return

        # Context shaping before every model call.
        outcome = run_shapers(
            rt.messages_after_compact_boundary(),
            rt.collapse_store,
            rt.compaction_cfg,
            rt.result_caps(),
            rt.summarizer,
            rt.handle.session_id,
            registry=registry,
            pending_snip_freed=state.compaction.snip_tokens_freed,
        )
        for ev in outcome.events:
            rt.append_event(ev)
        rt.replace_messages(outcome.messages)
        state.compaction.snip_tokens_freed = outcome.snip_tokens_freed
        state.compaction.shaper_trace = outcome.trace
        if outcome.compacted:
            rt.assembler.invalidate()
        for note in outcome.notifications:
            yield _note(note)
        estimate = estimate_context_tokens(
            outcome.view, outcome.snip_tokens_freed
        )
        yield _note(
            "context stats",
            kind="context_stats",
            estimate=estimate,
            window=rt.compaction_cfg.window_tokens,
            trace=list(outcome.trace),
        )

        pool = rt.build_pool()
        system_prompt = deps.base_system_prompt
        if deps.append_system_prompt:
            system_prompt = system_prompt + "\n" + deps.append_system_prompt
        bundle = rt.assembler.assemble(system_prompt)
        call_messages = list(bundle.conversation)
        call_messages.append(bundle.user_context_message)
        call_messages.extend(normalize_for_model(outcome.view))
        call = ModelCall(
            system_prompt=bundle.system_prompt,
            messages=call_messages,
            tools=pool,
            model_id=current_model,
            max_output_tokens=output_cap,
            thinking=deps.thinking,
            abort=deps.abort,
        )
        yield LoopEvent(
            LoopEventKind.REQUEST_START,
            {"modelId": current_model, "maxOutputTokens": output_cap},
        )

        try:
            buffered = yield from _stream_model_call(deps.backend, call)
        except BackendUnavailable as exc:
            action = recover(
                "unavailable",
                state.recovery_counters,
                deps.fallback_model is not None,
            )
            if action.kind is RecoveryKind.SWITCH_FALLBACK_MODEL:
                state.recovery_counters.fallback_switched = True
                current_model = deps.fallback_model
                yield _note(
                    f"backend unavailable ({exc}); switching to fallback "
                    f"model {current_model}"
                )
                continue
            yield _note(f"backend unavailable: {exc}")
            yield from finish(StopReason.ABORTED)
            return

        parent_uuid = (
            state.messages[-1].uuid if state.messages else user_msg.uuid
        )
        response = collect_response(
            iter(buffered),
            parent_uuid=parent_uuid,
            is_sidechain=rt.is_sidechain,
            abort=deps.abort,
        )

        if response.error == "aborted":
            yield LoopEvent(
                LoopEventKind.TOMBSTONE,
                {"reason": "model call aborted mid-stream"},
            )
            yield from finish(StopReason.ABORTED)
            return
        if response.error == "output_cap":
            action = recover(
                "output_cap", state.recovery_counters, deps.fallback_model is not None
            )
            if action.kind is RecoveryKind.RETRY_LARGER_OUTPUT_CAP:
                state.recovery_counters.output_token_escalations += 1
                output_cap *= 2
                yield _note(
                    "output token cap hit; retrying with cap "
                    f"{output_cap} (escalation "
                    f"{state.recovery_counters.output_token_escalations})"
                )
                continue
            yield _note(f"model call failed: {action.detail}")
            yield from finish(StopReason.ABORTED)
            return
        if response.error == "prompt_too_long":
            action = recover(
                "prompt_too_long",
                state.recovery_counters,
                deps.fallback_model is not None,
            )
            if action.kind is RecoveryKind.REACTIVE_COMPACT_THEN_RETRY:
                state.recovery_counters.reactive_compact_attempted = True
                compacted = rt.reactive_compact(registry)
                if compacted:
                    rt.assembler.invalidate()
                    yield _note("prompt too long; compacted conversation and retrying")
                    continue
                yield _note("prompt too long and compaction freed nothing")
            yield from finish(StopReason.PROMPT_TOO_LONG)
            return

        assistant = response.message
        rt.append_message(assistant)
        yield LoopEvent(LoopEventKind.MESSAGE, {"message": assistant})
        turns += 1

        tool_uses = assistant.tool_uses()
        if not tool_uses:
            reason = check_stop(
                aborted=deps.abort.is_set(),
                hook_stopped=hook_stopped,
                prompt_too_long=False,
                turns=turns,
                max_turns=deps.max_turns,
                has_tool_use=False,
            )
            yield from finish(reason or StopReason.TEXT_ONLY)
            return

        requests = [
            ToolRequest(
                tool_use_id=block.tool_use_id or new_uuid(),
                tool_name=block.tool_name or "",
                input=dict(block.input or {}),
            )
            for block in tool_uses
        ]

        pool_by_name = {spec.name: spec for spec in pool}
        outcomes: dict[str, ToolOutcome] = {}
        approved: list[ToolRequest] = []
        gate_results: dict[str, _GateResult] = {}

        for req in requests:
            # Hooks first: they may rewrite input or force a verdict.
            merged = fire(HookEvent.PRE_TOOL_USE, _tool_payload(req), registry)
            for note in merged.notifications:
                yield _note(note)
            if not merged.continue_:
                hook_stopped = True
            if merged.updated_input is not None:
                rt.record_updated_input(req.tool_use_id, req.input, merged.updated_input)
                req = replace(req, input=dict(merged.updated_input))

            if merged.permission_decision == "deny":
                decision = Decision(
                    Verdict.DENY,
                    reason=merged.permission_decision_reason or "denied by hook",
                    layer=DecisionLayer.HOOK,
                )
            else:
                decision = _evaluate_request(rt, req)
                if (
                    decision.verdict is Verdict.ALLOW
                    and merged.permission_decision == "ask"
                ):
                    decision = Decision(
                        Verdict.ASK,
                        reason=merged.permission_decision_reason
                        or "hook requested confirmation",
                        layer=DecisionLayer.HOOK,
                    )

            if decision.verdict is Verdict.ASK:
                ask_payload = _tool_payload(req)
                ask_payload["reason"] = decision.reason
                hook_answer = fire(
                    HookEvent.PERMISSION_REQUEST, ask_payload, registry
                )
                for note in hook_answer.notifications:
                    yield _note(note)
                if hook_answer.decision == "allow":
                    decision = Decision(
                        Verdict.ALLOW,
                        reason="allowed by permission hook",
                        layer=DecisionLayer.HOOK,
                    )
                elif hook_answer.decision == "deny":
                    decision = Decision(
                        Verdict.DENY,
                        reason="denied by permission hook",
                        layer=DecisionLayer.HOOK,
                    )
                else:
                    ask = PermissionAsk(
                        request=req,
                        reason=decision.reason,
                        layer=decision.layer.value if decision.layer else "",
                        session_id=rt.handle.session_id,
                        from_subagent=rt.is_sidechain,
                    )
                    yield LoopEvent(
                        LoopEventKind.PERMISSION_REQUEST,
                        {
                            **_tool_payload(req),
                            "reason": ask.reason,
                            "layer": ask.layer,
                        },
                    )
                    answer = (
                        deps.ask_resolver(ask) if deps.ask_resolver else "deny"
                    )
                    if answer == "always_allow":
                        rt.add_session_rule(_always_allow_rule(req))
                        answer = "allow"
                    if answer == "allow":
                        decision = Decision(
                            Verdict.ALLOW,
                            reason="approved interactively",
                            layer=decision.layer,
                        )
                    else:
                        decision = Decision(
                            Verdict.DENY,
                            reason="denied interactively",
                            layer=decision.layer,
                        )

            gate_results[req.tool_use_id] = _GateResult(req, decision, merged)
            if decision.verdict is Verdict.DENY:
                denied = fire(
                    HookEvent.PERMISSION_DENIED,
                    {**_tool_payload(req), "reason": decision.reason},
                    registry,
                )
                for note in denied.notifications:
                    yield _note(note)
                outcomes[req.tool_use_id] = _denial_outcome(
                    req, decision.reason or "denied", denied.retry
                )
            else:
                approved.append(req)

        # Execution: approved requests run in request order with the
        # concurrency and sibling-abort semantics of the executor.
        ctx = rt.tool_context(deps)
        if approved:
            for out in execute_streaming(approved, pool, ctx):
                req = next(r for r in approved if r.tool_use_id == out.for_tool_use_id)
                spec = pool_by_name.get(req.tool_name)
                is_mcp = spec is not None and spec.name.startswith("mcp__")
                if is_mcp:
                    # MCP results are held back until post hooks ran, so
                    # hook rewrites land in the recorded result.
                    post = fire(
                        HookEvent.POST_TOOL_USE,
                        {
                            **_tool_payload(req),
                            "toolOutput": out.content,
                            "isError": out.is_error,
                        },
                        registry,
                    )
                    if post.updated_mcp_tool_output is not None:
                        out = replace(out, content=post.updated_mcp_tool_output)
                    outcomes[out.for_tool_use_id] = out
                    yield LoopEvent(
                        LoopEventKind.TOOL_USE_SUMMARY,
                        {
                            "toolUseId": out.for_tool_use_id,
                            "toolName": req.tool_name,
                            "isError": out.is_error,
                            "contentPreview": out.content[:200],
                        },
                    )
                else:
                    outcomes[out.for_tool_use_id] = out
                    yield LoopEvent(
                        LoopEventKind.TOOL_USE_SUMMARY,
                        {
                            "toolUseId": out.for_tool_use_id,
                            "toolName": req.tool_name,
                            "isError": out.is_error,
                            "contentPreview": out.content[:200],
                        },
                    )
                    post = fire(
                        HookEvent.POST_TOOL_USE,
                        {
                            **_tool_payload(req),
                            "toolOutput": out.content,
                            "isError": out.is_error,
                        },
                        registry,
                    )
                for note in post.notifications:
                    yield _note(note)
                if not post.continue_:
                    hook_stopped = True
                if post.additional_context:
                    rt.queue_attachment_text(post.additional_context)
                if out.is_error:
                    failure = fire(
                        HookEvent.POST_TOOL_USE_FAILURE,
                        {
                            **_tool_payload(req),
                            "toolOutput": out.content,
                        },
                        registry,
                    )
                    for note in failure.notifications:
                        yield _note(note)
                    if failure.additional_context:
                        rt.queue_attachment_text(failure.additional_context)

        result_blocks = []
        for req in requests:
            out = outcomes.get(req.tool_use_id)
            if out is None:
                out = ToolOutcome(
                    for_tool_use_id=req.tool_use_id,
                    content="cancelled: turn aborted",
                    is_error=True,
                )
            result_blocks.append(out)

        result_msg = Message.create(
            role=Role.USER,
            blocks=[
                tool_result_block(o.for_tool_use_id, o.content, o.is_error)
                for o in result_blocks
            ],
            parent_uuid=assistant.uuid,
            is_sidechain=rt.is_sidechain,
        )
        rt.append_message(result_msg)
        yield LoopEvent(LoopEventKind.MESSAGE, {"message": result_msg})

        # Attachments: tool-provided text, hook context, rule activation.
        attachment_texts: list[str] = []
        for out in result_blocks:
            attachment_texts.extend(out.attachments)
        for req in approved:
            if req.tool_name == "FileRead":
                path = str(req.input.get("file_path", ""))
                if path:
                    for mf in rt.assembler.lazy_load_rules(path):
                        attachment_texts.append(
                            f"# Instructions activated from {mf.path}\n{mf.content}"
                        )
        attachment_texts.extend(rt.drain_attachment_texts())
        for rule in rt.drain_skill_rules():
            rt.add_turn_rule(rule)
        prev_uuid = result_msg.uuid
        for text in attachment_texts:
            att = Message.create(
                role=Role.ATTACHMENT,
                blocks=[text_block(text)],
                parent_uuid=prev_uuid,
                is_sidechain=rt.is_sidechain,
            )
            prev_uuid = att.uuid
            rt.append_message(att)
            yield LoopEvent(LoopEventKind.MESSAGE, {"message": att})

        for update in rt.drain_subagent_updates():
            yield _note("subagent update", kind="subagent_update", **update)

        if deps.abort.is_set():
            yield LoopEvent(
                LoopEventKind.TOMBSTONE,
                {"reason": "turn aborted during tool execution"},
            )

        reason = check_stop(
            aborted=deps.abort.is_set(),
            hook_stopped=hook_stopped,
            prompt_too_long=False,
            turns=turns,
            max_turns=deps.max_turns,
            has_tool_use=True,
        )
        if reason is not None:
            yield from finish(reason)
            return
