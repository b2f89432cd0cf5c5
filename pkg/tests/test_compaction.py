"""Five-shaper pipeline: budget, snip, microcompact, collapse, auto-compact."""
from __future__ import annotations

import math

from hypothesis import given, settings, strategies as st

from harnesskit.compaction import (
    AUTO_COMPACT_MARKER_TEXT,
    COMPACT_PROMPT,
    CollapseEntry,
    CompactionBoundary,
    CompactionConfig,
    SHAPER_ORDER,
    SNIP_MARKER_TEXT,
    annotate_boundary,
    apply_collapses,
    apply_tool_result_budget,
    auto_compact,
    boundary_marker_message,
    budget_reference,
    microcompact,
    microcompact_placeholder,
    run_shapers,
    snip,
    split_turns,
)
from harnesskit.hooks import HookEvent, HookRegistration, HookRegistry
from harnesskit.model import (
    Role,
    char_estimate,
    estimate_context_tokens,
    validate_chain,
)

from conftest import asst_msg, chain, result_msg, user_msg


def cb(event, fn):
    return HookRegistration(event=event, command_type="callback", spec=fn)


def simple_summarizer(messages, prompt):
    return [user_msg("summary of earlier work")]


def tool_turn(n, result_size=50, tool="Bash"):
    """One user turn with a tool call whose result has a known size."""
    tid = f"t{n}"
    return [
        user_msg(f"prompt {n}"),
        asst_msg(f"calling {n}", tool_uses=[(tid, tool, {"command": "ls"})]),
        result_msg([(tid, "r" * result_size)]),
        asst_msg(f"answer {n}"),
    ]


def history(turns):
    return chain(*[m for t in turns for m in t])


def text_with_estimate(target):
    """A user message whose char estimate is exactly target tokens."""
    for n in range(max(4 * target - 60, 1), 4 * target + 60):
        m = user_msg("x" * n)
        if char_estimate(m) == target:
            return m
    raise AssertionError(f"no text found for estimate {target}")


# --- split_turns ------------------------------------------------------------


def test_split_turns_groups_by_plain_user_message():
    msgs = history([tool_turn(1), tool_turn(2)])
    turns = split_turns(msgs)
    assert len(turns) == 2
    assert all(len(t) == 4 for t in turns)
    assert turns[0][0].text() == "prompt 1"


def test_split_turns_tool_results_do_not_open_turns():
    msgs = chain(
        user_msg("q"),
        asst_msg("a", tool_uses=[("t1", "Bash", {})]),
        result_msg([("t1", "out")]),
    )
    assert len(split_turns(msgs)) == 1


def test_split_turns_leading_non_user_message():
    msgs = chain(asst_msg("orphan"), user_msg("q"))
    turns = split_turns(msgs)
    assert [len(t) for t in turns] == [1, 1]


# --- budget -----------------------------------------------------------------


def test_budget_replaces_oversized_result_with_reference():
    msgs = history([tool_turn(1, result_size=300)])
    out, events = apply_tool_result_budget(msgs, {}, default_cap=100, session_id="s")
    block = out[2].tool_results()[0]
    assert block.content == budget_reference("t1", 300)
    assert len(events) == 1
    p = events[0].payload
    assert p["toolUseId"] == "t1"
    assert p["originalSizeChars"] == 300
    assert p["origin"] == "budget"
    assert p["reference"] == block.content
    # Everything else untouched, uuids preserved.
    assert [m.uuid for m in out] == [m.uuid for m in msgs]


def test_budget_respects_per_tool_caps():
    msgs = history([tool_turn(1, result_size=300, tool="Bash"),
                    tool_turn(2, result_size=300, tool="FileRead")])
    out, events = apply_tool_result_budget(
        msgs, {"Bash": 100, "FileRead": 1000}, default_cap=1000, session_id="s"
    )
    assert out[2].tool_results()[0].content == budget_reference("t1", 300)
    assert out[6].tool_results()[0].content == "r" * 300
    assert len(events) == 1


def test_budget_under_cap_and_infinite_cap_are_identity():
    msgs = history([tool_turn(1, result_size=50)])
    out, events = apply_tool_result_budget(msgs, {}, default_cap=100)
    assert out == msgs and events == []
    out, events = apply_tool_result_budget(msgs, {"Bash": math.inf}, default_cap=1)
    # Cap lookup is by the tool that produced the result, so inf wins here.
    assert out == msgs and events == []


def test_budget_is_idempotent():
    msgs = history([tool_turn(1, result_size=5000)])
    once, ev1 = apply_tool_result_budget(msgs, {}, default_cap=100)
    twice, ev2 = apply_tool_result_budget(once, {}, default_cap=100)
    assert twice == once
    assert len(ev1) == 1 and ev2 == []


# --- snip -------------------------------------------------------------------


def test_snip_identity_when_within_retention():
    msgs = history([tool_turn(i) for i in range(3)])
    out, freed, boundary = snip(msgs, retention=3)
    assert out == msgs and freed == 0 and boundary is None


def test_snip_drops_oldest_turns_and_leaves_marker():
    turns = [tool_turn(i, result_size=120) for i in range(5)]
    msgs = history(turns)
    out, freed, boundary = snip(msgs, retention=2)
    assert boundary is not None and boundary.kind == "snip"
    marker = out[0]
    assert marker.text() == SNIP_MARKER_TEXT
    assert marker.uuid == boundary.uuid
    # Kept head is re-parented onto the marker for a valid chain.
    assert out[1].parent_uuid == boundary.uuid
    assert validate_chain(out) == []
    kept_texts = [m.text() for m in out if m.role is Role.USER and m.text()]
    assert kept_texts == ["prompt 3", "prompt 4"]


def test_snip_freed_matches_recount_oracle():
    turns = [tool_turn(i, result_size=200) for i in range(4)]
    msgs = history(turns)
    out, freed, boundary = snip(msgs, retention=1)
    removed = msgs[: 3 * 4]
    marker_cost = char_estimate(out[0])
    assert freed == sum(char_estimate(m) for m in removed) - marker_cost
    assert boundary.tokens_freed == freed
    assert freed > 0


def test_snip_skips_unprofitable_trim():
    # Removed turns smaller than the marker itself: trimming would raise the
    # estimate, so nothing happens.
    msgs = chain(user_msg(""), user_msg("k"), user_msg("kk"))
    out, freed, boundary = snip(msgs, retention=2)
    assert out == msgs and freed == 0 and boundary is None


def test_snip_estimator_identity():
    msgs = history([tool_turn(i, result_size=150) for i in range(6)])
    before = estimate_context_tokens(msgs)
    out, freed, _ = snip(msgs, retention=2)
    assert estimate_context_tokens(out, freed) == before - freed


def test_snip_boundary_records_kept_span():
    msgs = history([tool_turn(i, result_size=150) for i in range(4)])
    out, _, boundary = snip(msgs, retention=2)
    kept = msgs[8:]
    assert boundary.head_uuid == kept[0].uuid
    assert boundary.anchor_uuid == kept[0].uuid
    assert boundary.tail_uuid == kept[-1].uuid


# --- microcompact -----------------------------------------------------------


def aged_history(n_old_results=1, age=3):
    """Tool results followed by `age` assistant messages."""
    msgs = []
    for i in range(n_old_results):
        msgs.extend(
            [
                user_msg(f"q{i}"),
                asst_msg("a", tool_uses=[(f"t{i}", "Bash", {})]),
                result_msg([(f"t{i}", "detailed output " * 10)]),
            ]
        )
    for i in range(age):
        msgs.append(asst_msg(f"later {i}"))
    return chain(*msgs)


def test_microcompact_replaces_old_results_only():
    msgs = aged_history(n_old_results=1, age=3)
    out, events, boundary = microcompact(msgs, age_threshold=2)
    block = out[2].tool_results()[0]
    assert block.content == microcompact_placeholder("t0")
    assert len(events) == 1
    assert events[0].payload["origin"] == "microcompact"
    fresh, events2, b2 = microcompact(msgs, age_threshold=5)
    assert fresh == msgs and events2 == [] and b2 is None


def test_microcompact_age_counted_in_assistant_turns():
    # Tool use born at assistant #1; two more assistants → age 2.
    msgs = aged_history(n_old_results=1, age=2)
    out, events, _ = microcompact(msgs, age_threshold=2)
    assert events == []
    out, events, _ = microcompact(msgs, age_threshold=1)
    assert len(events) == 1


def test_microcompact_is_idempotent():
    msgs = aged_history(n_old_results=2, age=4)
    once, ev1, _ = microcompact(msgs, age_threshold=1)
    twice, ev2, b2 = microcompact(once, age_threshold=1)
    assert twice == once and ev2 == [] and b2 is None
    assert len(ev1) == 2


def test_microcompact_skips_results_shorter_than_placeholder():
    msgs = chain(
        user_msg("q"),
        asst_msg("a", tool_uses=[("t0", "Bash", {})]),
        result_msg([("t0", "ok")]),
        asst_msg("x"),
        asst_msg("y"),
    )
    out, events, _ = microcompact(msgs, age_threshold=1)
    assert out == msgs and events == []


def test_microcompact_boundary_freed_is_quarter_of_chars():
    msgs = aged_history(n_old_results=2, age=4)
    originals = [len(m.tool_results()[0].content) for m in msgs if m.tool_results()]
    _, events, boundary = microcompact(msgs, age_threshold=1)
    assert boundary.kind == "microcompact"
    assert boundary.tokens_freed == sum(math.ceil(n / 4) for n in originals)


# --- collapse ---------------------------------------------------------------


def test_collapse_projects_range_to_summary():
    msgs = history([tool_turn(i) for i in range(3)])
    entry = CollapseEntry(msgs[0].uuid, msgs[3].uuid, "turn one condensed")
    view, notes = apply_collapses(msgs, [entry])
    assert notes == []
    assert view[0].text() == "turn one condensed"
    assert view[1].uuid == msgs[4].uuid
    assert view[1].parent_uuid == view[0].uuid
    assert len(view) == len(msgs) - 4 + 1
    assert validate_chain(view) == []


def test_collapse_leaves_history_untouched():
    msgs = history([tool_turn(i) for i in range(2)])
    snapshot = list(msgs)
    apply_collapses(msgs, [CollapseEntry(msgs[0].uuid, msgs[1].uuid, "s")])
    assert msgs == snapshot


def test_collapse_empty_store_is_identity():
    msgs = history([tool_turn(1)])
    view, notes = apply_collapses(msgs, [])
    assert view == msgs and notes == []


def test_collapse_projection_is_deterministic():
    msgs = history([tool_turn(i) for i in range(3)])
    entry = CollapseEntry(msgs[0].uuid, msgs[3].uuid, "s")
    first, _ = apply_collapses(msgs, [entry])
    second, _ = apply_collapses(msgs, [entry])
    assert first == second


def test_collapse_skips_stale_and_reversed_entries():
    msgs = history([tool_turn(1)])
    stale = CollapseEntry("gone-a", "gone-b", "s")
    reverse = CollapseEntry(msgs[2].uuid, msgs[0].uuid, "s")
    view, notes = apply_collapses(msgs, [stale, reverse])
    assert view == msgs
    assert len(notes) == 2
    assert all("skipped" in n for n in notes)


def test_collapse_skips_overlapping_ranges():
    msgs = history([tool_turn(i) for i in range(3)])
    first = CollapseEntry(msgs[0].uuid, msgs[5].uuid, "first")
    overlap = CollapseEntry(msgs[4].uuid, msgs[8].uuid, "second")
    view, notes = apply_collapses(msgs, [first, overlap])
    assert any("overlaps" in n for n in notes)
    assert view[0].text() == "first"


def test_collapse_multiple_disjoint_ranges():
    msgs = history([tool_turn(i) for i in range(4)])
    a = CollapseEntry(msgs[0].uuid, msgs[3].uuid, "first turn")
    b = CollapseEntry(msgs[8].uuid, msgs[11].uuid, "third turn")
    view, notes = apply_collapses(msgs, [b, a])
    assert notes == []
    texts = [m.text() for m in view if m.role is Role.USER and m.text()]
    assert "first turn" in texts and "third turn" in texts
    assert validate_chain(view) == []


# --- boundary annotation ------------------------------------------------------


def test_annotate_boundary_spans_kept_segment():
    msgs = chain(user_msg("a"), user_msg("b"), user_msg("c"))
    base = CompactionBoundary("u", "auto_compact", "", "", "", 0)
    b = annotate_boundary(base, msgs, "sum-1")
    assert (b.head_uuid, b.anchor_uuid, b.tail_uuid) == (
        msgs[0].uuid,
        msgs[0].uuid,
        msgs[2].uuid,
    )
    assert b.summary_uuid == "sum-1"
    single = annotate_boundary(base, msgs[:1], None)
    assert single.head_uuid == single.anchor_uuid == single.tail_uuid == msgs[0].uuid


def test_annotate_boundary_empty_segment_points_at_summary():
    base = CompactionBoundary("u", "auto_compact", "", "", "", 0)
    b = annotate_boundary(base, [], "sum-1")
    assert b.head_uuid == b.anchor_uuid == b.tail_uuid == "sum-1"


def test_boundary_event_round_trip():
    b = CompactionBoundary("u1", "snip", "h", "a", "t", 42, None)
    back = CompactionBoundary.from_event(b.to_event("s"))
    assert back == b


# --- auto-compact -------------------------------------------------------------


def small_cfg(**kw):
    defaults = dict(window_tokens=400, keep_fraction=0.3)
    defaults.update(kw)
    return CompactionConfig(**defaults)


def test_auto_compact_output_structure():
    msgs = history([tool_turn(i, result_size=150) for i in range(6)])
    out, events, boundary, notes = auto_compact(msgs, simple_summarizer, small_cfg(), "s")
    assert boundary is not None
    marker, summary = out[0], out[1]
    assert marker.text() == AUTO_COMPACT_MARKER_TEXT
    assert marker.uuid == boundary.uuid
    assert summary.text() == "summary of earlier work"
    assert summary.parent_uuid == boundary.uuid
    assert boundary.summary_uuid == summary.uuid
    kept = out[2:]
    assert kept, "a tail must survive"
    assert kept[0].parent_uuid == summary.uuid
    assert kept[0].uuid == boundary.head_uuid
    assert kept[-1].uuid == boundary.tail_uuid
    assert validate_chain(out) == []
    # Events: boundary first, then the summary message.
    assert events[0].type == "compact_boundary"
    assert events[1].type == "message" and events[1].uuid == summary.uuid


def test_auto_compact_freed_matches_recount_oracle():
    msgs = history([tool_turn(i, result_size=150) for i in range(6)])
    out, _, boundary, _ = auto_compact(msgs, simple_summarizer, small_cfg(), "s")
    kept = out[2:]
    summarized = msgs[: len(msgs) - len(kept)]
    expected = (
        sum(char_estimate(m) for m in summarized)
        - char_estimate(out[0])
        - char_estimate(out[1])
    )
    assert boundary.tokens_freed == max(expected, 0)


def test_auto_compact_respects_keep_budget():
    cfg = small_cfg(window_tokens=1000, keep_fraction=0.2)
    msgs = history([tool_turn(i, result_size=150) for i in range(8)])
    out, _, boundary, _ = auto_compact(msgs, simple_summarizer, cfg, "s")
    kept = out[2:]
    assert sum(char_estimate(m) for m in kept) <= 200
    assert boundary is not None


def test_auto_compact_single_message_is_identity():
    msgs = [user_msg("only")]
    out, events, boundary, _ = auto_compact(msgs, simple_summarizer, small_cfg(), "s")
    assert out == msgs and events == [] and boundary is None


def test_auto_compact_summarizer_failure_is_noop_with_note():
    def broken(messages, prompt):
        raise RuntimeError("backend down")

    msgs = history([tool_turn(i) for i in range(4)])
    out, events, boundary, notes = auto_compact(msgs, broken, small_cfg(), "s")
    assert out == msgs and events == [] and boundary is None
    assert any("summarizer failed" in n for n in notes)


def test_auto_compact_empty_summary_is_noop_with_note():
    msgs = history([tool_turn(i) for i in range(4)])
    out, _, boundary, notes = auto_compact(msgs, lambda m, p: [], small_cfg(), "s")
    assert out == msgs and boundary is None
    assert any("returned nothing" in n for n in notes)


def test_auto_compact_pre_hook_context_joins_prompt():
    prompts = []

    def capturing(messages, prompt):
        prompts.append(prompt)
        return [user_msg("s")]

    registry = HookRegistry(
        [cb(HookEvent.PRE_COMPACT, lambda p: {"additionalContext": "keep the test names"})]
    )
    msgs = history([tool_turn(i) for i in range(4)])
    auto_compact(msgs, capturing, small_cfg(), "s", registry)
    assert prompts[0].startswith(COMPACT_PROMPT)
    assert prompts[0].endswith("keep the test names")


def test_auto_compact_post_hook_context_appended_as_attachment():
    registry = HookRegistry(
        [cb(HookEvent.POST_COMPACT, lambda p: {"additionalContext": "post note"})]
    )
    msgs = history([tool_turn(i) for i in range(4)])
    out, _, boundary, _ = auto_compact(msgs, simple_summarizer, small_cfg(), "s", registry)
    assert boundary is not None
    assert out[-1].role is Role.ATTACHMENT
    assert out[-1].text() == "post note"


def test_auto_compact_attachments_precede_hook_results():
    registry = HookRegistry(
        [cb(HookEvent.POST_COMPACT, lambda p: {"additionalContext": "hook"})]
    )
    extra = user_msg("carried attachment")
    msgs = history([tool_turn(i) for i in range(4)])
    out, _, _, _ = auto_compact(
        msgs, simple_summarizer, small_cfg(), "s", registry, attachments=[extra]
    )
    assert out[-2].uuid == extra.uuid
    assert out[-1].text() == "hook"


# --- run_shapers ---------------------------------------------------------------


def test_run_shapers_trace_order_complete():
    msgs = history([tool_turn(1)])
    outcome = run_shapers(msgs, [], CompactionConfig(), summarizer=simple_summarizer)
    assert outcome.trace == list(SHAPER_ORDER)


def test_run_shapers_disabled_stages_skip_trace():
    cfg = CompactionConfig(
        snip_enabled=False, microcompact_enabled=False, collapse_enabled=False
    )
    outcome = run_shapers(history([tool_turn(1)]), [], cfg, summarizer=simple_summarizer)
    assert outcome.trace == ["budget", "auto_compact"]
    no_summarizer = run_shapers(history([tool_turn(1)]), [], CompactionConfig())
    assert no_summarizer.trace == ["budget", "snip", "microcompact", "collapse"]


def test_run_shapers_noop_pipeline_is_identity():
    msgs = history([tool_turn(1, result_size=10)])
    outcome = run_shapers(msgs, [], CompactionConfig(), summarizer=simple_summarizer)
    assert outcome.messages == msgs
    assert outcome.view == msgs
    assert outcome.events == []
    assert not outcome.compacted


def test_run_shapers_compacts_iff_estimate_above_threshold():
    cfg = CompactionConfig(
        window_tokens=100,
        autocompact_threshold=0.5,
        snip_retention_turns=100,
        budget_chars=100_000,
    )
    at = chain(text_with_estimate(25), text_with_estimate(25))
    outcome = run_shapers(at, [], cfg, summarizer=simple_summarizer)
    assert not outcome.compacted, "estimate equal to threshold must not fire"
    above = chain(text_with_estimate(25), text_with_estimate(26))
    outcome = run_shapers(above, [], cfg, summarizer=simple_summarizer)
    assert outcome.compacted and outcome.boundary is not None


def test_run_shapers_threshold_measured_after_earlier_shapers():
    # Oversized result pushes the raw estimate over the line, but the budget
    # stage shrinks it first, so no compaction happens.
    cfg = CompactionConfig(
        window_tokens=200,
        autocompact_threshold=0.5,
        budget_chars=80,
        snip_retention_turns=100,
    )
    msgs = history([tool_turn(1, result_size=2000)])
    assert estimate_context_tokens(msgs) > 100
    outcome = run_shapers(msgs, [], cfg, summarizer=simple_summarizer)
    assert not outcome.compacted


def test_run_shapers_budget_runs_before_compaction_summary():
    seen = []

    def recording(messages, prompt):
        seen.extend(messages)
        return [user_msg("s")]

    cfg = CompactionConfig(
        window_tokens=120,
        autocompact_threshold=0.5,
        budget_chars=60,
        snip_retention_turns=100,
        keep_fraction=0.2,
    )
    msgs = history([tool_turn(1, result_size=4000), tool_turn(2, result_size=4000)])
    outcome = run_shapers(msgs, [], cfg, summarizer=recording)
    assert outcome.compacted
    for m in seen:
        for b in m.tool_results():
            assert len(b.content) <= len(budget_reference("t0", 4000)) + 5


def test_run_shapers_accumulates_snip_credit():
    cfg = CompactionConfig(snip_retention_turns=2, autocompact_enabled=False)
    msgs = history([tool_turn(i, result_size=200) for i in range(5)])
    outcome = run_shapers(msgs, [], cfg, pending_snip_freed=100)
    assert outcome.snip_tokens_freed > 100
    boundary_events = [e for e in outcome.events if e.type == "compact_boundary"]
    assert len(boundary_events) == 1
    assert outcome.snip_tokens_freed == 100 + boundary_events[0].payload["tokensFreed"]


def test_run_shapers_compaction_adds_freed_to_credit():
    cfg = CompactionConfig(
        window_tokens=100,
        autocompact_threshold=0.5,
        snip_retention_turns=100,
        budget_chars=100_000,
    )
    msgs = history([tool_turn(i, result_size=100) for i in range(4)])
    outcome = run_shapers(msgs, [], cfg, summarizer=simple_summarizer, pending_snip_freed=7)
    assert outcome.compacted
    assert outcome.snip_tokens_freed == 7 + outcome.boundary.tokens_freed


def test_run_shapers_collapse_affects_view_not_messages():
    msgs = history([tool_turn(i) for i in range(3)])
    entry = CollapseEntry(msgs[0].uuid, msgs[3].uuid, "condensed")
    cfg = CompactionConfig(autocompact_enabled=False)
    outcome = run_shapers(msgs, [entry], cfg)
    assert outcome.view[0].text() == "condensed"
    assert outcome.messages[0].uuid == msgs[0].uuid
    assert len(outcome.view) < len(outcome.messages)


# --- generated-workload properties ---------------------------------------------


@st.composite
def consistent_history(draw):
    """Random turns whose assistant usage figures match what a real backend
    would report: input tokens cover everything it was shown."""
    msgs = []
    running = 0

    def push(m):
        nonlocal running
        linked = m.with_parent(msgs[-1].uuid if msgs else None)
        msgs.append(linked)
        running += char_estimate(linked)

    n_turns = draw(st.integers(1, 8))
    tid = 0
    for i in range(n_turns):
        push(user_msg("u" * draw(st.integers(0, 120))))
        if draw(st.booleans()):
            tid += 1
            push(asst_msg("call", tool_uses=[(f"t{tid}", "Bash", {"command": "ls"})]))
            push(result_msg([(f"t{tid}", "r" * draw(st.integers(0, 300)))]))
        with_usage = draw(st.booleans())
        text = "a" * draw(st.integers(0, 120))
        if with_usage:
            usage = (running, 1)
            push(asst_msg(text, usage=usage))
        else:
            push(asst_msg(text))
    return msgs


@settings(max_examples=120, deadline=None)
@given(
    msgs=consistent_history(),
    retention=st.integers(1, 6),
    window=st.integers(80, 600),
)
def test_estimate_never_increases_across_shapers(msgs, retention, window):
    cfg = CompactionConfig(
        window_tokens=window,
        snip_retention_turns=retention,
        microcompact_age_turns=1,
        budget_chars=200,
        keep_fraction=0.3,
    )
    before = estimate_context_tokens(msgs)
    outcome = run_shapers(msgs, [], cfg, summarizer=simple_summarizer)
    after = estimate_context_tokens(outcome.view, outcome.snip_tokens_freed)
    assert after <= before
    assert outcome.trace == list(SHAPER_ORDER)
    assert validate_chain(outcome.view) == []


@settings(max_examples=80, deadline=None)
@given(msgs=consistent_history())
def test_compaction_fires_iff_over_threshold(msgs):
    cfg = CompactionConfig(
        window_tokens=300,
        snip_retention_turns=1000,
        microcompact_age_turns=1000,
        budget_chars=100_000,
    )
    pre_view = estimate_context_tokens(msgs)
    outcome = run_shapers(msgs, [], cfg, summarizer=simple_summarizer)
    over = pre_view > cfg.autocompact_threshold * cfg.window_tokens
    if outcome.compacted:
        assert over
    elif over:
        # Above threshold the only legitimate refusal is having nothing left
        # to summarize (single-message history).
        assert len(msgs) == 1
