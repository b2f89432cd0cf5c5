"""Append-only transcripts, crash-cut loading, replay fidelity, checkpoints."""
from __future__ import annotations

import json

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from harnesskit.compaction import (
    CompactionConfig,
    run_shapers,
)
from harnesskit.model import (
    Role,
    TranscriptEvent,
    estimate_context_tokens,
    new_uuid,
    now_rfc3339,
    validate_chain,
)
from harnesskit.persistence import (
    SessionStore,
    append_history,
    checkpoint_file,
    encode_project_dir,
    find_transcript,
    fork_session,
    list_checkpoints,
    load_session,
    read_events,
    read_history_reverse,
    rewind_files,
    transcript_path,
)

from conftest import asst_msg, chain, result_msg, user_msg


def meta_event(session_id, payload):
    return TranscriptEvent(
        type="session_meta",
        uuid=new_uuid(),
        parent_uuid=None,
        timestamp=now_rfc3339(),
        session_id=session_id,
        payload=payload,
    )


@pytest.fixture
def root(tmp_path):
    r = tmp_path / "projects"
    r.mkdir()
    return r


class LiveSession:
    """Mimics the runtime's persistence discipline for replay comparisons:
    every message append hits the store, shaper events are persisted and the
    in-memory list swapped, exactly like the loop does."""

    def __init__(self, root, cwd="/w/proj", session_id="sess-1"):
        self.store = SessionStore.open(root, cwd, session_id)
        self.session_id = session_id
        self.messages = []
        self.pending_snip_freed = 0

    def add(self, msg):
        linked = msg.with_parent(self.messages[-1].uuid if self.messages else None)
        self.messages.append(linked)
        self.store.append_message(linked)
        if linked.role is Role.ASSISTANT and linked.usage is not None:
            self.pending_snip_freed = 0
        return linked

    def shape(self, cfg, summarizer=None):
        outcome = run_shapers(
            self.messages,
            [],
            cfg,
            summarizer=summarizer,
            session_id=self.session_id,
            pending_snip_freed=self.pending_snip_freed,
        )
        for event in outcome.events:
            self.store.append_event(event)
        self.messages = outcome.messages
        self.pending_snip_freed = outcome.snip_tokens_freed
        return outcome


# --- store ------------------------------------------------------------------


def test_store_appends_whole_lines(root):
    store = SessionStore.open(root, "/w/p", "s1")
    store.append_message(user_msg("hello"))
    store.append_message(asst_msg("hi"))
    store.close()
    data = store.path.read_bytes()
    assert data.endswith(b"\n")
    assert data.count(b"\n") == 2


def test_store_snapshots_are_byte_prefixes(root):
    store = SessionStore.open(root, "/w/p", "s1")
    snapshots = []
    for i in range(10):
        store.append_message(user_msg(f"message {i}"))
        snapshots.append(store.path.read_bytes())
    store.close()
    final = store.path.read_bytes()
    for snap in snapshots:
        assert final.startswith(snap)


def test_store_reopen_appends(root):
    store = SessionStore.open(root, "/w/p", "s1")
    store.append_message(user_msg("one"))
    store.close()
    before = store.path.read_bytes()
    again = SessionStore(store.path, "s1")
    again.append_message(user_msg("two"))
    again.close()
    after = again.path.read_bytes()
    assert after.startswith(before)
    events, partial = read_events(store.path)
    assert len(events) == 2 and not partial


def test_transcript_path_encoding(root):
    assert transcript_path(root, "/a/b/c", "x").parent.name == "-a-b-c"
    assert encode_project_dir("/a/b") == "-a-b"


# --- crash-cut reads ----------------------------------------------------------


def test_read_events_ignores_trailing_partial(root):
    store = SessionStore.open(root, "/w/p", "s1")
    store.append_message(user_msg("whole"))
    store.close()
    with open(store.path, "ab") as fh:
        fh.write(b'{"type":"message","uuid":"zz')
    events, partial = read_events(store.path)
    assert len(events) == 1 and partial


def test_read_events_empty_file(root):
    path = root / "p" / "empty.jsonl"
    path.parent.mkdir()
    path.touch()
    events, partial = read_events(path)
    assert events == [] and not partial


@settings(
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
@given(cut=st.integers(0, 4000), sizes=st.lists(st.integers(0, 80), min_size=1, max_size=8))
def test_truncation_at_any_byte_loads_whole_line_prefix(tmp_path, cut, sizes):
    # Safe with a shared tmp_path: every example writes to a fresh file name.
    path = tmp_path / f"trunc-{new_uuid()}.jsonl"
    store = SessionStore(path, "s1")
    msgs = chain(*[user_msg("m" * n) for n in sizes])
    for m in msgs:
        store.append_message(m)
    store.close()
    data = path.read_bytes()
    cut = min(cut, len(data))
    path.write_bytes(data[:cut])
    events, partial = read_events(path)
    # Oracle: whole lines strictly inside the cut survive.
    expected = data[:cut].count(b"\n")
    assert len(events) == expected
    assert partial == (cut > 0 and not data[:cut].endswith(b"\n"))
    for event, original in zip(events, msgs):
        assert event.to_message() == original


# --- replay fidelity ------------------------------------------------------------


def test_load_plain_conversation(root):
    live = LiveSession(root)
    for m in [user_msg("q"), asst_msg("a", usage=(10, 2)), user_msg("q2")]:
        live.add(m)
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.messages == live.messages
    assert loaded.pending_snip_freed == 0
    assert loaded.notifications == []


def test_load_unknown_session_raises(root):
    with pytest.raises(FileNotFoundError):
        load_session("missing", root)


def test_find_transcript_scans_projects(root):
    live = LiveSession(root, cwd="/alpha", session_id="abc")
    live.add(user_msg("x"))
    live.store.close()
    assert find_transcript("abc", root) == live.store.path
    assert find_transcript("nope", root) is None


def big_turn(i, size=400):
    tid = f"t{i}"
    return [
        user_msg(f"prompt {i}"),
        asst_msg("call", tool_uses=[(tid, "Bash", {"command": "ls"})]),
        result_msg([(tid, "o" * size)]),
        asst_msg(f"answer {i}"),
    ]


def test_replay_after_snip_matches_live(root):
    live = LiveSession(root)
    for i in range(6):
        for m in big_turn(i):
            live.add(m)
    cfg = CompactionConfig(snip_retention_turns=2, autocompact_enabled=False,
                           microcompact_enabled=False, budget_chars=10_000)
    outcome = live.shape(cfg)
    assert outcome.snip_tokens_freed > 0
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.messages == live.messages
    assert loaded.pending_snip_freed == live.pending_snip_freed
    assert validate_chain(loaded.messages) == []


def test_replay_after_budget_and_microcompact_matches_live(root):
    live = LiveSession(root)
    for i in range(8):
        for m in big_turn(i, size=3000):
            live.add(m)
    cfg = CompactionConfig(
        snip_retention_turns=100,
        microcompact_age_turns=2,
        budget_chars=500,
        autocompact_enabled=False,
    )
    live.shape(cfg)
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.messages == live.messages
    assert len(loaded.replacements) > 0


def test_replay_after_auto_compact_matches_live(root):
    live = LiveSession(root)
    for i in range(6):
        for m in big_turn(i, size=600):
            live.add(m)
    cfg = CompactionConfig(
        window_tokens=300,
        autocompact_threshold=0.5,
        snip_retention_turns=100,
        microcompact_enabled=False,
        budget_chars=100_000,
        keep_fraction=0.3,
    )
    outcome = live.shape(cfg, summarizer=lambda m, p: [user_msg("the summary")])
    assert outcome.compacted
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.messages == live.messages
    assert loaded.pending_snip_freed == live.pending_snip_freed
    assert loaded.messages[0].text().startswith("[conversation history compacted")
    assert loaded.messages[1].text() == "the summary"
    assert validate_chain(loaded.messages) == []


def test_replay_usage_resets_pending_credit(root):
    live = LiveSession(root)
    for i in range(6):
        for m in big_turn(i):
            live.add(m)
    cfg = CompactionConfig(snip_retention_turns=2, autocompact_enabled=False,
                           microcompact_enabled=False, budget_chars=10_000)
    live.shape(cfg)
    assert live.pending_snip_freed > 0
    live.add(asst_msg("fresh", usage=(500, 4)))
    assert live.pending_snip_freed == 0
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.pending_snip_freed == 0
    assert loaded.messages == live.messages


def test_replay_multiple_shaping_rounds(root):
    live = LiveSession(root)
    cfg = CompactionConfig(
        window_tokens=900,
        autocompact_threshold=0.6,
        snip_retention_turns=3,
        microcompact_age_turns=2,
        budget_chars=800,
    )
    for i in range(12):
        for m in big_turn(i, size=1200):
            live.add(m)
        live.shape(cfg, summarizer=lambda m, p: [user_msg(f"summary at {i}")])
    live.store.close()
    loaded = load_session("sess-1", root)
    assert loaded.messages == live.messages
    assert loaded.pending_snip_freed == live.pending_snip_freed
    assert estimate_context_tokens(loaded.messages, loaded.pending_snip_freed) == \
        estimate_context_tokens(live.messages, live.pending_snip_freed)


def test_load_collects_collapse_entries_and_metas(root):
    live = LiveSession(root)
    live.add(user_msg("x"))
    live.store.append_event(
        meta_event("sess-1", {"kind": "collapse", "fromUuid": "a", "toUuid": "b",
                              "summaryText": "range summary"})
    )
    live.store.append_event(meta_event("sess-1", {"kind": "updated_input", "toolUseId": "t1"}))
    live.store.close()
    loaded = load_session("sess-1", root)
    assert len(loaded.collapse_store) == 1
    assert loaded.collapse_store[0].summary_text == "range summary"
    assert any(m.get("kind") == "updated_input" for m in loaded.metas)


def test_load_reports_partial_trailing_line(root):
    live = LiveSession(root)
    live.add(user_msg("x"))
    live.store.close()
    with open(live.store.path, "ab") as fh:
        fh.write(b'{"broken')
    loaded = load_session("sess-1", root)
    assert any("partial" in n for n in loaded.notifications)
    assert len(loaded.messages) == 1


# --- fork -------------------------------------------------------------------


def test_fork_copies_full_transcript_under_new_id(root):
    live = LiveSession(root)
    msgs = [live.add(user_msg("q")), live.add(asst_msg("a"))]
    live.store.close()
    new_id = fork_session("sess-1", root)
    assert new_id != "sess-1"
    forked = load_session(new_id, root)
    assert forked.messages == msgs
    # Origin marker records provenance.
    assert any(m.get("kind") == "origin" and m.get("forkedFrom") == "sess-1"
               for m in forked.metas)
    # Original untouched.
    assert load_session("sess-1", root).messages == msgs


def test_fork_at_uuid_cuts_history(root):
    live = LiveSession(root)
    first = live.add(user_msg("q"))
    live.add(asst_msg("a"))
    live.store.close()
    new_id = fork_session("sess-1", root, at_uuid=first.uuid)
    forked = load_session(new_id, root)
    assert forked.messages == [first]


def test_fork_unknown_session_raises(root):
    with pytest.raises(FileNotFoundError):
        fork_session("ghost", root)


# --- prompt history -----------------------------------------------------------


def test_history_appends_and_reads_newest_first(home):
    append_history("first", home=home, cwd="/a")
    append_history("second", home=home, cwd="/b")
    entries = read_history_reverse(10, home=home)
    assert [e["prompt"] for e in entries] == ["second", "first"]
    assert entries[0]["cwd"] == "/b"
    assert read_history_reverse(1, home=home)[0]["prompt"] == "second"
    assert read_history_reverse(0, home=home) == []


def test_history_missing_file(home):
    assert read_history_reverse(5, home=home) == []


# --- file checkpoints -----------------------------------------------------------


def test_checkpoint_and_rewind_round_trip(home, tmp_path):
    target = tmp_path / "work" / "code.py"
    target.parent.mkdir()
    target.write_text("v1")
    checkpoint_file("s1", str(target), home=home)
    target.write_text("v2")
    checkpoint_file("s1", str(target), home=home)
    target.write_text("v3")
    cps = list_checkpoints("s1", home=home)
    assert [c.sequence for c in cps] == [1, 2]
    restored = rewind_files("s1", to_sequence=2, home=home)
    assert str(target) in restored
    assert target.read_text() == "v2"
    rewind_files("s1", home=home)
    assert target.read_text() == "v1"


def test_checkpoint_absent_file_rewinds_to_deletion(home, tmp_path):
    target = tmp_path / "new.txt"
    cp = checkpoint_file("s1", str(target), home=home)
    assert cp.absent and cp.snapshot_path is None
    target.write_text("created later")
    rewind_files("s1", home=home)
    assert not target.exists()


def test_snapshot_event_payload(home, tmp_path):
    target = tmp_path / "f.txt"
    target.write_text("data")
    cp = checkpoint_file("s9", str(target), home=home)
    event = TranscriptEvent.parse(
        __import__("harnesskit.persistence", fromlist=["snapshot_event"])
        .snapshot_event(cp, "s9")
        .serialize()
    )
    assert event.type == "file_history_snapshot"
    assert event.payload["originalPath"] == str(target)
    assert event.payload["sequence"] == 1
    assert event.payload["absent"] is False
