"""Session wiring: storage, settings, hooks, tools, and runtime state.

A SessionRuntime owns everything the turn engine touches through one
object: the transcript store, the layered permission rules, the hook
registry, the tool pool, and the mutable conversation state.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .backend import Backend, summarize
from .compaction import (
    CollapseEntry,
    CompactionConfig,
    auto_compact,
)
from .config import Settings, agent_dirs, load_config, skill_dirs
from .context import ContextAssembler
from .hooks import HookEvent, HookRegistry, fire
from .model import (
    Message,
    Role,
    SessionHandle,
    TranscriptEvent,
    TurnState,
    new_uuid,
    now_rfc3339,
    text_block,
)
from .permissions import (
    PermissionMode,
    PermissionRule,
    SandboxConfig,
    should_use_sandbox,
)
from .persistence import (
    SessionStore,
    checkpoint_file,
    fork_session as _fork_transcript,
    harness_home,
    load_session,
    projects_root,
    snapshot_event,
)
from .tools.builtins import ToolPoolConfig, assemble_tool_pool
from .tools.mcp import connect_servers, make_router
from .tools.skills import SkillRegistry, load_skills
from .tools.spec import ToolContext, ToolSpec

Summarizer = Callable[[list[Message], str], Optional[list[Message]]]

REACTIVE_KEEP_FRACTION = 0.05


@dataclass
class SessionRuntime:
    handle: SessionHandle
    assembler: ContextAssembler
    hooks: HookRegistry
    home: Path
    store: Optional[SessionStore] = None
    skills: SkillRegistry = field(default_factory=SkillRegistry)
    sandbox: SandboxConfig = field(default_factory=SandboxConfig)
    compaction_cfg: CompactionConfig = field(default_factory=CompactionConfig)
    pool_config: ToolPoolConfig = field(default_factory=ToolPoolConfig)
    base_rules: list[PermissionRule] = field(default_factory=list)
    mcp_tools: list[ToolSpec] = field(default_factory=list)
    mcp_clients: dict[str, Any] = field(default_factory=dict)
    agent_defs: dict[str, Any] = field(default_factory=dict)
    backend: Optional[Backend] = None
    classifier: Optional[Callable] = None
    is_sidechain: bool = False
    depth: int = 0
    collapse_store: list[CollapseEntry] = field(default_factory=list)
    notifications: list[str] = field(default_factory=list)
    session_rules: list[PermissionRule] = field(default_factory=list)
    turn_rules: list[PermissionRule] = field(default_factory=list)
    _summarizer: Optional[Summarizer] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _pending_attachments: list[Message] = field(default_factory=list)
    _attachment_texts: list[str] = field(default_factory=list)
    _subagent_updates: list[dict[str, Any]] = field(default_factory=list)
    _agent_counter: int = 0

    # --- permission rules -------------------------------------------------

    def effective_rules(self) -> list[PermissionRule]:
        return [*self.base_rules, *self.session_rules, *self.turn_rules]

    def add_session_rule(self, rule: PermissionRule) -> None:
        self.session_rules.append(rule)

    def add_turn_rule(self, rule: PermissionRule) -> None:
        self.turn_rules.append(rule)

    def clear_turn_rules(self) -> None:
        self.turn_rules.clear()

    def drain_skill_rules(self) -> list[PermissionRule]:
        return self.skills.drain_pending_rules()

    # --- conversation state -----------------------------------------------

    def append_message(self, message: Message) -> None:
        if self.store is not None:
            self.store.append_message(message)
        self.handle.state.messages.append(message)
        if message.role is Role.ASSISTANT and message.usage is not None:
            # Fresh usage already reflects every earlier trim.
            self.handle.state.compaction.snip_tokens_freed = 0

    def append_event(self, event: TranscriptEvent) -> None:
        if self.store is not None:
            self.store.append_event(event)

    def replace_messages(self, messages: Sequence[Message]) -> None:
        self.handle.state.messages = list(messages)

    def messages_after_compact_boundary(self) -> list[Message]:
        # In-memory state is rewritten at each compaction, so the live list
        # already starts at the newest boundary.
        return list(self.handle.state.messages)

    # --- tools --------------------------------------------------------------

    def build_pool(self) -> list[ToolSpec]:
        pool = assemble_tool_pool(self.pool_config, self.mcp_tools, self.effective_rules())
        listing = self.skills.tool_listing()
        out: list[ToolSpec] = []
        for spec in pool:
            if spec.name == "Skill" and listing:
                spec = dc_replace(spec, description=f"{spec.description}. {listing}")
            if spec.name == "Agent" and self.agent_defs:
                names = ", ".join(sorted(self.agent_defs))
                spec = dc_replace(spec, description=f"{spec.description}. Agent types: {names}")
            out.append(spec)
        return out

    def result_caps(self) -> dict[str, float]:
        return {spec.name: spec.max_result_size_chars for spec in self.build_pool()}

    def tool_context(self, deps: Any = None) -> ToolContext:
        services: dict[str, Any] = {"skill_registry": self.skills}
        if self.mcp_clients:
            services["mcp_router"] = make_router(self.mcp_clients)
        factory = getattr(deps, "agent_runner_factory", None)
        if factory is not None:
            services["agent_runner"] = factory(self, deps)
        return ToolContext(
            project_dir=self.handle.project_dir,
            session_id=self.handle.session_id,
            file_checkpoint=self.checkpoint_path,
            sandbox_wrap=None,
            should_sandbox=lambda cmd: should_use_sandbox(self.sandbox, cmd),
            abort_signal=None,
            services=services,
        )

    def checkpoint_path(self, path: str) -> None:
        cp = checkpoint_file(self.handle.session_id, path, self.home)
        self.append_event(snapshot_event(cp, self.handle.session_id))

    # --- compaction ----------------------------------------------------------

    @property
    def summarizer(self) -> Optional[Summarizer]:
        if self._summarizer is not None:
            return self._summarizer
        if self.backend is None:
            return None
        backend = self.backend

        def run(messages: list[Message], prompt: str) -> Optional[list[Message]]:
            return summarize(messages, prompt, backend)

        return run

    def set_summarizer(self, summarizer: Optional[Summarizer]) -> None:
        self._summarizer = summarizer

    def reactive_compact(self, registry: HookRegistry | None = None) -> bool:
        """Aggressive compaction after a prompt_too_long failure."""
        summarizer = self.summarizer
        if summarizer is None:
            return False
        cfg = dc_replace(self.compaction_cfg, keep_fraction=REACTIVE_KEEP_FRACTION)
        result, events, boundary, notes = auto_compact(
            self.handle.state.messages,
            summarizer,
            cfg,
            self.handle.session_id,
            registry or self.hooks,
        )
        self.notifications.extend(notes)
        if boundary is None:
            return False
        for ev in events:
            self.append_event(ev)
        self.replace_messages(result)
        self.handle.state.compaction.snip_tokens_freed += boundary.tokens_freed
        self.handle.state.compaction.last_boundary_uuid = boundary.uuid
        return True

    # --- collapse ranges ------------------------------------------------------

    def record_collapse(self, from_uuid: str, to_uuid: str, summary_text: str) -> None:
        entry = CollapseEntry(from_uuid=from_uuid, to_uuid=to_uuid, summary_text=summary_text)
        self.collapse_store.append(entry)
        self.append_event(
            TranscriptEvent(
                type="session_meta",
                uuid=new_uuid(),
                parent_uuid=None,
                timestamp=now_rfc3339(),
                session_id=self.handle.session_id,
                payload={
                    "kind": "collapse",
                    "fromUuid": from_uuid,
                    "toUuid": to_uuid,
                    "summaryText": summary_text,
                },
            )
        )

    # --- audit records ---------------------------------------------------------

    def record_updated_input(
        self, tool_use_id: str, original: dict[str, Any], updated: dict[str, Any]
    ) -> None:
        self.append_event(
            TranscriptEvent(
                type="session_meta",
                uuid=new_uuid(),
                parent_uuid=None,
                timestamp=now_rfc3339(),
                session_id=self.handle.session_id,
                payload={
                    "kind": "updated_input",
                    "toolUseId": tool_use_id,
                    "original": original,
                    "updated": updated,
                },
            )
        )

    # --- cross-thread queues -----------------------------------------------------

    def queue_pending_attachment(self, message: Message) -> None:
        with self._lock:
            self._pending_attachments.append(message)

    def drain_pending_attachments(self) -> list[Message]:
        with self._lock:
            out = self._pending_attachments[:]
            self._pending_attachments.clear()
        return out

    def queue_attachment_text(self, text: str) -> None:
        with self._lock:
            self._attachment_texts.append(text)

    def drain_attachment_texts(self) -> list[str]:
        with self._lock:
            out = self._attachment_texts[:]
            self._attachment_texts.clear()
        return out

    def notify_subagent(self, update: dict[str, Any]) -> None:
        with self._lock:
            self._subagent_updates.append(update)

    def drain_subagent_updates(self) -> list[dict[str, Any]]:
        with self._lock:
            out = self._subagent_updates[:]
            self._subagent_updates.clear()
        return out

    def next_agent_index(self) -> int:
        with self._lock:
            self._agent_counter += 1
            return self._agent_counter

    # --- lifecycle -----------------------------------------------------------------

    def start(self, source: str = "startup") -> list[str]:
        merged = fire(
            HookEvent.SESSION_START,
            {"sessionId": self.handle.session_id, "source": source},
            self.hooks,
        )
        if merged.additional_context:
            self.queue_pending_attachment(
                Message.create(
                    role=Role.ATTACHMENT,
                    blocks=[text_block(merged.additional_context)],
                    parent_uuid=None,
                    is_sidechain=self.is_sidechain,
                )
            )
        return merged.notifications

    def close(self) -> None:
        fire(
            HookEvent.SESSION_END,
            {"sessionId": self.handle.session_id},
            self.hooks,
        )
        for client in self.mcp_clients.values():
            try:
                client.close()
            except Exception:
                pass
        if self.store is not None:
            self.store.close()


def _build_runtime(
    *,
    cwd: Path,
    home: Path,
    session_id: str,
    mode: PermissionMode,
    settings: Settings,
    cli_rule_list: Sequence[PermissionRule],
    simple_mode: bool,
    disabled_tools: Sequence[str],
    compaction_cfg: CompactionConfig | None,
    backend: Optional[Backend],
    connect_mcp: bool,
    is_sidechain: bool,
    depth: int,
    classifier: Optional[Callable],
    extra_hooks: HookRegistry | None,
    persist: bool,
    managed: str | Path | None,
) -> SessionRuntime:
    # Imported here: agents builds child SessionRuntimes, so a top-level
    # import would be circular.
    from .agents import agent_registry

    hooks = HookRegistry.from_config(settings.hook_entries)
    if extra_hooks is not None:
        hooks = hooks.extended(extra_hooks.registrations)

    skills_defs, skill_notes = load_skills(skill_dirs(cwd, home))
    skills = SkillRegistry(skills_defs)
    agent_defs, agent_notes = agent_registry(agent_dirs(cwd, home))

    mcp_tools: list[ToolSpec] = []
    mcp_clients: dict[str, Any] = {}
    mcp_notes: list[str] = []
    if connect_mcp and settings.mcp_servers:
        mcp_tools, mcp_clients, mcp_notes = connect_servers(
            {"mcpServers": settings.mcp_servers}
        )

    store = None
    if persist:
        store = SessionStore.open(projects_root(home), str(cwd), session_id)

    runtime = SessionRuntime(
        handle=SessionHandle(
            session_id=session_id,
            project_dir=str(cwd),
            mode=mode,
            state=TurnState(),
        ),
        assembler=ContextAssembler(str(cwd), home=home, managed_root=managed or "/etc/harnesskit"),
        hooks=hooks,
        home=home,
        store=store,
        skills=skills,
        sandbox=settings.sandbox,
        compaction_cfg=compaction_cfg or CompactionConfig(),
        pool_config=ToolPoolConfig(
            simple_mode=simple_mode, disabled_tools=tuple(disabled_tools)
        ),
        base_rules=[*settings.rules, *cli_rule_list],
        mcp_tools=mcp_tools,
        mcp_clients=mcp_clients,
        agent_defs=agent_defs,
        backend=backend,
        classifier=classifier,
        is_sidechain=is_sidechain,
        depth=depth,
    )
    runtime.notifications.extend(settings.notifications)
    runtime.notifications.extend(skill_notes)
    runtime.notifications.extend(agent_notes)
    runtime.notifications.extend(mcp_notes)
    return runtime


def open_session(
    cwd: str | Path,
    *,
    home: str | Path | None = None,
    session_id: str | None = None,
    mode: PermissionMode = PermissionMode.DEFAULT,
    cli_rule_list: Sequence[PermissionRule] = (),
    settings: Settings | None = None,
    simple_mode: bool = False,
    disabled_tools: Sequence[str] = (),
    compaction_cfg: CompactionConfig | None = None,
    backend: Optional[Backend] = None,
    connect_mcp: bool = True,
    is_sidechain: bool = False,
    depth: int = 0,
    classifier: Optional[Callable] = None,
    extra_hooks: HookRegistry | None = None,
    persist: bool = True,
    managed: str | Path | None = None,
) -> SessionRuntime:
    cwd = Path(cwd).resolve()
    home_path = Path(home) if home else harness_home()
    if settings is None:
        settings = load_config(cwd, home_path, managed)
    return _build_runtime(
        cwd=cwd,
        home=home_path,
        session_id=session_id or new_uuid(),
        mode=mode,
        settings=settings,
        cli_rule_list=cli_rule_list,
        simple_mode=simple_mode,
        disabled_tools=disabled_tools,
        compaction_cfg=compaction_cfg,
        backend=backend,
        connect_mcp=connect_mcp,
        is_sidechain=is_sidechain,
        depth=depth,
        classifier=classifier,
        extra_hooks=extra_hooks,
        persist=persist,
        managed=managed,
    )


def resume_session(
    session_id: str,
    *,
    home: str | Path | None = None,
    cwd: str | Path | None = None,
    mode: PermissionMode = PermissionMode.DEFAULT,
    cli_rule_list: Sequence[PermissionRule] = (),
    settings: Settings | None = None,
    backend: Optional[Backend] = None,
    connect_mcp: bool = True,
    compaction_cfg: CompactionConfig | None = None,
    classifier: Optional[Callable] = None,
    extra_hooks: HookRegistry | None = None,
    managed: str | Path | None = None,
) -> SessionRuntime:
    """Rebuild a runtime from its transcript and reopen it for appending.

    Session-scoped permission grants are not restored; everything else in
    the projected conversation is.
    """
    home_path = Path(home) if home else harness_home()
    root = projects_root(home_path)
    loaded = load_session(session_id, root)
    if cwd is None:
        cwd = Path(loaded.project_dir_encoded.replace("-", "/")).resolve()
    cwd = Path(cwd).resolve()
    if settings is None:
        settings = load_config(cwd, home_path, managed)
    runtime = _build_runtime(
        cwd=cwd,
        home=home_path,
        session_id=session_id,
        mode=mode,
        settings=settings,
        cli_rule_list=cli_rule_list,
        simple_mode=False,
        disabled_tools=(),
        compaction_cfg=compaction_cfg,
        backend=backend,
        connect_mcp=connect_mcp,
        is_sidechain=False,
        depth=0,
        classifier=classifier,
        extra_hooks=extra_hooks,
        persist=False,
        managed=managed,
    )
    # Reopen the found transcript itself so appends extend the same file
    # even when the encoded directory name is not reversible.
    runtime.store = SessionStore(loaded.path, session_id)
    runtime.handle.state.messages = list(loaded.messages)
    runtime.handle.state.compaction.snip_tokens_freed = loaded.pending_snip_freed
    runtime.collapse_store = list(loaded.collapse_store)
    runtime.notifications.extend(loaded.notifications)
    return runtime


def fork_from(
    session_id: str,
    *,
    at_uuid: str | None = None,
    home: str | Path | None = None,
    **kwargs: Any,
) -> SessionRuntime:
    home_path = Path(home) if home else harness_home()
    root = projects_root(home_path)
    new_id = _fork_transcript(session_id, root, at_uuid)
    return resume_session(new_id, home=home_path, **kwargs)
