"""Command-line entry point.

Two drive modes share one event renderer: headless single-prompt runs
(``-p``) and an interactive loop. A control server can be attached to
either; connected clients then receive every loop event and may answer
permission asks, submit prompts, and interrupt the turn.
"""
from __future__ import annotations

import argparse
import os
import sys
import threading
from pathlib import Path
from typing import Optional

from . import agents
from .backend import Backend, HttpBackend, ScriptedBackend
from .config import ConfigError, cli_rules
from .control import ControlServer
from .loop import LoopEventKind, PermissionAsk, StopReason, TurnDeps, run_turn
from .model import Role
from .permissions import PermissionMode
from .persistence import append_history
from .session import SessionRuntime, fork_from, open_session, resume_session

EXIT_OK = 0
EXIT_ASK_FAILED = 1
EXIT_PROMPT_TOO_LONG = 2
EXIT_ABORTED = 3
EXIT_CONFIG = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harnesskit",
        description="Model-agnostic agentic coding harness",
    )
    parser.add_argument("prompt", nargs="?", help="initial prompt")
    parser.add_argument(
        "-p",
        "--print",
        action="store_true",
        dest="print_mode",
        help="run one prompt headlessly and exit",
    )
    parser.add_argument("--resume", metavar="SESSION_ID", help="resume a session")
    parser.add_argument("--fork", metavar="SESSION_ID", help="fork a session")
    parser.add_argument(
        "--fork-at", metavar="UUID", help="fork point (message uuid, with --fork)"
    )
    parser.add_argument(
        "--permission-mode",
        choices=[m.value for m in PermissionMode],
        default=PermissionMode.DEFAULT.value,
    )
    parser.add_argument(
        "--allowedTools",
        action="append",
        default=[],
        help="allow rule (repeatable, comma separated accepted)",
    )
    parser.add_argument(
        "--disallowedTools",
        action="append",
        default=[],
        help="deny rule (repeatable, comma separated accepted)",
    )
    parser.add_argument("--max-turns", type=int, default=None)
    parser.add_argument("--append-system-prompt", default=None)
    parser.add_argument("--model", default="default")
    parser.add_argument("--fallback-model", default=None)
    parser.add_argument(
        "--on-ask",
        choices=["deny", "allow", "fail"],
        default="deny",
        help="headless answer for permission asks",
    )
    parser.add_argument("--control-port", type=int, default=None)
    parser.add_argument("--script", default=None, help="scripted backend file")
    parser.add_argument("--simple-mode", action="store_true")
    parser.add_argument("--cwd", default=None)
    return parser


def _split_rules(values: list[str]) -> list[str]:
    out: list[str] = []
    for value in values:
        out.extend(part.strip() for part in value.split(",") if part.strip())
    return out


def _make_backend(args: argparse.Namespace) -> Backend:
    if args.script:
        return ScriptedBackend.from_file(args.script)
    if os.environ.get("HARNESS_API_URL"):
        return HttpBackend()
    raise ConfigError(
        "no backend configured: pass --script or set HARNESS_API_URL"
    )


def _is_interactive() -> bool:
    if os.environ.get("HARNESS_ASSUME_TTY") == "1":
        return True
    return sys.stdin.isatty() and sys.stderr.isatty()


class _Driver:
    def __init__(
        self,
        rt: SessionRuntime,
        deps: TurnDeps,
        server: Optional[ControlServer],
        on_ask: str,
        interactive: bool,
    ) -> None:
        self.rt = rt
        self.deps = deps
        self.server = server
        self.on_ask = on_ask
        self.interactive = interactive
        self.ask_failed = False
        deps.ask_resolver = self._resolve

    def _resolve(self, ask: PermissionAsk) -> str:
        if self.server is not None and self.server.has_clients():
            return self.server.resolve_ask(ask)
        if self.interactive:
            return self._resolve_tty(ask)
        if self.on_ask == "allow":
            return "allow"
        if self.on_ask == "fail":
            self.ask_failed = True
        return "deny"

    def _resolve_tty(self, ask: PermissionAsk) -> str:
        origin = " (from subagent)" if ask.from_subagent else ""
        print(
            f"permission{origin}: {ask.request.tool_name} "
            f"{ask.request.input} [{ask.reason}]",
            file=sys.stderr,
        )
        while True:
            try:
                answer = input("approve? [y]es/[n]o/[a]lways: ").strip().lower()
            except EOFError:
                return "deny"
            if answer in ("y", "yes"):
                return "allow"
            if answer in ("n", "no"):
                return "deny"
            if answer in ("a", "always"):
                return "always_allow"

    def run_prompt(self, prompt: str) -> StopReason:
        append_history(prompt, self.rt.home, self.rt.handle.project_dir)
        reason = StopReason.ABORTED
        streamed = False
        for event in run_turn(self.rt, prompt, self.deps):
            if self.server is not None:
                self.server.publish_loop_event(event)
            if event.kind is LoopEventKind.STREAM_DELTA:
                sys.stdout.write(event.payload.get("text", ""))
                sys.stdout.flush()
                streamed = True
            elif event.kind is LoopEventKind.MESSAGE:
                message = event.payload["message"]
                if message.role is Role.ASSISTANT and streamed:
                    sys.stdout.write("\n")
                    sys.stdout.flush()
                    streamed = False
            elif event.kind is LoopEventKind.TOOL_USE_SUMMARY:
                status = "error" if event.payload.get("isError") else "ok"
                print(
                    f"[tool] {event.payload.get('toolName')} {status}",
                    file=sys.stderr,
                )
            elif event.kind is LoopEventKind.NOTIFICATION:
                if event.payload.get("kind") != "context_stats":
                    print(f"[note] {event.payload.get('message')}", file=sys.stderr)
            elif event.kind is LoopEventKind.TOMBSTONE:
                print(f"[aborted] {event.payload.get('reason')}", file=sys.stderr)
            elif event.kind is LoopEventKind.DONE:
                reason = StopReason(event.payload["reason"])
        print(f"done: {reason.value}", file=sys.stderr)
        return reason


def _exit_code(reason: StopReason, ask_failed: bool) -> int:
    if reason is StopReason.PROMPT_TOO_LONG:
        return EXIT_PROMPT_TOO_LONG
    if reason is StopReason.ABORTED:
        return EXIT_ABORTED
    if ask_failed:
        return EXIT_ASK_FAILED
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backend = _make_backend(args)
        cwd = Path(args.cwd) if args.cwd else Path.cwd()
        mode = PermissionMode(args.permission_mode)
        rules = cli_rules(
            allow=_split_rules(args.allowedTools),
            deny=_split_rules(args.disallowedTools),
        )
        if args.resume and args.fork:
            raise ConfigError("--resume and --fork are mutually exclusive")
        if args.resume:
            rt = resume_session(
                args.resume,
                cwd=cwd,
                mode=mode,
                cli_rule_list=rules,
                backend=backend,
            )
        elif args.fork:
            rt = fork_from(
                args.fork,
                at_uuid=args.fork_at,
                cwd=cwd,
                mode=mode,
                cli_rule_list=rules,
                backend=backend,
            )
        else:
            rt = open_session(
                cwd,
                mode=mode,
                cli_rule_list=rules,
                backend=backend,
                simple_mode=args.simple_mode,
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    for note in rt.notifications:
        print(f"[note] {note}", file=sys.stderr)
    rt.notifications.clear()

    server: Optional[ControlServer] = None
    abort = threading.Event()
    if args.control_port is not None:
        server = ControlServer(port=args.control_port, home=rt.home)
        server.start()
        abort = server.abort_event

    deps = TurnDeps(
        backend=backend,
        model_id=args.model,
        fallback_model=args.fallback_model,
        max_turns=args.max_turns,
        append_system_prompt=args.append_system_prompt,
        abort=abort,
        agent_runner_factory=agents.agent_runner_factory,
    )
    interactive = _is_interactive() and not args.print_mode
    driver = _Driver(rt, deps, server, args.on_ask, interactive)

    source = "resume" if args.resume else "startup"
    for note in rt.start(source):
        print(f"[note] {note}", file=sys.stderr)

    try:
        if args.print_mode:
            prompt = args.prompt if args.prompt is not None else sys.stdin.read()
            if not prompt.strip():
                print("config error: empty prompt", file=sys.stderr)
                return EXIT_CONFIG
            reason = driver.run_prompt(prompt)
            return _exit_code(reason, driver.ask_failed)

        reason = StopReason.TEXT_ONLY
        if args.prompt:
            reason = driver.run_prompt(args.prompt)
        while True:
            abort.clear()
            try:
                if interactive:
                    prompt = input("> ")
                elif server is not None:
                    prompt = server.prompts.get()
                else:
                    break
            except (EOFError, KeyboardInterrupt):
                break
            if not prompt.strip():
                continue
            if prompt.strip() in ("exit", "quit"):
                break
            try:
                reason = driver.run_prompt(prompt)
            except KeyboardInterrupt:
                abort.set()
                print("interrupted", file=sys.stderr)
                reason = StopReason.ABORTED
        return _exit_code(reason, driver.ask_failed)
    finally:
        rt.close()
        if server is not None:
            server.close()


if __name__ == "__main__":
    sys.exit(main())
