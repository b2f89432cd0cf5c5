"""Stdio tool servers: newline-delimited JSON-RPC over a child process.

The exchange is the standard one: initialize request, initialized
notification, tools/list, then tools/call per invocation. A server that
fails to spawn or answer the handshake within the timeout contributes zero
tools and a notification; the session continues without it.
"""

from __future__ import annotations

import json
import os
import queue
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from .spec import Concurrency, ToolOrigin, ToolOutcome, ToolRequest, ToolSpec

__all__ = [
    "McpServerSpec",
    "McpError",
    "McpClient",
    "connect_servers",
    "make_router",
    "HANDSHAKE_TIMEOUT",
]

HANDSHAKE_TIMEOUT = 10.0


class McpError(Exception):
    pass


@dataclass(frozen=True)
class McpServerSpec:
    name: str
    command: str
    args: tuple[str, ...] = ()
    env: dict[str, str] = field(default_factory=dict)

    @staticmethod
    def from_config(name: str, entry: dict[str, Any]) -> "McpServerSpec":
        return McpServerSpec(
            name=name,
            command=entry["command"],
            args=tuple(entry.get("args", [])),
            env=dict(entry.get("env", {})),
        )


class McpClient:
    """One connected stdio server; thread-safe request/response by id."""

    def __init__(self, spec: McpServerSpec) -> None:
        self.spec = spec
        self._proc: subprocess.Popen | None = None
        self._responses: "queue.Queue[dict[str, Any]]" = queue.Queue()
        self._next_id = 0
        self._lock = threading.Lock()

    def connect(self, timeout: float = HANDSHAKE_TIMEOUT) -> list[ToolSpec]:
        env = {**os.environ, **self.spec.env}
        try:
            self._proc = subprocess.Popen(
                [self.spec.command, *self.spec.args],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                env=env,
            )
        except OSError as exc:
            raise McpError(f"spawn failed: {exc}") from exc
        threading.Thread(target=self._read_loop, daemon=True).start()
        init = self._request(
            "initialize",
            {
                "protocolVersion": "2024-11-05",
                "capabilities": {},
                "clientInfo": {"name": "harnesskit", "version": "0.1.0"},
            },
            timeout,
        )
        if "error" in init:
            raise McpError(f"initialize rejected: {init['error']}")
        self._notify("notifications/initialized", {})
        listing = self._request("tools/list", {}, timeout)
        if "error" in listing:
            raise McpError(f"tools/list rejected: {listing['error']}")
        tools: list[ToolSpec] = []
        for entry in listing.get("result", {}).get("tools", []):
            tools.append(
                ToolSpec(
                    name=f"mcp__{self.spec.name}__{entry['name']}",
                    description=entry.get("description", ""),
                    input_schema=entry.get("inputSchema", {"type": "object"}),
                    concurrency=Concurrency.EXCLUSIVE,
                    read_only=False,
                    origin=ToolOrigin.MCP,
                )
            )
        return tools

    def call_tool(
        self, tool: str, arguments: dict[str, Any], timeout: float = 60.0
    ) -> tuple[str, bool]:
        response = self._request(
            "tools/call", {"name": tool, "arguments": arguments}, timeout
        )
        if "error" in response:
            return str(response["error"].get("message", response["error"])), True
        result = response.get("result", {})
        parts = [
            c.get("text", "")
            for c in result.get("content", [])
            if c.get("type") == "text"
        ]
        return "\n".join(parts), bool(result.get("isError", False))

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()

    def _read_loop(self) -> None:
        assert self._proc is not None and self._proc.stdout is not None
        for line in self._proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                document = json.loads(line)
            except ValueError:
                continue
            if "id" in document:
                self._responses.put(document)

    def _send(self, document: dict[str, Any]) -> None:
        if self._proc is None or self._proc.stdin is None:
            raise McpError("server not connected")
        try:
            self._proc.stdin.write(json.dumps(document) + "\n")
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise McpError(f"write failed: {exc}") from exc

    def _notify(self, method: str, params: dict[str, Any]) -> None:
        self._send({"jsonrpc": "2.0", "method": method, "params": params})

    def _request(
        self, method: str, params: dict[str, Any], timeout: float
    ) -> dict[str, Any]:
        with self._lock:
            self._next_id += 1
            request_id = self._next_id
        self._send(
            {"jsonrpc": "2.0", "id": request_id, "method": method, "params": params}
        )
        deadline = timeout
        while True:
            try:
                document = self._responses.get(timeout=deadline)
            except queue.Empty:
                raise McpError(f"{method} timed out after {timeout:g}s") from None
            if document.get("id") == request_id:
                return document
            # A response to a different id: stale; keep waiting.


def connect_servers(
    config: dict[str, Any],
) -> tuple[list[ToolSpec], dict[str, McpClient], list[str]]:
    """Connect every configured server; failures degrade to notifications."""
    tools: list[ToolSpec] = []
    clients: dict[str, McpClient] = {}
    notifications: list[str] = []
    for name, entry in (config.get("mcpServers") or {}).items():
        spec = McpServerSpec.from_config(name, entry)
        client = McpClient(spec)
        try:
            tools.extend(client.connect())
            clients[name] = client
        except McpError as exc:
            client.close()
            notifications.append(f"mcp server {name} failed: {exc}")
    return tools, clients, notifications


def make_router(clients: dict[str, McpClient]) -> Callable[[ToolRequest], ToolOutcome]:
    """Route `mcp__server__tool` requests back over their stdio channel."""

    def route(req: ToolRequest) -> ToolOutcome:
        parts = req.tool_name.split("__", 2)
        if len(parts) != 3 or parts[0] != "mcp":
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"not an mcp tool: {req.tool_name}",
                is_error=True,
            )
        _, server, tool = parts
        client = clients.get(server)
        if client is None:
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id,
                content=f"mcp server not connected: {server}",
                is_error=True,
            )
        try:
            content, is_error = client.call_tool(tool, req.input)
        except McpError as exc:
            return ToolOutcome(
                for_tool_use_id=req.tool_use_id, content=str(exc), is_error=True
            )
        return ToolOutcome(
            for_tool_use_id=req.tool_use_id, content=content, is_error=is_error
        )

    return route
