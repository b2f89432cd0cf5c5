"""Loopback control channel for external harness clients.

One TCP listener speaks two framings: newline-delimited JSON, and a
minimal WebSocket upgrade for browser clients. Every outbound frame
carries a monotonically increasing ``seq`` so reconnecting clients can
replay what they missed with ``{"type": "replay", "after": n}``.
"""
from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import struct
import sys
import threading
from typing import Any, Optional

from .loop import LoopEvent, LoopEventKind, PermissionAsk
from .model import Message, message_payload, new_uuid
from .persistence import find_transcript, projects_root, read_events

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
ASK_TIMEOUT = 30.0

OUT_FRAME_TYPES = (
    "loop_event",
    "permission_request",
    "context_stats",
    "subagent_update",
    "ack",
    "error",
)

IN_FRAME_TYPES = (
    "permission_decision",
    "user_prompt",
    "interrupt",
    "always_allow",
    "replay",
    "sidechain_request",
)


def _jsonable(value: Any) -> Any:
    if isinstance(value, Message):
        wire = message_payload(value)
        wire["uuid"] = value.uuid
        wire["parentUuid"] = value.parent_uuid
        wire["timestamp"] = value.timestamp
        return wire
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


class _Client:
    def __init__(self, sock: socket.socket, websocket: bool) -> None:
        self.sock = sock
        self.websocket = websocket
        self.lock = threading.Lock()
        self.alive = True

    def send_text(self, text: str) -> None:
        data = text.encode("utf-8")
        if self.websocket:
            header = bytearray([0x81])
            n = len(data)
            if n < 126:
                header.append(n)
            elif n < 65536:
                header.append(126)
                header += struct.pack(">H", n)
            else:
                header.append(127)
                header += struct.pack(">Q", n)
            payload = bytes(header) + data
        else:
            payload = data + b"\n"
        with self.lock:
            self.sock.sendall(payload)

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.close()
        except OSError:
            pass


class _PendingAsk:
    def __init__(self) -> None:
        self.event = threading.Event()
        self.answer = "deny"


class ControlServer:
    """Fan-out publisher plus inbound command handling."""

    def __init__(
        self,
        port: int = 0,
        host: str = "127.0.0.1",
        ask_timeout: float = ASK_TIMEOUT,
        home: Optional[Any] = None,
    ) -> None:
        self.host = host
        self.ask_timeout = ask_timeout
        self.home = home
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.port = self._listener.getsockname()[1]
        self._clients: list[_Client] = []
        self._frames: list[dict[str, Any]] = []
        self._seq = 0
        self._state_lock = threading.Lock()
        self._pending_asks: dict[str, _PendingAsk] = {}
        self.prompts: "queue.Queue[str]" = queue.Queue()
        self.abort_event = threading.Event()
        self._closed = False
        self._accept_thread: Optional[threading.Thread] = None

    # --- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        print(f"control listening on {self.host}:{self.port}", file=sys.stderr)

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._state_lock:
            clients = list(self._clients)
        for client in clients:
            client.close()

    def has_clients(self) -> bool:
        with self._state_lock:
            return any(c.alive for c in self._clients)

    # --- outbound ----------------------------------------------------------

    def broadcast(self, frame_type: str, payload: dict[str, Any]) -> int:
        if frame_type not in OUT_FRAME_TYPES:
            raise ValueError(f"unknown out frame type: {frame_type}")
        with self._state_lock:
            self._seq += 1
            frame = {"type": frame_type, "seq": self._seq, **_jsonable(payload)}
            self._frames.append(frame)
            clients = list(self._clients)
            seq = self._seq
        text = json.dumps(frame, ensure_ascii=False, separators=(",", ":"))
        for client in clients:
            try:
                client.send_text(text)
            except OSError:
                self._drop(client)
        return seq

    def publish_loop_event(self, event: LoopEvent) -> None:
        payload = event.payload
        if event.kind is LoopEventKind.NOTIFICATION:
            kind = payload.get("kind")
            if kind == "context_stats":
                self.broadcast(
                    "context_stats",
                    {k: v for k, v in payload.items() if k != "kind"},
                )
                return
            if kind == "subagent_update":
                self.broadcast(
                    "subagent_update",
                    {k: v for k, v in payload.items() if k != "kind"},
                )
                return
        self.broadcast(
            "loop_event", {"event": event.kind.value, "payload": payload}
        )

    # --- permission asks -----------------------------------------------------

    def resolve_ask(self, ask: PermissionAsk) -> str:
        """Blocking resolver handed to the turn loop; timeout denies."""
        ask_id = new_uuid()
        pending = _PendingAsk()
        with self._state_lock:
            self._pending_asks[ask_id] = pending
        self.broadcast(
            "permission_request",
            {
                "askId": ask_id,
                "toolName": ask.request.tool_name,
                "toolUseId": ask.request.tool_use_id,
                "toolInput": ask.request.input,
                "reason": ask.reason,
                "layer": ask.layer,
                "sessionId": ask.session_id,
                "fromSubagent": ask.from_subagent,
            },
        )
        answered = pending.event.wait(self.ask_timeout)
        with self._state_lock:
            self._pending_asks.pop(ask_id, None)
        if not answered:
            self.broadcast(
                "error",
                {"message": f"ask {ask_id} timed out after {self.ask_timeout:g}s; denied"},
            )
            return "deny"
        return pending.answer

    # --- inbound --------------------------------------------------------------

    def _handle_frame(self, client: _Client, raw: str) -> None:
        try:
            frame = json.loads(raw)
        except json.JSONDecodeError as exc:
            self._send_error(client, f"invalid JSON: {exc}")
            return
        ftype = frame.get("type")
        if ftype == "permission_decision" or ftype == "always_allow":
            ask_id = frame.get("askId", "")
            decision = (
                "always_allow"
                if ftype == "always_allow"
                else frame.get("decision", "deny")
            )
            if decision not in ("allow", "deny", "always_allow"):
                self._send_error(client, f"bad decision: {decision}")
                return
            with self._state_lock:
                pending = self._pending_asks.get(ask_id)
            if pending is None:
                self._send_error(client, f"unknown askId: {ask_id}")
                return
            pending.answer = decision
            pending.event.set()
            self.broadcast("ack", {"for": ftype, "askId": ask_id, "decision": decision})
        elif ftype == "user_prompt":
            text = str(frame.get("text", ""))
            self.prompts.put(text)
            self.broadcast("ack", {"for": "user_prompt"})
        elif ftype == "interrupt":
            self.abort_event.set()
            self.broadcast("ack", {"for": "interrupt"})
        elif ftype == "replay":
            after = int(frame.get("after", 0))
            with self._state_lock:
                missed = [f for f in self._frames if f["seq"] > after]
            for f in missed:
                try:
                    client.send_text(
                        json.dumps(f, ensure_ascii=False, separators=(",", ":"))
                    )
                except OSError:
                    self._drop(client)
                    return
        elif ftype == "sidechain_request":
            session_id = str(frame.get("sessionId", ""))
            lines: list[str] = []
            path = find_transcript(session_id, projects_root(self.home))
            if path is not None:
                events, _ = read_events(path)
                lines = [e.serialize() for e in events]
            reply = {
                "for": "sidechain_request",
                "sessionId": session_id,
                "found": path is not None,
                "lines": lines,
            }
            try:
                client.send_text(
                    json.dumps(
                        {"type": "ack", "seq": 0, **reply},
                        ensure_ascii=False,
                        separators=(",", ":"),
                    )
                )
            except OSError:
                self._drop(client)
        else:
            self._send_error(client, f"unknown frame type: {ftype!r}")

    def _send_error(self, client: _Client, message: str) -> None:
        try:
            client.send_text(
                json.dumps(
                    {"type": "error", "seq": 0, "message": message},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
        except OSError:
            self._drop(client)

    # --- connection plumbing -----------------------------------------------------

    def _drop(self, client: _Client) -> None:
        client.close()
        with self._state_lock:
            if client in self._clients:
                self._clients.remove(client)

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_connection, args=(sock,), daemon=True
            ).start()

    def _serve_connection(self, sock: socket.socket) -> None:
        try:
            first = sock.recv(4, socket.MSG_PEEK)
        except OSError:
            sock.close()
            return
        websocket = first.startswith(b"GET ")
        if websocket and not self._upgrade_websocket(sock):
            sock.close()
            return
        client = _Client(sock, websocket)
        with self._state_lock:
            self._clients.append(client)
        try:
            if websocket:
                self._read_websocket(client)
            else:
                self._read_jsonl(client)
        finally:
            self._drop(client)

    def _read_jsonl(self, client: _Client) -> None:
        buffer = b""
        while client.alive:
            try:
                chunk = client.sock.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            buffer += chunk
            while b"\n" in buffer:
                line, buffer = buffer.split(b"\n", 1)
                if line.strip():
                    self._handle_frame(client, line.decode("utf-8", "replace"))

    # --- websocket details ----------------------------------------------------

    def _upgrade_websocket(self, sock: socket.socket) -> bool:
        data = b""
        while b"\r\n\r\n" not in data:
            try:
                chunk = sock.recv(65536)
            except OSError:
                return False
            if not chunk:
                return False
            data += chunk
            if len(data) > 65536:
                return False
        head = data.split(b"\r\n\r\n", 1)[0].decode("utf-8", "replace")
        key = ""
        for line in head.split("\r\n")[1:]:
            name, _, value = line.partition(":")
            if name.strip().lower() == "sec-websocket-key":
                key = value.strip()
        if not key:
            return False
        accept = base64.b64encode(
            hashlib.sha1((key + WS_GUID).encode("ascii")).digest()
        ).decode("ascii")
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n"
            "\r\n"
        )
        try:
            sock.sendall(response.encode("ascii"))
        except OSError:
            return False
        return True

    def _read_exact(self, sock: socket.socket, n: int) -> Optional[bytes]:
        data = b""
        while len(data) < n:
            try:
                chunk = sock.recv(n - len(data))
            except OSError:
                return None
            if not chunk:
                return None
            data += chunk
        return data

    def _read_websocket(self, client: _Client) -> None:
        sock = client.sock
        message = b""
        while client.alive:
            header = self._read_exact(sock, 2)
            if header is None:
                return
            fin = header[0] & 0x80
            opcode = header[0] & 0x0F
            masked = header[1] & 0x80
            length = header[1] & 0x7F
            if length == 126:
                ext = self._read_exact(sock, 2)
                if ext is None:
                    return
                length = struct.unpack(">H", ext)[0]
            elif length == 127:
                ext = self._read_exact(sock, 8)
                if ext is None:
                    return
                length = struct.unpack(">Q", ext)[0]
            mask = b"\x00\x00\x00\x00"
            if masked:
                got = self._read_exact(sock, 4)
                if got is None:
                    return
                mask = got
            payload = self._read_exact(sock, length) if length else b""
            if payload is None:
                return
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:
                return
            if opcode == 0x9:
                with client.lock:
                    try:
                        sock.sendall(b"\x8a" + bytes([len(payload)]) + payload)
                    except OSError:
                        return
                continue
            if opcode in (0x1, 0x0):
                message += payload
                if fin:
                    self._handle_frame(client, message.decode("utf-8", "replace"))
                    message = b""
