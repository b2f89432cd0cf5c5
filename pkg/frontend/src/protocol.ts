/**
 * Control-channel frame schema.
 *
 * The harness exposes one loopback listener speaking newline-delimited
 * JSON (and a WebSocket upgrade for browsers). Every broadcast frame
 * carries a monotonically increasing `seq`; direct replies to a single
 * client carry `seq: 0`. The console sends only the command frames
 * defined here and nothing else.
 */

export type Decision = "allow" | "deny" | "always_allow";

export const DECISIONS: readonly Decision[] = ["allow", "deny", "always_allow"];

/** Client-to-server commands. This list is the full send surface. */
export type CommandFrame =
  | { type: "permission_decision"; askId: string; decision: Decision }
  | { type: "always_allow"; askId: string }
  | { type: "user_prompt"; text: string }
  | { type: "interrupt" }
  | { type: "replay"; after: number }
  | { type: "sidechain_request"; sessionId: string };

export const COMMAND_FRAME_TYPES: readonly string[] = [
  "permission_decision",
  "always_allow",
  "user_prompt",
  "interrupt",
  "replay",
  "sidechain_request",
];

/** Commands that change harness state; the rest are read-only. */
export const MUTATING_COMMAND_TYPES: readonly string[] = [
  "permission_decision",
  "always_allow",
  "user_prompt",
  "interrupt",
];

// --- server frames ----------------------------------------------------------

export interface LoopEventFrame {
  type: "loop_event";
  seq: number;
  event: string;
  payload: Record<string, unknown>;
}

export interface PermissionRequestFrame {
  type: "permission_request";
  seq: number;
  askId: string;
  toolName: string;
  toolUseId: string;
  toolInput: Record<string, unknown>;
  reason: string;
  layer: string;
  sessionId: string;
  fromSubagent: boolean;
}

export interface ContextStatsFrame {
  type: "context_stats";
  seq: number;
  message?: string;
  estimate: number;
  window: number;
  trace: string[];
}

export interface SubagentUpdateFrame {
  type: "subagent_update";
  seq: number;
  message?: string;
  agentId: string;
  agentType: string;
  status: "started" | "finished";
  stopReason?: string;
}

export interface AckFrame {
  type: "ack";
  seq: number;
  for: string;
  askId?: string;
  decision?: Decision;
  sessionId?: string;
  found?: boolean;
  lines?: string[];
}

export interface ErrorFrame {
  type: "error";
  seq: number;
  message: string;
}

export type ServerFrame =
  | LoopEventFrame
  | PermissionRequestFrame
  | ContextStatsFrame
  | SubagentUpdateFrame
  | AckFrame
  | ErrorFrame;

export const SERVER_FRAME_TYPES: readonly string[] = [
  "loop_event",
  "permission_request",
  "context_stats",
  "subagent_update",
  "ack",
  "error",
];

// --- message wire form --------------------------------------------------------

export interface WireUsage {
  input_tokens: number;
  output_tokens: number;
}

export type WireBlock =
  | { type: "text"; text: string }
  | { type: "thinking"; text: string }
  | { type: "tool_use"; id: string; name: string; input: Record<string, unknown> }
  | { type: "tool_result"; tool_use_id: string; content: string; is_error: boolean };

/** A message as it appears inside loop_event payloads and transcripts. */
export interface WireMessage {
  role: string;
  isSidechain: boolean;
  usage: WireUsage | null;
  content: WireBlock[];
  uuid?: string;
  parentUuid?: string | null;
  timestamp?: string;
}

/** One line of a persisted session transcript. */
export interface TranscriptEventRecord {
  type: string;
  uuid: string;
  parentUuid: string | null;
  timestamp: string;
  sessionId: string;
  message?: WireMessage;
  [key: string]: unknown;
}

// --- encode / decode ----------------------------------------------------------

export class ProtocolError extends Error {}

/** Serialize a command for the wire. Refuses anything off the whitelist. */
export function encodeCommand(command: CommandFrame): string {
  if (!COMMAND_FRAME_TYPES.includes(command.type)) {
    throw new ProtocolError(`not a command frame type: ${String(command.type)}`);
  }
  return JSON.stringify(command);
}

export type DecodeResult =
  | { ok: true; frame: ServerFrame }
  | { ok: false; error: string };

function isRecord(value: unknown): value is Record<string, unknown> {
  return typeof value === "object" && value !== null && !Array.isArray(value);
}

function str(value: unknown): string {
  return typeof value === "string" ? value : "";
}

/** Parse one frame of server output. Never throws on bad input. */
export function decodeServerFrame(text: string): DecodeResult {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (exc) {
    return { ok: false, error: `invalid JSON: ${(exc as Error).message}` };
  }
  if (!isRecord(raw)) {
    return { ok: false, error: "frame is not an object" };
  }
  const type = raw["type"];
  if (typeof type !== "string" || !SERVER_FRAME_TYPES.includes(type)) {
    return { ok: false, error: `unknown frame type: ${String(type)}` };
  }
  const seq = typeof raw["seq"] === "number" ? raw["seq"] : 0;
  switch (type) {
    case "loop_event": {
      if (typeof raw["event"] !== "string" || !isRecord(raw["payload"])) {
        return { ok: false, error: "malformed loop_event frame" };
      }
      return {
        ok: true,
        frame: { type, seq, event: raw["event"], payload: raw["payload"] },
      };
    }
    case "permission_request": {
      if (typeof raw["askId"] !== "string" || typeof raw["toolName"] !== "string") {
        return { ok: false, error: "malformed permission_request frame" };
      }
      return {
        ok: true,
        frame: {
          type,
          seq,
          askId: raw["askId"],
          toolName: raw["toolName"],
          toolUseId: str(raw["toolUseId"]),
          toolInput: isRecord(raw["toolInput"]) ? raw["toolInput"] : {},
          reason: str(raw["reason"]),
          layer: str(raw["layer"]),
          sessionId: str(raw["sessionId"]),
          fromSubagent: raw["fromSubagent"] === true,
        },
      };
    }
    case "context_stats": {
      if (typeof raw["estimate"] !== "number" || typeof raw["window"] !== "number") {
        return { ok: false, error: "malformed context_stats frame" };
      }
      const trace = Array.isArray(raw["trace"])
        ? raw["trace"].filter((t): t is string => typeof t === "string")
        : [];
      return {
        ok: true,
        frame: {
          type,
          seq,
          message: str(raw["message"]) || undefined,
          estimate: raw["estimate"],
          window: raw["window"],
          trace,
        },
      };
    }
    case "subagent_update": {
      if (typeof raw["agentId"] !== "string" || typeof raw["agentType"] !== "string") {
        return { ok: false, error: "malformed subagent_update frame" };
      }
      const status = raw["status"] === "finished" ? "finished" : "started";
      return {
        ok: true,
        frame: {
          type,
          seq,
          message: str(raw["message"]) || undefined,
          agentId: raw["agentId"],
          agentType: raw["agentType"],
          status,
          stopReason: typeof raw["stopReason"] === "string" ? raw["stopReason"] : undefined,
        },
      };
    }
    case "ack": {
      if (typeof raw["for"] !== "string") {
        return { ok: false, error: "malformed ack frame" };
      }
      const decision = raw["decision"];
      return {
        ok: true,
        frame: {
          type,
          seq,
          for: raw["for"],
          askId: typeof raw["askId"] === "string" ? raw["askId"] : undefined,
          decision: DECISIONS.includes(decision as Decision)
            ? (decision as Decision)
            : undefined,
          sessionId: typeof raw["sessionId"] === "string" ? raw["sessionId"] : undefined,
          found: typeof raw["found"] === "boolean" ? raw["found"] : undefined,
          lines: Array.isArray(raw["lines"])
            ? raw["lines"].filter((l): l is string => typeof l === "string")
            : undefined,
        },
      };
    }
    case "error": {
      return { ok: true, frame: { type, seq, message: str(raw["message"]) } };
    }
  }
  return { ok: false, error: `unknown frame type: ${type}` };
}

/** Parse one persisted transcript line. Throws on malformed lines. */
export function parseTranscriptLine(line: string): TranscriptEventRecord {
  const raw = JSON.parse(line) as unknown;
  if (!isRecord(raw) || typeof raw["type"] !== "string") {
    throw new ProtocolError("transcript line is not an event record");
  }
  return raw as TranscriptEventRecord;
}

/** The message carried by a loop_event, if it is a message event. */
export function messageOf(frame: LoopEventFrame): WireMessage | null {
  if (frame.event !== "message") {
    return null;
  }
  const message = frame.payload["message"];
  if (!isRecord(message) || typeof message["role"] !== "string") {
    return null;
  }
  return message as unknown as WireMessage;
}
