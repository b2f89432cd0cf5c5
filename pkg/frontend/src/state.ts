/**
 * Console state and the reducer that applies server frames to it.
 *
 * The state mirrors the session as seen over the control channel: an
 * ordered event log keyed by seq, the queue of unanswered permission
 * requests, the context gauge, and the subagent tree. Frames can arrive
 * out of order around a reconnect replay, so the log inserts by seq and
 * drops duplicates instead of trusting arrival order.
 */
import type {
  AckFrame,
  Decision,
  PermissionRequestFrame,
  ServerFrame,
  TranscriptEventRecord,
  WireMessage,
} from "./protocol.js";
import { messageOf, parseTranscriptLine } from "./protocol.js";

export type ConnectionStatus =
  | "idle"
  | "connecting"
  | "open"
  | "closed"
  | "failed";

export interface ContextGauge {
  estimate: number | null;
  window: number | null;
  trace: string[];
}

export interface AgentNode {
  agentId: string;
  agentType: string;
  status: "started" | "finished";
  stopReason?: string;
}

export interface SidechainView {
  status: "pending" | "loaded" | "not_found";
  events: TranscriptEventRecord[];
}

export interface PendingAsk {
  frame: PermissionRequestFrame;
  /** Decision sent but not yet acknowledged by the server. */
  sentDecision: Decision | null;
}

export interface ConsoleState {
  connection: ConnectionStatus;
  connectionError: string | null;
  /** Broadcast frames ordered by seq, without duplicates. */
  log: ServerFrame[];
  seenSeqs: Set<number>;
  lastSeq: number;
  pending: Map<string, PendingAsk>;
  gauge: ContextGauge;
  agents: Map<string, AgentNode>;
  sidechains: Map<string, SidechainView>;
  notices: string[];
  doneReason: string | null;
}

export function initialState(): ConsoleState {
  return {
    connection: "idle",
    connectionError: null,
    log: [],
    seenSeqs: new Set(),
    lastSeq: 0,
    pending: new Map(),
    gauge: { estimate: null, window: null, trace: [] },
    agents: new Map(),
    sidechains: new Map(),
    notices: [],
    doneReason: null,
  };
}

const ASK_TIMEOUT_PATTERN = /^ask (\S+) timed out after .*; denied$/;

function insertBySeq(log: ServerFrame[], frame: ServerFrame): void {
  let index = log.length;
  while (index > 0) {
    const previous = log[index - 1];
    if (previous !== undefined && previous.seq <= frame.seq) {
      break;
    }
    index -= 1;
  }
  log.splice(index, 0, frame);
}

function applyAck(state: ConsoleState, frame: AckFrame): void {
  if (frame.for === "permission_decision" || frame.for === "always_allow") {
    if (frame.askId !== undefined) {
      state.pending.delete(frame.askId);
    }
    return;
  }
  if (frame.for === "sidechain_request" && frame.sessionId !== undefined) {
    const events: TranscriptEventRecord[] = [];
    for (const line of frame.lines ?? []) {
      try {
        events.push(parseTranscriptLine(line));
      } catch {
        state.notices.push(`unparseable sidechain line for ${frame.sessionId}`);
      }
    }
    state.sidechains.set(frame.sessionId, {
      status: frame.found === true ? "loaded" : "not_found",
      events,
    });
  }
}

/**
 * Fold one decoded server frame into the state.
 *
 * Returns false when the frame was a duplicate of an already seen seq
 * and changed nothing.
 */
export function applyFrame(state: ConsoleState, frame: ServerFrame): boolean {
  if (frame.seq > 0) {
    if (state.seenSeqs.has(frame.seq)) {
      return false;
    }
    state.seenSeqs.add(frame.seq);
    insertBySeq(state.log, frame);
    if (frame.seq > state.lastSeq) {
      state.lastSeq = frame.seq;
    }
  }
  switch (frame.type) {
    case "permission_request":
      state.pending.set(frame.askId, { frame, sentDecision: null });
      break;
    case "ack":
      applyAck(state, frame);
      break;
    case "error": {
      state.notices.push(frame.message);
      const timeout = ASK_TIMEOUT_PATTERN.exec(frame.message);
      const timedOutAskId = timeout?.[1];
      if (timedOutAskId !== undefined) {
        // The server already denied it; the queue must not keep it.
        state.pending.delete(timedOutAskId);
      }
      break;
    }
    case "context_stats":
      state.gauge = {
        estimate: frame.estimate,
        window: frame.window,
        trace: [...frame.trace],
      };
      break;
    case "subagent_update":
      state.agents.set(frame.agentId, {
        agentId: frame.agentId,
        agentType: frame.agentType,
        status: frame.status,
        ...(frame.stopReason !== undefined ? { stopReason: frame.stopReason } : {}),
      });
      break;
    case "loop_event":
      if (frame.event === "done") {
        const reason = frame.payload["reason"];
        state.doneReason = typeof reason === "string" ? reason : null;
      }
      break;
  }
  return true;
}

/** Record that a decision went out for an ask, pending the server's ack. */
export function markDecisionSent(
  state: ConsoleState,
  askId: string,
  decision: Decision,
): void {
  const entry = state.pending.get(askId);
  if (entry !== undefined) {
    entry.sentDecision = decision;
  }
}

/** Unanswered ask ids in arrival order. */
export function pendingAskIds(state: ConsoleState): string[] {
  return [...state.pending.keys()];
}

/** Conversation messages in seq order, as carried by message loop events. */
export function orderedMessages(state: ConsoleState): WireMessage[] {
  const messages: WireMessage[] = [];
  for (const frame of state.log) {
    if (frame.type === "loop_event") {
      const message = messageOf(frame);
      if (message !== null) {
        messages.push(message);
      }
    }
  }
  return messages;
}

/** Seqs present in the log, ascending. Gap-free when nothing was missed. */
export function seenSeqList(state: ConsoleState): number[] {
  return state.log.map((frame) => frame.seq);
}
