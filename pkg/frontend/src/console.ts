/**
 * Console client: one live session view over one transport.
 *
 * Connecting always asks the server to replay everything after the
 * highest seq already seen, so a first connect pulls the full backlog
 * and a reconnect resumes without gaps or duplicates. The only frames
 * the client ever sends are the whitelisted commands in `protocol.ts`;
 * of those, only decisions, prompts, and interrupts change harness
 * state, with replay and sidechain fetches read-only.
 */
import type { CommandFrame, Decision } from "./protocol.js";
import { decodeServerFrame, encodeCommand } from "./protocol.js";
import type { ConsoleState, SidechainView } from "./state.js";
import { applyFrame, initialState, markDecisionSent } from "./state.js";
import type { Transport, TransportFactory } from "./transport.js";

const SIDECHAIN_TIMEOUT_MS = 10_000;

interface SidechainWaiter {
  resolve: (view: SidechainView) => void;
  reject: (error: Error) => void;
  timer: ReturnType<typeof setTimeout>;
}

export class ConsoleClient {
  readonly state: ConsoleState = initialState();

  private transport: Transport | null = null;
  private readonly listeners: Array<() => void> = [];
  private readonly sidechainWaiters = new Map<string, SidechainWaiter[]>();
  private closing = false;

  constructor(private readonly transportFactory: TransportFactory) {}

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) {
      listener();
    }
  }

  /**
   * Open the transport and request the replay that fills the backlog.
   * Resolves once the connection is open; rejects if it fails first.
   */
  connect(): Promise<void> {
    if (this.state.connection === "open" || this.state.connection === "connecting") {
      return Promise.reject(new Error("already connected"));
    }
    this.closing = false;
    this.state.connection = "connecting";
    this.state.connectionError = null;
    this.notify();
    return new Promise((resolve, reject) => {
      let settled = false;
      const transport = this.transportFactory();
      this.transport = transport;
      transport.start({
        onOpen: () => {
          this.state.connection = "open";
          this.sendCommand({ type: "replay", after: this.state.lastSeq });
          this.notify();
          settled = true;
          resolve();
        },
        onFrameText: (text) => {
          this.handleFrameText(text);
        },
        onError: (message) => {
          this.state.connectionError = message;
          if (!settled) {
            this.state.connection = "failed";
            this.notify();
            settled = true;
            reject(new Error(message));
          } else {
            this.notify();
          }
        },
        onClose: () => {
          if (this.state.connection !== "failed") {
            this.state.connection = "closed";
          }
          this.failSidechainWaiters("connection closed");
          this.notify();
          if (!settled) {
            settled = true;
            reject(new Error(this.state.connectionError ?? "connection closed"));
          }
        },
      });
    });
  }

  close(): void {
    this.closing = true;
    this.transport?.close();
  }

  // --- commands ------------------------------------------------------------

  /** Answer a pending permission request. */
  decide(askId: string, decision: Decision): void {
    if (!this.state.pending.has(askId)) {
      throw new Error(`no pending ask: ${askId}`);
    }
    if (decision === "always_allow") {
      this.sendCommand({ type: "always_allow", askId });
    } else {
      this.sendCommand({ type: "permission_decision", askId, decision });
    }
    markDecisionSent(this.state, askId, decision);
    this.notify();
  }

  /** Submit the next user prompt to the session. */
  prompt(text: string): void {
    this.sendCommand({ type: "user_prompt", text });
  }

  /** Abort the turn in flight. */
  interrupt(): void {
    this.sendCommand({ type: "interrupt" });
  }

  /** Re-request broadcast frames newer than `after`. Read-only. */
  requestReplay(after: number): void {
    this.sendCommand({ type: "replay", after });
  }

  /**
   * Fetch a subagent's transcript for read-only display.
   * Resolves when the reply lands in the state.
   */
  inspectSidechain(sessionId: string): Promise<SidechainView> {
    const existing = this.state.sidechains.get(sessionId);
    if (existing !== undefined && existing.status !== "pending") {
      return Promise.resolve(existing);
    }
    this.state.sidechains.set(sessionId, { status: "pending", events: [] });
    this.sendCommand({ type: "sidechain_request", sessionId });
    this.notify();
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        this.dropSidechainWaiter(sessionId, waiter);
        reject(new Error(`sidechain request timed out: ${sessionId}`));
      }, SIDECHAIN_TIMEOUT_MS);
      const waiter: SidechainWaiter = { resolve, reject, timer };
      const waiters = this.sidechainWaiters.get(sessionId) ?? [];
      waiters.push(waiter);
      this.sidechainWaiters.set(sessionId, waiters);
    });
  }

  /** Resolve once `predicate(state)` holds; reject after `timeoutMs`. */
  waitFor(
    predicate: (state: ConsoleState) => boolean,
    timeoutMs: number,
    description = "condition",
  ): Promise<void> {
    if (predicate(this.state)) {
      return Promise.resolve();
    }
    return new Promise((resolve, reject) => {
      const timer = setTimeout(() => {
        reject(new Error(`timed out waiting for ${description}`));
      }, timeoutMs);
      this.onChange(() => {
        if (predicate(this.state)) {
          clearTimeout(timer);
          resolve();
        }
      });
    });
  }

  // --- internals ---------------------------------------------------------------

  private sendCommand(command: CommandFrame): void {
    if (this.transport === null || this.state.connection !== "open") {
      throw new Error("not connected");
    }
    this.transport.send(encodeCommand(command));
  }

  private handleFrameText(text: string): void {
    const result = decodeServerFrame(text);
    if (!result.ok) {
      this.state.notices.push(result.error);
      this.notify();
      return;
    }
    const frame = result.frame;
    const changed = applyFrame(this.state, frame);
    if (frame.type === "ack" && frame.for === "sidechain_request") {
      const sessionId = frame.sessionId ?? "";
      const view = this.state.sidechains.get(sessionId);
      if (view !== undefined) {
        for (const waiter of this.sidechainWaiters.get(sessionId) ?? []) {
          clearTimeout(waiter.timer);
          waiter.resolve(view);
        }
        this.sidechainWaiters.delete(sessionId);
      }
    }
    if (changed) {
      this.notify();
    }
  }

  private dropSidechainWaiter(sessionId: string, waiter: SidechainWaiter): void {
    const waiters = this.sidechainWaiters.get(sessionId) ?? [];
    const index = waiters.indexOf(waiter);
    if (index >= 0) {
      waiters.splice(index, 1);
    }
    if (waiters.length === 0) {
      this.sidechainWaiters.delete(sessionId);
    }
  }

  private failSidechainWaiters(reason: string): void {
    for (const waiters of this.sidechainWaiters.values()) {
      for (const waiter of waiters) {
        clearTimeout(waiter.timer);
        waiter.reject(new Error(reason));
      }
    }
    this.sidechainWaiters.clear();
  }
}
