/**
 * End-to-end acceptance: the console round-trip.
 *
 * One scripted session runs twice: once with approvals decided from an
 * attached console, once with the same decisions typed into a terminal
 * prompt. The console's backlog must equal the live transcript, and
 * after normalizing run-specific identifiers the two transcripts must
 * be identical, so console decisions are exactly terminal decisions.
 */
import { describe, expect, it } from "vitest";

import { ConsoleClient } from "../src/console.js";
import type { WireMessage } from "../src/protocol.js";
import type { ConsoleState } from "../src/state.js";
import { orderedMessages, pendingAskIds } from "../src/state.js";
import { TcpTransport } from "../src/tcp.js";
import {
  mainTranscript,
  makeProject,
  normalizeEvents,
  runTerminalSession,
  startSession,
} from "./harness.js";
import type { TranscriptEventRecord } from "../src/protocol.js";

const SCRIPT = [
  {
    blocks: [
      { type: "text", text: "checking first" },
      { type: "tool_use", id: "t1", name: "Bash", input: { command: "sh check.sh" } },
    ],
  },
  {
    blocks: [
      { type: "tool_use", id: "t2", name: "Bash", input: { command: "sh mutate.sh" } },
    ],
  },
  { text: "finished up" },
];

const PROJECT_FILES = {
  "check.sh": "echo check-ok\n",
  "mutate.sh": "echo would-mutate\n",
};

function doneCount(state: ConsoleState): number {
  return state.log.filter(
    (frame) => frame.type === "loop_event" && frame.event === "done",
  ).length;
}

function comparable(message: WireMessage): unknown {
  return {
    uuid: message.uuid,
    parent: message.parentUuid,
    timestamp: message.timestamp,
    role: message.role,
    sidechain: message.isSidechain,
    usage: message.usage,
    content: message.content,
  };
}

function transcriptComparable(event: TranscriptEventRecord): unknown {
  const message = event.message as WireMessage;
  return {
    uuid: event.uuid,
    parent: event.parentUuid,
    timestamp: event.timestamp,
    role: message.role,
    sidechain: message.isSidechain,
    usage: message.usage,
    content: message.content,
  };
}

function assertDecisionEffects(events: TranscriptEventRecord[]): void {
  const results = events
    .filter((event) => event.type === "message")
    .flatMap((event) => event.message?.content ?? [])
    .filter((block) => block.type === "tool_result");
  expect(results).toHaveLength(2);
  const allowed = results.find(
    (block) => block.type === "tool_result" && block.tool_use_id === "t1",
  );
  const denied = results.find(
    (block) => block.type === "tool_result" && block.tool_use_id === "t2",
  );
  if (allowed?.type !== "tool_result" || denied?.type !== "tool_result") {
    throw new Error("missing tool results");
  }
  expect(allowed.is_error).toBe(false);
  expect(allowed.content).toContain("check-ok");
  expect(denied.is_error).toBe(true);
  expect(denied.content.startsWith("permission denied")).toBe(true);
}

describe("console round-trip", () => {
  it("matches the transcript live and the terminal decisions exactly", async () => {
    const startedAt = Date.now();
    const project = makeProject(PROJECT_FILES);

    // Run one: decisions made from the attached console.
    const session = await startSession({ script: SCRIPT, projectDir: project });
    const client = new ConsoleClient(() => new TcpTransport("127.0.0.1", session.port));
    let consoleEvents: TranscriptEventRecord[];
    try {
      await client.connect();
      client.prompt("handle it");

      await client.waitFor((s) => s.pending.size === 1, 10_000, "first ask");
      const firstAsk = pendingAskIds(client.state)[0] ?? "";
      client.decide(firstAsk, "allow");
      await client.waitFor(
        (s) => s.pending.size === 1 && pendingAskIds(s)[0] !== firstAsk,
        10_000,
        "second ask",
      );
      client.decide(pendingAskIds(client.state)[0] ?? "", "deny");
      await client.waitFor((s) => doneCount(s) === 1, 10_000, "turn done");
      expect(client.state.doneReason).toBe("text_only");
      expect(client.state.pending.size).toBe(0);

      // Backlog equality: what the console holds is the transcript.
      consoleEvents = mainTranscript(session.home).events.filter(
        (event) => event.type === "message",
      );
      expect(orderedMessages(client.state).map(comparable)).toEqual(
        consoleEvents.map(transcriptComparable),
      );

      client.prompt("exit");
      expect(await session.exit).toBe(0);
    } finally {
      client.close();
      session.kill();
    }
    const consoleTranscript = mainTranscript(session.home).events;
    assertDecisionEffects(consoleTranscript);

    // Run two: the same decisions typed at the terminal.
    const terminal = await runTerminalSession({
      script: SCRIPT,
      projectDir: project,
      prompt: "handle it",
      answers: "y\nn\nexit\n",
    });
    expect(terminal.exitCode).toBe(0);
    const terminalTranscript = mainTranscript(terminal.home).events;
    assertDecisionEffects(terminalTranscript);

    // Oracle equality: identical decisions produce identical sessions.
    expect(normalizeEvents(consoleTranscript)).toEqual(
      normalizeEvents(terminalTranscript),
    );

    const elapsed = ((Date.now() - startedAt) / 1000).toFixed(2);
    console.log(
      `[acceptance] PASS console round-trip: backlog equaled the transcript ` +
        `(${consoleEvents.length} messages); console allow/deny matched the ` +
        `terminal run event for event (${elapsed}s)`,
    );
  });
});
