/**
 * HTML rendering of the console state.
 *
 * Pure string building so it can run and be tested anywhere; the
 * browser entry point owns mounting and event delegation. Buttons
 * carry data attributes (`data-decision`, `data-ask-id`,
 * `data-inspect-agent`) instead of inline handlers. Everything is a
 * read-only view except the decision buttons and the prompt form.
 */
import type { ServerFrame, WireBlock, WireMessage } from "./protocol.js";
import { messageOf } from "./protocol.js";
import type { ConsoleState, PendingAsk, SidechainView } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;")
    .replaceAll("'", "&#39;");
}

function compactJson(value: unknown): string {
  const text = JSON.stringify(value);
  return text.length > 400 ? text.slice(0, 400) + "…" : text;
}

function renderBlock(block: WireBlock): string {
  switch (block.type) {
    case "text":
      return `<p class="block-text">${escapeHtml(block.text)}</p>`;
    case "thinking":
      return `<p class="block-thinking">${escapeHtml(block.text)}</p>`;
    case "tool_use":
      return (
        `<div class="block-tool-use"><code>${escapeHtml(block.name)}</code>` +
        ` <span class="tool-input">${escapeHtml(compactJson(block.input))}</span></div>`
      );
    case "tool_result": {
      const errorClass = block.is_error ? " is-error" : "";
      return (
        `<pre class="block-tool-result${errorClass}">` +
        `${escapeHtml(block.content)}</pre>`
      );
    }
  }
}

export function renderMessage(message: WireMessage): string {
  const blocks = message.content.map(renderBlock).join("");
  const sidechain = message.isSidechain ? " sidechain" : "";
  return (
    `<article class="message role-${escapeHtml(message.role)}${sidechain}">` +
    `<header>${escapeHtml(message.role)}</header>${blocks}</article>`
  );
}

function renderLogEntry(frame: ServerFrame): string {
  switch (frame.type) {
    case "loop_event": {
      const message = messageOf(frame);
      if (message !== null) {
        return renderMessage(message);
      }
      if (frame.event === "tool_use_summary") {
        const name = String(frame.payload["toolName"] ?? "");
        const status = frame.payload["isError"] === true ? "error" : "ok";
        return `<p class="line tool">[tool] ${escapeHtml(name)} ${status}</p>`;
      }
      if (frame.event === "notification") {
        const note = String(frame.payload["message"] ?? "");
        return `<p class="line note">[note] ${escapeHtml(note)}</p>`;
      }
      if (frame.event === "tombstone") {
        const reason = String(frame.payload["reason"] ?? "");
        return `<p class="line tombstone">[aborted] ${escapeHtml(reason)}</p>`;
      }
      if (frame.event === "done") {
        const reason = String(frame.payload["reason"] ?? "");
        return `<p class="line done">done: ${escapeHtml(reason)}</p>`;
      }
      return "";
    }
    case "permission_request":
      return (
        `<p class="line ask">[ask] ${escapeHtml(frame.toolName)} ` +
        `${escapeHtml(compactJson(frame.toolInput))}</p>`
      );
    case "ack":
      if (frame.for === "permission_decision" || frame.for === "always_allow") {
        return (
          `<p class="line ack">[decision] ${escapeHtml(frame.askId ?? "")} ` +
          `${escapeHtml(frame.decision ?? "")}</p>`
        );
      }
      return "";
    case "error":
      return `<p class="line error">[error] ${escapeHtml(frame.message)}</p>`;
    case "context_stats":
    case "subagent_update":
      return "";
  }
}

function renderApproval(entry: PendingAsk): string {
  const frame = entry.frame;
  const origin = frame.fromSubagent ? " (from subagent)" : "";
  const sent =
    entry.sentDecision !== null
      ? `<em class="sent">sent: ${escapeHtml(entry.sentDecision)}</em>`
      : "";
  const buttons = (["allow", "deny", "always_allow"] as const)
    .map(
      (decision) =>
        `<button data-ask-id="${escapeHtml(frame.askId)}" ` +
        `data-decision="${decision}">${decision.replace("_", " ")}</button>`,
    )
    .join("");
  return (
    `<li class="approval" data-ask="${escapeHtml(frame.askId)}">` +
    `<div class="ask-head"><code>${escapeHtml(frame.toolName)}</code>${origin}</div>` +
    `<pre class="ask-input">${escapeHtml(compactJson(frame.toolInput))}</pre>` +
    `<div class="ask-reason">${escapeHtml(frame.reason)}` +
    ` <span class="ask-layer">[${escapeHtml(frame.layer)}]</span></div>` +
    `<div class="ask-actions">${buttons}${sent}</div></li>`
  );
}

function renderGauge(state: ConsoleState): string {
  const { estimate, window, trace } = state.gauge;
  if (estimate === null || window === null || window <= 0) {
    return `<p class="gauge-empty">no context stats yet</p>`;
  }
  const percent = Math.min(100, Math.round((estimate / window) * 100));
  const traceText = trace.length > 0 ? trace.join(" → ") : "none";
  return (
    `<div class="gauge-bar"><div class="gauge-fill" style="width:${percent}%"></div></div>` +
    `<p class="gauge-text">${estimate} / ${window} tokens (${percent}%)</p>` +
    `<p class="gauge-trace">shapers: ${escapeHtml(traceText)}</p>`
  );
}

function renderAgents(state: ConsoleState): string {
  if (state.agents.size === 0) {
    return `<p class="agents-empty">no subagents</p>`;
  }
  const rows = [...state.agents.values()]
    .map((agent) => {
      const reason =
        agent.stopReason !== undefined
          ? ` <span class="stop">(${escapeHtml(agent.stopReason)})</span>`
          : "";
      return (
        `<li class="agent status-${agent.status}">` +
        `<code>${escapeHtml(agent.agentType)}</code> ${escapeHtml(agent.agentId)} ` +
        `${agent.status}${reason} ` +
        `<button data-inspect-agent="${escapeHtml(agent.agentId)}">inspect</button></li>`
      );
    })
    .join("");
  return `<ul class="agent-list">${rows}</ul>`;
}

function renderSidechain(sessionId: string, view: SidechainView): string {
  if (view.status === "pending") {
    return `<p class="sidechain-pending">loading ${escapeHtml(sessionId)}…</p>`;
  }
  if (view.status === "not_found") {
    return `<p class="sidechain-missing">no transcript for ${escapeHtml(sessionId)}</p>`;
  }
  const messages = view.events
    .filter((event) => event.type === "message" && event.message !== undefined)
    .map((event) => renderMessage(event.message as WireMessage))
    .join("");
  const body = messages || `<p class="sidechain-empty">empty sidechain</p>`;
  return (
    `<section class="sidechain" data-sidechain="${escapeHtml(sessionId)}">` +
    `<h3>${escapeHtml(sessionId)}</h3>${body}</section>`
  );
}

export function renderConsole(state: ConsoleState): string {
  const statusClass = `status-${state.connection}`;
  const error =
    state.connectionError !== null
      ? `<span class="conn-error">${escapeHtml(state.connectionError)}</span>`
      : "";
  const approvals =
    state.pending.size > 0
      ? `<ul class="approval-list">${[...state.pending.values()]
          .map(renderApproval)
          .join("")}</ul>`
      : `<p class="approvals-empty">nothing waiting</p>`;
  const log = state.log.map(renderLogEntry).filter((html) => html !== "").join("");
  const sidechains = [...state.sidechains.entries()]
    .map(([sessionId, view]) => renderSidechain(sessionId, view))
    .join("");
  const notices = state.notices
    .map((notice) => `<li>${escapeHtml(notice)}</li>`)
    .join("");
  const done =
    state.doneReason !== null
      ? `<p class="done-banner">turn done: ${escapeHtml(state.doneReason)}</p>`
      : "";
  return `<div class="console">
<header class="top ${statusClass}">
  <span class="conn">${escapeHtml(state.connection)}</span>${error}
  <button data-action="interrupt">interrupt</button>
</header>
<section class="panel gauge"><h2>context</h2>${renderGauge(state)}</section>
<section class="panel approvals"><h2>approvals</h2>${approvals}</section>
<section class="panel log"><h2>session</h2>${done}<div class="log-body">${log}</div></section>
<section class="panel agents"><h2>subagents</h2>${renderAgents(state)}</section>
<section class="panel sidechains"><h2>sidechains</h2>${sidechains}</section>
<section class="panel notices"><h2>notices</h2><ul>${notices}</ul></section>
<form class="prompt-form" data-form="prompt">
  <input name="prompt" placeholder="next prompt" autocomplete="off">
  <button type="submit">send</button>
</form>
</div>`;
}
