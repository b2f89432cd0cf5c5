/**
 * Browser bootstrap: connect, render on every change, delegate clicks.
 *
 * Usage: open index.html with `?port=NNNN` (and optionally `&host=`)
 * pointing at a harness started with --control-port NNNN. All state
 * and protocol logic lives in the tested modules; this file only
 * mounts them on the DOM.
 */
import { ConsoleClient } from "./console.js";
import type { Decision } from "./protocol.js";
import { renderConsole } from "./render.js";
import { WebSocketTransport } from "./ws.js";

function controlUrl(): string {
  const params = new URLSearchParams(window.location.search);
  const host = params.get("host") ?? "127.0.0.1";
  const port = params.get("port") ?? "9315";
  return `ws://${host}:${port}/`;
}

function mount(): void {
  const root = document.getElementById("app");
  if (root === null) {
    throw new Error("missing #app element");
  }
  const client = new ConsoleClient(() => new WebSocketTransport(controlUrl()));

  const redraw = (): void => {
    root.innerHTML = renderConsole(client.state);
  };
  client.onChange(redraw);
  redraw();

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement | null;
    if (target === null) {
      return;
    }
    const askId = target.getAttribute("data-ask-id");
    const decision = target.getAttribute("data-decision");
    if (askId !== null && decision !== null) {
      client.decide(askId, decision as Decision);
      return;
    }
    const agentId = target.getAttribute("data-inspect-agent");
    if (agentId !== null) {
      client.inspectSidechain(agentId).catch(() => {
        // The reply timeout already lands in state.notices.
      });
      return;
    }
    if (target.getAttribute("data-action") === "interrupt") {
      client.interrupt();
    }
  });

  root.addEventListener("submit", (event) => {
    const form = event.target as HTMLFormElement | null;
    if (form === null || form.getAttribute("data-form") !== "prompt") {
      return;
    }
    event.preventDefault();
    const input = form.elements.namedItem("prompt") as HTMLInputElement | null;
    if (input !== null && input.value.trim().length > 0) {
      client.prompt(input.value);
      input.value = "";
    }
  });

  client.connect().catch(() => {
    // Failure is already visible through the rendered connection state.
  });
}

mount();
