/**
 * WebSocket transport for browsers.
 *
 * The control listener upgrades connections whose first bytes look like
 * an HTTP GET, so `ws://host:port/` attaches directly. One WebSocket
 * message carries exactly one JSON frame, no newline delimiter.
 *
 * The socket is built through an injected factory so tests can supply
 * a fake and non-browser runtimes can pass their own implementation.
 */
import type { Transport, TransportHandlers } from "./transport.js";

/** Structural subset of the browser WebSocket the transport needs. */
export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "open", listener: () => void): void;
  addEventListener(type: "message", listener: (event: { data: unknown }) => void): void;
  addEventListener(type: "close", listener: () => void): void;
  addEventListener(type: "error", listener: (event: unknown) => void): void;
}

export type WebSocketFactory = (url: string) => WebSocketLike;

declare const WebSocket: { new (url: string): WebSocketLike } | undefined;

function defaultFactory(url: string): WebSocketLike {
  if (typeof WebSocket === "undefined") {
    throw new Error("no WebSocket implementation available");
  }
  return new WebSocket(url);
}

export class WebSocketTransport implements Transport {
  private socket: WebSocketLike | null = null;
  private opened = false;

  constructor(
    private readonly url: string,
    private readonly factory: WebSocketFactory = defaultFactory,
  ) {}

  start(handlers: TransportHandlers): void {
    let socket: WebSocketLike;
    try {
      socket = this.factory(this.url);
    } catch (exc) {
      handlers.onError((exc as Error).message);
      handlers.onClose();
      return;
    }
    this.socket = socket;
    socket.addEventListener("open", () => {
      this.opened = true;
      handlers.onOpen();
    });
    socket.addEventListener("message", (event) => {
      if (typeof event.data === "string") {
        handlers.onFrameText(event.data);
      }
    });
    socket.addEventListener("error", () => {
      handlers.onError(`websocket error for ${this.url}`);
    });
    socket.addEventListener("close", () => {
      handlers.onClose();
    });
  }

  send(frameText: string): void {
    if (this.socket === null || !this.opened) {
      throw new Error("transport is not open");
    }
    this.socket.send(frameText);
  }

  close(): void {
    this.socket?.close();
  }
}
