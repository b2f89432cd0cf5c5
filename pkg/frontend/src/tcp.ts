/**
 * Newline-delimited JSON transport over a loopback TCP socket.
 *
 * Node-only; the browser build never imports this module. The server
 * sniffs the first bytes of a connection to pick its framing, so the
 * transport sends a bare newline immediately after connecting.
 */
import * as net from "node:net";

import type { Transport, TransportHandlers } from "./transport.js";
import { LineBuffer } from "./transport.js";

export class TcpTransport implements Transport {
  private socket: net.Socket | null = null;
  private readonly lines = new LineBuffer();

  constructor(
    private readonly host: string,
    private readonly port: number,
  ) {}

  start(handlers: TransportHandlers): void {
    const socket = net.connect({ host: this.host, port: this.port });
    this.socket = socket;
    socket.setEncoding("utf-8");
    socket.on("connect", () => {
      // Settles the server's framing probe without carrying a frame.
      socket.write("\n");
      handlers.onOpen();
    });
    socket.on("data", (chunk: string) => {
      this.lines.push(chunk, handlers.onFrameText);
    });
    socket.on("error", (exc: Error) => {
      handlers.onError(exc.message);
    });
    socket.on("close", () => {
      handlers.onClose();
    });
  }

  send(frameText: string): void {
    if (this.socket === null || this.socket.destroyed) {
      throw new Error("transport is not open");
    }
    this.socket.write(frameText + "\n");
  }

  close(): void {
    this.socket?.destroy();
  }
}
