/**
 * Transport abstraction.
 *
 * A transport moves one frame of text at a time in either direction.
 * The TCP flavor delimits frames with newlines; the WebSocket flavor
 * maps one frame to one message. The console client only sees this
 * interface, so both flavors and test fakes are interchangeable.
 */

export interface TransportHandlers {
  onOpen: () => void;
  onFrameText: (text: string) => void;
  onClose: () => void;
  onError: (message: string) => void;
}

export interface Transport {
  start(handlers: TransportHandlers): void;
  send(frameText: string): void;
  close(): void;
}

export type TransportFactory = () => Transport;

/** Reassemble newline-delimited frames from arbitrary stream chunks. */
export class LineBuffer {
  private buffer = "";

  push(chunk: string, emit: (line: string) => void): void {
    this.buffer += chunk;
    for (;;) {
      const index = this.buffer.indexOf("\n");
      if (index < 0) {
        return;
      }
      const line = this.buffer.slice(0, index);
      this.buffer = this.buffer.slice(index + 1);
      if (line.trim().length > 0) {
        emit(line);
      }
    }
  }

  /** Unterminated tail, if any. Useful only for diagnostics. */
  pending(): string {
    return this.buffer;
  }
}
