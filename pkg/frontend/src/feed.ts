// Live feed client. EventSource cannot send an Authorization header, so the
// stream is consumed with fetch + incremental parsing of the event-stream
// body. Resume state is the last seen sequence number; reconnects pass it as
// ?after= so the server replays exactly what was missed, and frames at or
// below the cursor are dropped client-side so a replay can never duplicate.

import type { FeedFrame } from "./types.js";

export interface SseEvent {
  id: string | null;
  event: string;
  data: string;
}

// Incremental server-sent-events parser. Feed it arbitrary text chunks,
// it emits complete events. Handles \n and \r\n, multi-line data fields,
// and comment lines (": heartbeat").
export class SseDecoder {
  private buffer = "";

  push(chunk: string): SseEvent[] {
    this.buffer += chunk.replace(/\r\n/g, "\n").replace(/\r/g, "\n");
    const events: SseEvent[] = [];
    let split: number;
    while ((split = this.buffer.indexOf("\n\n")) !== -1) {
      const raw = this.buffer.slice(0, split);
      this.buffer = this.buffer.slice(split + 2);
      const parsed = this.parseBlock(raw);
      if (parsed) events.push(parsed);
    }
    return events;
  }

  private parseBlock(raw: string): SseEvent | null {
    let id: string | null = null;
    let event = "message";
    const data: string[] = [];
    for (const line of raw.split("\n")) {
      if (!line || line.startsWith(":")) continue;
      const colon = line.indexOf(":");
      const field = colon === -1 ? line : line.slice(0, colon);
      let value = colon === -1 ? "" : line.slice(colon + 1);
      if (value.startsWith(" ")) value = value.slice(1);
      if (field === "id") id = value;
      else if (field === "event") event = value;
      else if (field === "data") data.push(value);
    }
    if (id === null && data.length === 0) return null;
    return { id, event, data: data.join("\n") };
  }
}

export interface FeedSocketOptions {
  // Resume point: deliver only frames with sequence > after.
  after?: number;
  fetchImpl?: typeof fetch;
  // Delay before a reconnect attempt.
  retryMs?: number;
  onFrame: (frame: FeedFrame, arrivedAt: number) => void;
  onStateChange?: (state: "connecting" | "live" | "reconnecting" | "stopped") => void;
}

export class FeedSocket {
  readonly baseUrl: string;
  readonly token: string;
  cursor: number;

  private readonly fetchImpl: typeof fetch;
  private readonly retryMs: number;
  private readonly onFrame: FeedSocketOptions["onFrame"];
  private readonly onStateChange: FeedSocketOptions["onStateChange"];
  private controller: AbortController | null = null;
  private stopped = false;
  private loop: Promise<void> | null = null;

  constructor(baseUrl: string, token: string, options: FeedSocketOptions) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.token = token;
    this.cursor = options.after ?? 0;
    this.fetchImpl = options.fetchImpl ?? fetch;
    this.retryMs = options.retryMs ?? 500;
    this.onFrame = options.onFrame;
    this.onStateChange = options.onStateChange;
  }

  start(): void {
    if (this.loop) return;
    this.stopped = false;
    this.loop = this.run();
  }

  async stop(): Promise<void> {
    this.stopped = true;
    this.controller?.abort();
    try {
      await this.loop;
    } catch {
      // the aborted fetch surfaces here, nothing to do
    }
    this.loop = null;
    this.onStateChange?.("stopped");
  }

  private async run(): Promise<void> {
    let first = true;
    while (!this.stopped) {
      this.onStateChange?.(first ? "connecting" : "reconnecting");
      first = false;
      try {
        await this.consumeOnce();
      } catch {
        // fall through to the retry sleep
      }
      if (this.stopped) break;
      await sleep(this.retryMs);
    }
  }

  private async consumeOnce(): Promise<void> {
    this.controller = new AbortController();
    const url = `${this.baseUrl}/api/live?after=${this.cursor}`;
    const response = await this.fetchImpl(url, {
      headers: {
        Authorization: `Bearer ${this.token}`,
        Accept: "text/event-stream",
      },
      signal: this.controller.signal,
    });
    if (!response.ok || !response.body) {
      throw new Error(`feed connect failed: HTTP ${response.status}`);
    }
    this.onStateChange?.("live");
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    const sse = new SseDecoder();
    try {
      while (true) {
        const { done, value } = await reader.read();
        if (done) break;
        const arrivedAt = Date.now();
        for (const event of sse.push(decoder.decode(value, { stream: true }))) {
          this.dispatch(event, arrivedAt);
        }
      }
    } finally {
      reader.releaseLock();
    }
  }

  private dispatch(event: SseEvent, arrivedAt: number): void {
    if (!event.data) return;
    let frame: FeedFrame;
    try {
      frame = JSON.parse(event.data) as FeedFrame;
    } catch {
      return;
    }
    if (typeof frame.sequence !== "number") return;
    if (frame.sequence <= this.cursor) return; // replayed frame, already seen
    this.cursor = frame.sequence;
    this.onFrame(frame, arrivedAt);
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
