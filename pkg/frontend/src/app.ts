// Headless console core: one gateway client, one feed connection, one state
// store, and the render composition. The browser shell mounts this onto the
// DOM; the end-to-end tests drive it directly. Panels change only when
// server data arrives (feed frame or response body), never optimistically.

import { ApiError, GatewayClient, detailText } from "./api.js";
import { FeedSocket } from "./feed.js";
import { ConsoleStore } from "./state.js";
import { page } from "./render.js";
import type { FeedFrame, InjectRequest, SimActionResult } from "./types.js";

export interface ConsoleAppOptions {
  fetchImpl?: typeof fetch;
  feedRetryMs?: number;
  onRender?: (html: string) => void;
}

export class ConsoleApp {
  readonly client: GatewayClient;
  readonly store: ConsoleStore;
  private feed: FeedSocket | null = null;
  private readonly options: ConsoleAppOptions;
  private lastHtml = "";

  constructor(client: GatewayClient, options: ConsoleAppOptions = {}) {
    this.client = client;
    this.options = options;
    this.store = new ConsoleStore();
    this.store.subscribe(() => this.render());
  }

  // Rendering happens synchronously on every state change so the panel a
  // frame lands in is on the page by the time the change notification ends.
  private render(): void {
    this.lastHtml = page(this.store.state);
    const now = Date.now();
    for (const alert of this.store.state.alerts) {
      if (this.lastHtml.includes(`data-alert-id="${alert.alert_id}"`)) {
        this.store.markAlertRendered(alert.alert_id, now);
      }
    }
    this.options.onRender?.(this.lastHtml);
  }

  html(): string {
    return this.lastHtml;
  }

  connectFeed(after?: number): void {
    if (this.feed) return;
    this.feed = new FeedSocket(this.client.baseUrl, this.client.token, {
      after: after ?? this.store.state.cursor,
      fetchImpl: this.options.fetchImpl,
      retryMs: this.options.feedRetryMs,
      onFrame: (frame: FeedFrame, arrivedAt: number) => this.store.applyFrame(frame, arrivedAt),
      onStateChange: (state) => this.store.setConnection(state),
    });
    this.feed.start();
  }

  async disconnectFeed(): Promise<void> {
    if (!this.feed) return;
    await this.feed.stop();
    this.feed = null;
  }

  feedCursor(): number {
    return this.feed?.cursor ?? this.store.state.cursor;
  }

  async refreshSimStatus(): Promise<void> {
    this.store.setSim(await this.client.simStatus());
  }

  async loadScenario(body: { scenario?: string; text?: string; seed?: number }): Promise<void> {
    const status = await this.client.simLoad(body);
    this.store.setSim({ loaded: true, ...status });
  }

  // Post one physical action. The acknowledgment banner carries the server's
  // answer either way; panel contents change only via the live feed.
  async inject(action: InjectRequest): Promise<boolean> {
    try {
      const result: SimActionResult = await this.client.simInject(action);
      const { deliveries, ...status } = result;
      this.store.setSim({ loaded: true, ...status });
      this.store.setInjection({
        ok: true,
        detail: `${action.kind} accepted, ${deliveries.length} reading${deliveries.length === 1 ? "" : "s"} delivered`,
        at: Date.now(),
      });
      return true;
    } catch (err) {
      if (err instanceof ApiError) {
        this.store.setInjection({ ok: false, detail: detailText(err.detail), at: Date.now() });
        return false;
      }
      throw err;
    }
  }

  async step(count = 1): Promise<void> {
    const { deliveries, ...status } = await this.client.simStep(count);
    this.store.setSim({ loaded: true, ...status });
    this.store.setInjection({
      ok: true,
      detail: `stepped ${deliveries.length} deliver${deliveries.length === 1 ? "y" : "ies"}`,
      at: Date.now(),
    });
  }

  async runAll(): Promise<void> {
    const { deliveries, ...status } = await this.client.simRun();
    this.store.setSim({ loaded: true, ...status });
    this.store.setInjection({
      ok: true,
      detail: `ran script to exhaustion, ${deliveries.length} deliveries`,
      at: Date.now(),
    });
  }

  // Push buffered correlation through; domain events within the reorder
  // window surface on the feed after this.
  async flush(): Promise<void> {
    await this.client.flush();
  }

  async refreshHistory(params: Parameters<GatewayClient["alerts"]>[0] = {}): Promise<void> {
    try {
      this.store.setHistory(await this.client.alerts(params));
    } catch (err) {
      this.noticeOrThrow("history", err);
    }
  }

  async refreshStats(groupBy: string, from?: number, to?: number): Promise<void> {
    try {
      const { rows } = await this.client.stats(groupBy, from, to);
      this.store.setStats(groupBy, rows);
    } catch (err) {
      this.noticeOrThrow("stats", err);
    }
  }

  async refreshContacts(from?: number, to?: number): Promise<void> {
    try {
      const { edges } = await this.client.contacts(from, to);
      this.store.setContacts(edges);
    } catch (err) {
      this.noticeOrThrow("contacts", err);
    }
  }

  private noticeOrThrow(panel: string, err: unknown): void {
    if (err instanceof ApiError && err.isAccessDenied) {
      this.store.setNotice(panel, { status: err.status, detail: detailText(err.detail) });
      return;
    }
    throw err;
  }
}
