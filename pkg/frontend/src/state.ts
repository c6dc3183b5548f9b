// Console session state. Everything in here is a verbatim copy of server
// data (feed frames and query responses) plus the connection bookkeeping;
// the console runs no compliance rules of its own.

import type {
  AlertBody,
  AlertsPage,
  ConnectionState,
  ContactEdge,
  DomainEventBody,
  FeedFrame,
  InjectionAck,
  InstanceSnapshot,
  InstanceUpdateBody,
  SimStatus,
  StatsRow,
} from "./types.js";

const EVENT_TICKER_CAP = 200;

export interface PanelNotice {
  status: number;
  detail: string;
}

export interface ConsoleState {
  connection: ConnectionState;
  cursor: number;
  readingsSeen: number;
  // Newest first; one entry per alert frame (realerts are separate alerts).
  alerts: AlertBody[];
  // Stamp of the frame behind each alert card, for latency display/tests.
  alertArrivals: Map<string, { arrivedAt: number; renderedAt: number | null; emittedAt: number }>;
  events: DomainEventBody[];
  instances: Map<string, InstanceSnapshot>;
  sim: SimStatus;
  lastInjection: InjectionAck | null;
  history: AlertsPage | null;
  stats: { groupBy: string; rows: StatsRow[] } | null;
  contacts: ContactEdge[] | null;
  notices: Map<string, PanelNotice>;
}

export function initialState(): ConsoleState {
  return {
    connection: "idle",
    cursor: 0,
    readingsSeen: 0,
    alerts: [],
    alertArrivals: new Map(),
    events: [],
    instances: new Map(),
    sim: { loaded: false },
    lastInjection: null,
    history: null,
    stats: null,
    contacts: null,
    notices: new Map(),
  };
}

export class ConsoleStore {
  state: ConsoleState;
  private listeners: (() => void)[] = [];

  constructor() {
    this.state = initialState();
  }

  subscribe(listener: () => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  setConnection(connection: ConnectionState): void {
    this.state.connection = connection;
    this.emit();
  }

  applyFrame(frame: FeedFrame, arrivedAt: number): void {
    this.state.cursor = Math.max(this.state.cursor, frame.sequence);
    switch (frame.kind) {
      case "reading":
        this.state.readingsSeen += 1;
        break;
      case "event":
        this.state.events.push(frame.body as unknown as DomainEventBody);
        if (this.state.events.length > EVENT_TICKER_CAP) {
          this.state.events = this.state.events.slice(-EVENT_TICKER_CAP);
        }
        break;
      case "instance_update": {
        const update = frame.body as unknown as InstanceUpdateBody;
        if (update.instance?.instance_id) {
          this.state.instances.set(update.instance.instance_id, update.instance);
        }
        break;
      }
      case "alert": {
        const alert = frame.body as unknown as AlertBody;
        if (!this.state.alertArrivals.has(alert.alert_id)) {
          this.state.alerts.unshift(alert);
          this.state.alertArrivals.set(alert.alert_id, {
            arrivedAt,
            renderedAt: null,
            emittedAt: frame.emitted_at,
          });
        }
        break;
      }
    }
    this.emit();
  }

  // Called by the view layer right after the alert card hit the page.
  markAlertRendered(alertId: string, renderedAt: number): void {
    const entry = this.state.alertArrivals.get(alertId);
    if (entry && entry.renderedAt === null) entry.renderedAt = renderedAt;
  }

  setSim(sim: SimStatus): void {
    this.state.sim = sim;
    this.emit();
  }

  setInjection(ack: InjectionAck): void {
    this.state.lastInjection = ack;
    this.emit();
  }

  setHistory(page: AlertsPage): void {
    this.state.history = page;
    this.state.notices.delete("history");
    this.emit();
  }

  setStats(groupBy: string, rows: StatsRow[]): void {
    this.state.stats = { groupBy, rows };
    this.state.notices.delete("stats");
    this.emit();
  }

  setContacts(edges: ContactEdge[]): void {
    this.state.contacts = edges;
    this.state.notices.delete("contacts");
    this.emit();
  }

  setNotice(panel: string, notice: PanelNotice): void {
    this.state.notices.set(panel, notice);
    this.emit();
  }
}
