// Wire types for the gateway's JSON responses and feed frames. These mirror
// the server shapes one to one; the console never invents fields of its own.

export type FeedKind = "reading" | "event" | "instance_update" | "alert";

export interface FeedFrame {
  sequence: number;
  kind: FeedKind;
  body: Record<string, unknown>;
  emitted_at: number;
}

export interface AlertBody {
  alert_id: string;
  workflow_id: string;
  instance_id: string;
  violation_id: string;
  device: string;
  person: string;
  room: string;
  timestamp: number;
  description: string;
  delivery_targets: string[];
  is_realert: boolean;
}

export interface DomainEventBody {
  kind: string;
  subject: string | null;
  secondary_subject: string | null;
  room: string;
  timestamp: number;
  payload: Record<string, unknown>;
  provenance: string[];
}

export interface InstanceSnapshot {
  instance_id: string;
  workflow_id: string;
  workflow_version: number;
  room: string;
  node_id: string;
  state: string;
  bindings: Record<string, string>;
  auxiliary: boolean;
  [extra: string]: unknown;
}

export interface InstanceUpdateBody {
  kind: string;
  instance: InstanceSnapshot;
  [extra: string]: unknown;
}

export interface SimRoom {
  room_id: string;
  kind: string;
  kit: string;
}

export interface SimPerson {
  person_id: string;
  role: string;
  badge: string;
}

export interface SimStatus {
  loaded?: boolean;
  scenario?: string;
  virtual_now?: number;
  next_delivery_at?: number | null;
  delivered?: number;
  exhausted?: boolean;
  rooms?: SimRoom[];
  cast?: SimPerson[];
}

export interface SimDelivery {
  delivered_at: number;
  reading: Record<string, unknown>;
  outcome: string;
  events: string[];
}

export interface SimActionResult extends SimStatus {
  deliveries: SimDelivery[];
}

export interface AlertsPage {
  alerts: AlertBody[];
  total: number;
  offset: number;
  limit: number;
}

export interface StatsRow {
  group: string;
  alerts: number;
  realerts: number;
  mean_correction_ms: number | null;
}

export interface StatsResponse {
  group_by: string;
  rows: StatsRow[];
}

export interface ContactEdge {
  person_a: string;
  person_b: string;
  room: string;
  overlap_ms: number;
  overlap_seconds: number;
  episode_count: number;
}

export interface ContactsResponse {
  edges: ContactEdge[];
}

export interface InstancesResponse {
  instances: InstanceSnapshot[];
}

export interface EventsResponse {
  events: DomainEventBody[];
}

export interface InjectRequest {
  kind: string;
  person?: string;
  room?: string;
  item?: string;
}

// Outcome of the latest injection attempt, as reported by the server.
// ok=false carries the server's rejection reason verbatim.
export interface InjectionAck {
  ok: boolean;
  detail: string;
  at: number;
}

export type ConnectionState = "idle" | "connecting" | "live" | "reconnecting" | "stopped";
