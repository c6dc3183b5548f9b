// Thin fetch wrapper for the gateway REST API. Every method returns the
// server's JSON untouched; errors carry the HTTP status and the server's
// `detail` payload so views can show the reason verbatim.

import type {
  AlertsPage,
  ContactsResponse,
  EventsResponse,
  InjectRequest,
  InstancesResponse,
  SimActionResult,
  SimStatus,
  StatsResponse,
} from "./types.js";

export class ApiError extends Error {
  readonly status: number;
  readonly detail: unknown;

  constructor(status: number, detail: unknown) {
    super(detailText(detail) || `HTTP ${status}`);
    this.name = "ApiError";
    this.status = status;
    this.detail = detail;
  }

  get isAccessDenied(): boolean {
    return this.status === 403;
  }
}

// FastAPI puts the reason under "detail"; it can be a string or a structure.
export function detailText(detail: unknown): string {
  if (detail == null) return "";
  if (typeof detail === "string") return detail;
  if (typeof detail === "object") {
    const d = detail as Record<string, unknown>;
    if (typeof d.message === "string") return d.message;
    if (typeof d.reason === "string") {
      return typeof d.message === "string" ? `${d.reason}: ${d.message}` : String(d.reason);
    }
    if (Array.isArray(d.findings)) {
      return d.findings
        .map((f) => {
          const finding = f as Record<string, unknown>;
          return [finding.where, finding.message].filter(Boolean).join(": ");
        })
        .join("; ");
    }
  }
  return JSON.stringify(detail);
}

export interface GatewayClientOptions {
  fetchImpl?: typeof fetch;
}

export class GatewayClient {
  readonly baseUrl: string;
  readonly token: string;
  private readonly fetchImpl: typeof fetch;

  constructor(baseUrl: string, token: string, options: GatewayClientOptions = {}) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.token = token;
    this.fetchImpl = options.fetchImpl ?? fetch;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers: {
        Authorization: `Bearer ${this.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await response.text();
    let parsed: unknown = null;
    if (text) {
      try {
        parsed = JSON.parse(text);
      } catch {
        parsed = text;
      }
    }
    if (!response.ok) {
      const detail =
        parsed !== null && typeof parsed === "object" && "detail" in (parsed as object)
          ? (parsed as { detail: unknown }).detail
          : parsed;
      throw new ApiError(response.status, detail);
    }
    return parsed as T;
  }

  health(): Promise<{ ok: boolean; feed_sequence: number }> {
    return this.request("GET", "/api/healthz");
  }

  alerts(params: {
    person?: string;
    workflow?: string;
    from?: number;
    to?: number;
    include_realerts?: boolean;
    limit?: number;
    offset?: number;
  } = {}): Promise<AlertsPage> {
    return this.request("GET", "/api/alerts" + query(params));
  }

  instances(state?: string): Promise<InstancesResponse> {
    return this.request("GET", "/api/instances" + query({ state }));
  }

  events(params: { kind?: string; room?: string; from?: number; to?: number } = {}): Promise<EventsResponse> {
    return this.request("GET", "/api/events" + query(params));
  }

  stats(groupBy: string, from?: number, to?: number): Promise<StatsResponse> {
    return this.request("GET", "/api/stats" + query({ group_by: groupBy, from, to }));
  }

  contacts(from?: number, to?: number): Promise<ContactsResponse> {
    return this.request("GET", "/api/contacts" + query({ from, to }));
  }

  workflows(): Promise<{ workflows: { workflow_id: string; version: number; name: string }[] }> {
    return this.request("GET", "/api/workflows");
  }

  uploadWorkflow(text: string): Promise<{ workflow_id: string; version: number }> {
    return this.request("POST", "/api/workflows", { text });
  }

  simStatus(): Promise<SimStatus> {
    return this.request("GET", "/api/sim");
  }

  simLoad(body: { scenario?: string; text?: string; seed?: number }): Promise<SimStatus> {
    return this.request("POST", "/api/sim/load", body);
  }

  simStep(count = 1): Promise<SimActionResult> {
    return this.request("POST", "/api/sim/step", { count });
  }

  simRun(): Promise<SimActionResult> {
    return this.request("POST", "/api/sim/run");
  }

  simInject(action: InjectRequest): Promise<SimActionResult> {
    return this.request("POST", "/api/sim/inject", action);
  }

  flush(): Promise<{ flushed: boolean }> {
    return this.request("POST", "/api/flush");
  }
}

function query(params: Record<string, string | number | boolean | undefined>): string {
  const parts: string[] = [];
  for (const [key, value] of Object.entries(params)) {
    if (value === undefined) continue;
    parts.push(`${encodeURIComponent(key)}=${encodeURIComponent(String(value))}`);
  }
  return parts.length ? `?${parts.join("&")}` : "";
}
