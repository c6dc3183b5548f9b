// Pure HTML renderers. Each takes server data and returns a string; nothing
// here talks to the network or derives compliance facts. Server text is
// escaped, never interpreted.

import type { ConsoleState, PanelNotice } from "./state.js";
import type {
  AlertBody,
  ContactEdge,
  DomainEventBody,
  InstanceSnapshot,
  SimStatus,
  StatsRow,
} from "./types.js";

export function escapeHtml(value: unknown): string {
  return String(value ?? "")
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

export function formatMs(ms: number | null | undefined): string {
  if (ms === null || ms === undefined) return "";
  const total = Math.floor(ms / 1000);
  const h = Math.floor(total / 3600);
  const m = Math.floor((total % 3600) / 60);
  const s = total % 60;
  const frac = ms % 1000;
  const hms = [h, m, s].map((n) => String(n).padStart(2, "0")).join(":");
  return frac ? `${hms}.${String(frac).padStart(3, "0")}` : hms;
}

export function alertCard(alert: AlertBody): string {
  const badge = alert.is_realert
    ? '<span class="badge badge-realert">realert</span>'
    : '<span class="badge badge-alert">alert</span>';
  return `<article class="alert-card${alert.is_realert ? " realert" : ""}" data-alert-id="${escapeHtml(alert.alert_id)}">
  <header>${badge} <strong>${escapeHtml(alert.workflow_id)}</strong> <span class="room">${escapeHtml(alert.room)}</span> <time>${formatMs(alert.timestamp)}</time></header>
  <p class="description">${escapeHtml(alert.description)}</p>
  <dl>
    <dt>person</dt><dd>${escapeHtml(alert.person)}</dd>
    <dt>device</dt><dd>${escapeHtml(alert.device)}</dd>
    <dt>instance</dt><dd>${escapeHtml(alert.instance_id)}</dd>
  </dl>
</article>`;
}

export function alertsPanel(alerts: AlertBody[]): string {
  if (!alerts.length) {
    return '<div class="panel-empty">No alerts on the live feed.</div>';
  }
  return alerts.map(alertCard).join("\n");
}

export function eventRow(event: DomainEventBody): string {
  const who = [event.subject, event.secondary_subject].filter(Boolean).join(", ");
  const payload = Object.entries(event.payload ?? {})
    .map(([k, v]) => `${escapeHtml(k)}=${escapeHtml(v)}`)
    .join(" ");
  return `<tr><td>${formatMs(event.timestamp)}</td><td>${escapeHtml(event.kind)}</td><td>${escapeHtml(event.room)}</td><td>${escapeHtml(who)}</td><td class="payload">${payload}</td></tr>`;
}

export function eventsPanel(events: DomainEventBody[]): string {
  if (!events.length) return '<div class="panel-empty">No clinical events yet.</div>';
  const rows = [...events].reverse().map(eventRow).join("\n");
  return `<table class="events"><thead><tr><th>time</th><th>event</th><th>room</th><th>who</th><th>details</th></tr></thead><tbody>${rows}</tbody></table>`;
}

export function instancesPanel(instances: InstanceSnapshot[]): string {
  if (!instances.length) return '<div class="panel-empty">No workflow instances.</div>';
  const rows = instances
    .map(
      (i) =>
        `<tr class="state-${escapeHtml(i.state)}"><td>${escapeHtml(i.instance_id)}</td><td>${escapeHtml(i.workflow_id)} v${escapeHtml(i.workflow_version)}</td><td>${escapeHtml(i.room)}</td><td>${escapeHtml(i.node_id)}</td><td><span class="state">${escapeHtml(i.state)}</span></td><td>${Object.entries(
          i.bindings ?? {},
        )
          .map(([role, person]) => `${escapeHtml(role)}=${escapeHtml(person)}`)
          .join(" ")}</td></tr>`,
    )
    .join("\n");
  return `<table class="instances"><thead><tr><th>instance</th><th>workflow</th><th>room</th><th>node</th><th>state</th><th>bindings</th></tr></thead><tbody>${rows}</tbody></table>`;
}

export function rosterPanel(sim: SimStatus): string {
  if (!sim.loaded && !sim.scenario) {
    return '<div class="panel-empty">No scenario loaded. Load one to get a cast and rooms.</div>';
  }
  const cast = (sim.cast ?? [])
    .map(
      (p) =>
        `<li data-person="${escapeHtml(p.person_id)}">${escapeHtml(p.person_id)} <span class="role">${escapeHtml(p.role)}</span> <span class="badge-tag">${escapeHtml(p.badge)}</span></li>`,
    )
    .join("\n");
  const rooms = (sim.rooms ?? [])
    .map(
      (r) =>
        `<li data-room="${escapeHtml(r.room_id)}">${escapeHtml(r.room_id)} <span class="role">${escapeHtml(r.kind)}</span> <span class="badge-tag">kit ${escapeHtml(r.kit)}</span></li>`,
    )
    .join("\n");
  return `<div class="roster"><h3>Cast</h3><ul>${cast}</ul><h3>Rooms</h3><ul>${rooms}</ul></div>`;
}

export function statusBar(state: ConsoleState): string {
  const sim = state.sim;
  const scenario = sim.scenario ? escapeHtml(sim.scenario) : "none";
  const vnow = sim.virtual_now !== undefined ? formatMs(sim.virtual_now) : "-";
  return `<div class="status-bar">
  <span class="conn conn-${state.connection}">feed: ${state.connection}</span>
  <span>cursor ${state.cursor}</span>
  <span>scenario: ${scenario}</span>
  <span>virtual time ${vnow}</span>
  <span>delivered ${sim.delivered ?? 0}</span>
  <span>${sim.exhausted ? "script exhausted" : "script pending"}</span>
</div>`;
}

export function injectionBanner(ack: { ok: boolean; detail: string } | null): string {
  if (!ack) return "";
  if (ack.ok) {
    return `<div class="inject-ack ok">${escapeHtml(ack.detail)}</div>`;
  }
  return `<div class="inject-ack rejected">Injection rejected: ${escapeHtml(ack.detail)}</div>`;
}

export function accessNotice(notice: PanelNotice): string {
  return `<div class="access-notice">Access denied (HTTP ${notice.status}): ${escapeHtml(notice.detail)}</div>`;
}

export function historyPanel(state: ConsoleState): string {
  const notice = state.notices.get("history");
  if (notice) return accessNotice(notice);
  if (!state.history) return '<div class="panel-empty">History not loaded.</div>';
  const { alerts, total, offset } = state.history;
  if (!alerts.length) return '<div class="panel-empty">No recorded alerts in range.</div>';
  const rows = alerts
    .map(
      (a) =>
        `<tr><td>${formatMs(a.timestamp)}</td><td>${escapeHtml(a.workflow_id)}</td><td>${escapeHtml(a.person)}</td><td>${escapeHtml(a.device)}</td><td>${escapeHtml(a.room)}</td><td>${a.is_realert ? "realert" : "initial"}</td><td>${escapeHtml(a.description)}</td></tr>`,
    )
    .join("\n");
  return `<table class="history"><thead><tr><th>time</th><th>workflow</th><th>person</th><th>device</th><th>room</th><th>kind</th><th>description</th></tr></thead><tbody>${rows}</tbody></table>
<div class="pager">showing ${alerts.length} of ${total} (offset ${offset})</div>`;
}

export function statsPanel(state: ConsoleState): string {
  const notice = state.notices.get("stats");
  if (notice) return accessNotice(notice);
  if (!state.stats) return '<div class="panel-empty">Statistics not loaded.</div>';
  const { groupBy, rows } = state.stats;
  if (!rows.length) return '<div class="panel-empty">No alerts in range.</div>';
  const body = rows
    .map(
      (r: StatsRow) =>
        `<tr><td>${escapeHtml(r.group)}</td><td>${r.alerts}</td><td>${r.realerts}</td><td>${
          r.mean_correction_ms === null ? "-" : formatMs(r.mean_correction_ms)
        }</td></tr>`,
    )
    .join("\n");
  return `<table class="stats"><caption>alerts by ${escapeHtml(groupBy)}</caption><thead><tr><th>group</th><th>alerts</th><th>realerts</th><th>mean correction</th></tr></thead><tbody>${body}</tbody></table>`;
}

export function contactsPanel(state: ConsoleState): string {
  const notice = state.notices.get("contacts");
  if (notice) return accessNotice(notice);
  if (!state.contacts) return '<div class="panel-empty">Contact network not loaded.</div>';
  if (!state.contacts.length) return '<div class="panel-empty">No co-presence recorded.</div>';
  const rows = state.contacts
    .map(
      (e: ContactEdge) =>
        `<tr><td>${escapeHtml(e.person_a)}</td><td>${escapeHtml(e.person_b)}</td><td>${escapeHtml(e.room)}</td><td>${e.overlap_seconds.toFixed(3)} s</td><td>${e.episode_count}</td></tr>`,
    )
    .join("\n");
  return `<table class="contacts"><thead><tr><th>person</th><th>person</th><th>room</th><th>overlap</th><th>episodes</th></tr></thead><tbody>${rows}</tbody></table>`;
}

// Whole-page composition used by the browser shell and the headless tests.
export function page(state: ConsoleState): string {
  return `<div class="console">
${statusBar(state)}
${injectionBanner(state.lastInjection)}
<section id="panel-alerts"><h2>Live alerts</h2>${alertsPanel(state.alerts)}</section>
<section id="panel-events"><h2>Event ticker</h2>${eventsPanel(state.events)}</section>
<section id="panel-instances"><h2>Workflow instances</h2>${instancesPanel([...state.instances.values()])}</section>
<section id="panel-roster"><h2>Scenario</h2>${rosterPanel(state.sim)}</section>
<section id="panel-history"><h2>Alert history</h2>${historyPanel(state)}</section>
<section id="panel-stats"><h2>Statistics</h2>${statsPanel(state)}</section>
<section id="panel-contacts"><h2>Contact network</h2>${contactsPanel(state)}</section>
</div>`;
}
