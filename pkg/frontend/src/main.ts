// Browser shell: static control strip plus live panels. Controls are built
// once so inputs keep focus; only the panel container re-renders on state
// changes. All data on screen comes from the gateway.

import { GatewayClient } from "./api.js";
import { ConsoleApp } from "./app.js";

const ACTION_KINDS = [
  "move_through_door",
  "approach_sink",
  "use_dispenser",
  "use_tap",
  "approach_bed",
  "lie_on_table",
  "scan_barcode",
  "use_spray",
  "depart",
  "corridor_pass",
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function controlsHtml(): string {
  const kinds = ACTION_KINDS.map((k) => `<option value="${k}">${k}</option>`).join("");
  return `
<fieldset class="controls">
  <legend>Gateway</legend>
  <input id="token" type="password" placeholder="bearer token" size="28">
  <button id="connect">Connect</button>
  <span id="conn-note"></span>
</fieldset>
<fieldset class="controls">
  <legend>Scenario</legend>
  <input id="scenario-name" placeholder="shipped name, e.g. gp_happy_path" size="28">
  <input id="scenario-seed" type="number" value="0" size="6">
  <button id="load">Load</button>
  <button id="step">Step</button>
  <button id="run">Run all</button>
  <button id="flush">Process pending</button>
</fieldset>
<fieldset class="controls">
  <legend>Inject action</legend>
  <select id="inject-kind">${kinds}</select>
  <input id="inject-person" list="cast-list" placeholder="person" size="12">
  <input id="inject-room" list="room-list" placeholder="room" size="12">
  <input id="inject-item" placeholder="item (soap|gel|gloves|package)" size="20">
  <button id="inject">Inject</button>
  <datalist id="cast-list"></datalist>
  <datalist id="room-list"></datalist>
</fieldset>
<fieldset class="controls">
  <legend>Views</legend>
  <button id="refresh-history">History</button>
  <select id="stats-group"><option>user</option><option>workflow</option><option>sensor</option></select>
  <button id="refresh-stats">Stats</button>
  <button id="refresh-contacts">Contacts</button>
</fieldset>
<div id="panels"></div>`;
}

function boot(): void {
  const root = el<HTMLDivElement>("app");
  root.innerHTML = controlsHtml();
  const panels = el<HTMLDivElement>("panels");
  let app: ConsoleApp | null = null;

  const note = (text: string) => {
    el<HTMLSpanElement>("conn-note").textContent = text;
  };

  const need = (): ConsoleApp => {
    if (!app) throw new Error("connect first");
    return app;
  };

  const guard = (work: () => Promise<unknown>) => {
    work().catch((err) => note(err instanceof Error ? err.message : String(err)));
  };

  el<HTMLButtonElement>("connect").addEventListener("click", () => {
    const token = el<HTMLInputElement>("token").value.trim();
    if (!token) {
      note("token required");
      return;
    }
    guard(async () => {
      if (app) await app.disconnectFeed();
      const client = new GatewayClient(window.location.origin, token);
      await client.health();
      app = new ConsoleApp(client, {
        onRender: (html) => {
          panels.innerHTML = html;
          syncRoster();
        },
      });
      app.connectFeed();
      await app.refreshSimStatus().catch(() => undefined);
      note("connected");
    });
  });

  function syncRoster(): void {
    if (!app) return;
    const sim = app.store.state.sim;
    el<HTMLDataListElement>("cast-list").innerHTML = (sim.cast ?? [])
      .map((p) => `<option value="${p.person_id}">`)
      .join("");
    el<HTMLDataListElement>("room-list").innerHTML = (sim.rooms ?? [])
      .map((r) => `<option value="${r.room_id}">`)
      .join("");
  }

  el<HTMLButtonElement>("load").addEventListener("click", () =>
    guard(() =>
      need().loadScenario({
        scenario: el<HTMLInputElement>("scenario-name").value.trim(),
        seed: Number(el<HTMLInputElement>("scenario-seed").value) || 0,
      }),
    ),
  );
  el<HTMLButtonElement>("step").addEventListener("click", () => guard(() => need().step()));
  el<HTMLButtonElement>("run").addEventListener("click", () => guard(() => need().runAll()));
  el<HTMLButtonElement>("flush").addEventListener("click", () => guard(() => need().flush()));

  el<HTMLButtonElement>("inject").addEventListener("click", () =>
    guard(async () => {
      const value = (id: string) => el<HTMLInputElement>(id).value.trim() || undefined;
      await need().inject({
        kind: el<HTMLSelectElement>("inject-kind").value,
        person: value("inject-person"),
        room: value("inject-room"),
        item: value("inject-item"),
      });
    }),
  );

  el<HTMLButtonElement>("refresh-history").addEventListener("click", () =>
    guard(() => need().refreshHistory()),
  );
  el<HTMLButtonElement>("refresh-stats").addEventListener("click", () =>
    guard(() => need().refreshStats(el<HTMLSelectElement>("stats-group").value)),
  );
  el<HTMLButtonElement>("refresh-contacts").addEventListener("click", () =>
    guard(() => need().refreshContacts()),
  );
}

boot();
