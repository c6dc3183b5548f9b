"""Command line front end.

Exit status is 0 whenever the system itself worked; hygiene alerts in a
scenario run are results, not failures. Validation and usage problems
exit non-zero.
"""

from __future__ import annotations

import json
import sys
import tempfile
from pathlib import Path

import click

from .assets import shipped_scenario_names, shipped_scenario_text, shipped_workflow_names
from .events import stable_json
from .gateway import TokenStore, create_app
from .pipeline import LogFileAlertSink, Pipeline, play_scenario
from .registry import SterilizationLogEntry
from .sim import ChannelModel, ScenarioError, ScenarioSim, load_scenario_file, parse_scenario
from .store import DanglingReferenceError, Datastore
from .workflow_dsl import WorkflowParseError, parse_document
from .workflow_model import validate_definition


def _open_store(data_dir: str | None, label: str = "data") -> Datastore:
    if data_dir is None:
        data_dir = tempfile.mkdtemp(prefix="wardwatch-")
        click.echo(f"{label} dir: {data_dir}", err=True)
    return Datastore(data_dir)


@click.group()
def main() -> None:
    """Hygiene workflow monitoring for clinics: simulate, ingest, query."""


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


@main.command()
@click.option("--data-dir", type=click.Path(), default="./wardwatch-data", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--tokens", "tokens_path", type=click.Path(), default="./tokens.json", show_default=True)
@click.option("--static-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Serve a built console UI from this directory.")
@click.option("--alert-log", type=click.Path(), default=None,
              help="Also append delivered alerts to this NDJSON file.")
@click.option("--bootstrap-admin", "bootstrap_admin", default=None, metavar="USER_ID",
              help="Register this administrator user at startup when missing, so a "
                   "fresh instance can be configured over the API at all.")
def serve(data_dir, host, port, tokens_path, static_dir, alert_log, bootstrap_admin):
    """Run the HTTP gateway."""
    import uvicorn

    from .registry import UserRecord

    store = Datastore(data_dir)
    if bootstrap_admin and bootstrap_admin not in store.registry.users:
        store.register_user(
            UserRecord(user_id=bootstrap_admin, display_name=bootstrap_admin, role="administrator")
        )
    sinks = [LogFileAlertSink(alert_log)] if alert_log else []
    pipeline = Pipeline(store, alert_sinks=sinks)
    if Path(tokens_path).exists():
        tokens = TokenStore.load(tokens_path)
    else:
        tokens = TokenStore()
        click.echo(f"warning: {tokens_path} missing, starting with no tokens", err=True)
    app = create_app(pipeline, tokens, static_dir=static_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


# ---------------------------------------------------------------------------
# validate-workflow
# ---------------------------------------------------------------------------


@main.command("validate-workflow")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
def validate_workflow(file):
    """Check a workflow document; exit 0 only when it is clean."""
    text = Path(file).read_text(encoding="utf-8")
    try:
        definition = parse_document(text)
    except WorkflowParseError as exc:
        click.echo(f"parse error (line {exc.line}): {exc}")
        sys.exit(1)
    findings = validate_definition(definition)
    for finding in findings:
        click.echo(str(finding))
    click.echo(f"{definition.workflow_id} v{definition.version}: {len(findings)} findings")
    sys.exit(1 if findings else 0)


# ---------------------------------------------------------------------------
# run-scenario
# ---------------------------------------------------------------------------


def _load_script(name_or_path: str):
    if name_or_path in shipped_scenario_names():
        return parse_scenario(shipped_scenario_text(name_or_path))
    path = Path(name_or_path)
    if not path.exists():
        known = ", ".join(shipped_scenario_names())
        raise click.ClickException(f"no scenario {name_or_path!r}; shipped: {known}")
    return load_scenario_file(path)


@main.command("run-scenario")
@click.argument("scenario")
@click.option("--seed", default=0, show_default=True, help="Transport randomness seed.")
@click.option("--data-dir", type=click.Path(), default=None,
              help="Persist logs here (default: a fresh temp dir).")
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write the delivered reading trace to this file.")
@click.option("--loss", default=0.0, show_default=True, help="Battery-hop loss probability.")
@click.option("--skew-ms", default=0, show_default=True, help="Max per-node clock skew.")
@click.option("--live", "live_url", default=None, metavar="URL",
              help="Post the readings to a running gateway instead of in-process replay.")
@click.option("--admin-token", default=None, help="Admin token for --live registry seeding.")
@click.option("--ingest-token", default=None, help="Node token for --live reading delivery.")
def run_scenario_cmd(scenario, seed, data_dir, trace_path, loss, skew_ms, live_url, admin_token, ingest_token):
    """Replay a scenario; print resulting alerts as JSON lines."""
    try:
        script = _load_script(scenario)
        channel = ChannelModel(seed=seed, loss_probability=loss, clock_skew_ms=skew_ms)
    except (ScenarioError, ValueError) as exc:
        raise click.ClickException(str(exc))

    if live_url is not None:
        if not admin_token or not ingest_token:
            raise click.ClickException("--live needs --admin-token and --ingest-token")
        alerts = _run_against_gateway(script, channel, live_url, admin_token, ingest_token)
        for alert in alerts:
            click.echo(stable_json(alert))
        click.echo(f"{script.name}: {len(alerts)} alerts (live)", err=True)
        return

    if data_dir is None:
        data_dir = tempfile.mkdtemp(prefix="wardwatch-")
        click.echo(f"data dir: {data_dir}", err=True)
    report = play_scenario(script, data_dir, channel=channel, trace_path=trace_path)
    store = Datastore(data_dir)
    for alert in store.alerts():
        click.echo(stable_json(alert))
    click.echo(stable_json(report.to_dict()), err=True)


def _run_against_gateway(script, channel, base_url, admin_token, ingest_token):
    import httpx

    admin = {"Authorization": f"Bearer {admin_token}"}
    node = {"Authorization": f"Bearer {ingest_token}"}
    sim = ScenarioSim(script, channel)
    reg = sim.registry
    with httpx.Client(base_url=base_url, timeout=30.0) as client:
        seedable = [
            ("rooms", [r.to_dict() for r in reg.rooms.values()]),
            ("devices", [d.to_dict() for d in reg.devices.values()]),
            ("persons", [p.to_dict() for p in reg.persons.values()]),
            ("packages", [e.to_dict() for e in reg.sterilization_log.values()]),
        ]
        for collection, records in seedable:
            for record in records:
                resp = client.post(f"/api/registry/{collection}", json=record, headers=admin)
                if resp.status_code not in (201, 422):  # 422: already registered
                    raise click.ClickException(
                        f"registry seeding failed on {collection}: {resp.status_code} {resp.text}"
                    )
        delivered = 0
        while (delivery := sim.step()) is not None:
            resp = client.post("/api/readings", json=delivery.reading.to_wire(), headers=node)
            if resp.status_code not in (202, 409):
                raise click.ClickException(
                    f"gateway rejected {delivery.reading.reading_url}: {resp.status_code} {resp.text}"
                )
            delivered += 1
        client.post("/api/flush", headers=admin).raise_for_status()
        click.echo(f"delivered {delivered} readings", err=True)
        return client.get("/api/alerts", headers=admin).json()["alerts"]


# ---------------------------------------------------------------------------
# queries over an existing data dir
# ---------------------------------------------------------------------------


@main.command()
@click.option("--group-by", type=click.Choice(["user", "workflow", "sensor"]), default="user",
              show_default=True)
@click.option("--from", "from_ms", type=int, default=None)
@click.option("--to", "to_ms", type=int, default=None)
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
def stats(group_by, from_ms, to_ms, data_dir):
    """Alert statistics from a recorded run."""
    store = Datastore(data_dir)
    for row in store.aggregate_alert_stats(group_by, from_ms=from_ms, to_ms=to_ms):
        click.echo(stable_json(row))


@main.command()
@click.option("--from", "from_ms", type=int, default=None)
@click.option("--to", "to_ms", type=int, default=None)
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
def contacts(from_ms, to_ms, data_dir):
    """Person-to-person co-presence edges from a recorded run."""
    store = Datastore(data_dir)
    for edge in store.build_contact_network(from_ms=from_ms, to_ms=to_ms):
        click.echo(stable_json(edge.to_dict()))


@main.command("sterilize-log")
@click.option("--package", "package_code", default=None, help="Record this package as sterilized.")
@click.option("--autoclave", default="autoclave-1", show_default=True)
@click.option("--at", "at_ms", type=int, default=0, show_default=True)
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
def sterilize_log(package_code, autoclave, at_ms, data_dir):
    """Append to or print the autoclave sterilization log."""
    store = Datastore(data_dir)
    if package_code is None:
        for entry in store.registry.sterilization_log.values():
            click.echo(stable_json(entry.to_dict()))
        return
    try:
        store.add_sterilized_package(
            SterilizationLogEntry(
                package_code=package_code, sterilized_at=at_ms, autoclave_id=autoclave
            )
        )
    except Exception as exc:
        raise click.ClickException(str(exc))
    click.echo(f"recorded {package_code}")


@main.command("import-his")
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--data-dir", type=click.Path(exists=True, file_okay=False), required=True)
def import_his(file, data_dir):
    """Import hospital-information-system records (one JSON object per line)."""
    store = Datastore(data_dir)
    imported = 0
    for lineno, line in enumerate(Path(file).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise click.ClickException(f"line {lineno}: not valid JSON ({exc})")
        try:
            store.import_his_record(record)
        except DanglingReferenceError as exc:
            raise click.ClickException(f"line {lineno}: {exc}")
        imported += 1
    click.echo(f"imported {imported} records")


# ---------------------------------------------------------------------------
# token provisioning
# ---------------------------------------------------------------------------


@main.group()
def tokens() -> None:
    """Manage the static bearer tokens the gateway accepts."""


def _load_tokens(path: str) -> TokenStore:
    return TokenStore.load(path) if Path(path).exists() else TokenStore()


@tokens.command("add-user")
@click.argument("token")
@click.argument("user_id")
@click.option("--tokens", "tokens_path", type=click.Path(), default="./tokens.json", show_default=True)
def tokens_add_user(token, user_id, tokens_path):
    """Bind TOKEN to USER_ID (role comes from the user registry)."""
    ts = _load_tokens(tokens_path)
    ts.add_user_token(token, user_id)
    ts.save(tokens_path)
    click.echo(f"user token for {user_id} saved to {tokens_path}")


@tokens.command("add-ingest")
@click.argument("token")
@click.option("--tokens", "tokens_path", type=click.Path(), default="./tokens.json", show_default=True)
def tokens_add_ingest(token, tokens_path):
    """Authorize TOKEN for reading ingestion."""
    ts = _load_tokens(tokens_path)
    ts.add_ingest_token(token)
    ts.save(tokens_path)
    click.echo(f"ingest token saved to {tokens_path}")


@tokens.command("list")
@click.option("--tokens", "tokens_path", type=click.Path(exists=True), default="./tokens.json",
              show_default=True)
def tokens_list(tokens_path):
    ts = TokenStore.load(tokens_path)
    click.echo(json.dumps({"users": ts.user_tokens, "ingest": ts.ingest_tokens}, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# listings
# ---------------------------------------------------------------------------


@main.command("list-scenarios")
def list_scenarios():
    """Names accepted by run-scenario."""
    for name in shipped_scenario_names():
        click.echo(name)


@main.command("list-workflows")
def list_workflows():
    """Workflow documents shipped with the package."""
    for name in shipped_workflow_names():
        click.echo(name)


if __name__ == "__main__":
    main()
