"""Operator and client command line.

Client commands (auth, catalog, launch, deployments) talk HTTP to the API so
there is exactly one mutation path; `serve`, `worker`, and `sim` are
operator-side and share only the configured store with the service.

Exit codes: 0 success, 2 client error, 3 server error, 4 timeout.
"""

from __future__ import annotations

import json
import sys
import time

import click
import httpx

from .config import load_settings
from .runtime import build_components, make_worker
from .util import canonical_json

EXIT_OK = 0
EXIT_CLIENT = 2
EXIT_SERVER = 3
EXIT_TIMEOUT = 4

KIND_BY_ACTION = {"health": "HEALTH_CHECK", "restart": "RESTART", "delete": "DELETE"}


class CliState:
    def __init__(self, api_url: str, token: str | None, output: str, config_path: str | None):
        self.api_url = api_url.rstrip("/")
        self.token = token
        self.output = output
        self.config_path = config_path

    def client(self) -> httpx.Client:
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return httpx.Client(base_url=self.api_url, headers=headers, timeout=30.0)

    def components(self):
        return build_components(load_settings(self.config_path))


def _exit_code_for(status: int) -> int:
    return EXIT_CLIENT if status < 500 else EXIT_SERVER


def _fail(ctx: click.Context, response: httpx.Response) -> None:
    try:
        body = response.json()
        message = f"{body.get('code', 'ERROR')}: {body.get('message', response.text)}"
    except ValueError:
        message = f"HTTP {response.status_code}: {response.text}"
    click.echo(message, err=True)
    ctx.exit(_exit_code_for(response.status_code))


def _request(ctx: click.Context, state: CliState, method: str, path: str, **kwargs) -> httpx.Response:
    try:
        with state.client() as client:
            response = client.request(method, path, **kwargs)
    except httpx.TimeoutException as exc:
        click.echo(f"TIMEOUT: {exc}", err=True)
        ctx.exit(EXIT_TIMEOUT)
    except httpx.HTTPError as exc:
        click.echo(f"CONNECTION_FAILED: {exc}", err=True)
        ctx.exit(EXIT_SERVER)
    if response.status_code >= 400:
        _fail(ctx, response)
    return response


def _emit(state: CliState, payload) -> None:
    if state.output == "json":
        click.echo(canonical_json(payload))
        return
    if isinstance(payload, list):
        if not payload:
            click.echo("(empty)")
            return
        columns = sorted({key for row in payload for key in row})
        widths = {
            c: max(len(c), *(len(_cell(row.get(c))) for row in payload)) for c in columns
        }
        click.echo("  ".join(c.ljust(widths[c]) for c in columns))
        for row in payload:
            click.echo("  ".join(_cell(row.get(c)).ljust(widths[c]) for c in columns))
    elif isinstance(payload, dict):
        for key in sorted(payload):
            click.echo(f"{key}: {_cell(payload[key])}")
    else:
        click.echo(str(payload))


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, (dict, list)):
        return canonical_json(value)
    return str(value)


@click.group()
@click.option("--api-url", envvar="CLOUDGATE_API_URL", default=None, help="API base URL.")
@click.option("--token", envvar="CLOUDGATE_TOKEN", default=None, help="Bearer token.")
@click.option(
    "--output",
    type=click.Choice(["table", "json"]),
    default="table",
    show_default=True,
    envvar="CLOUDGATE_OUTPUT",
)
@click.option("--config", "config_path", envvar="CLOUDGATE_CONFIG", default=None, help="Config file.")
@click.pass_context
def main(ctx, api_url, token, output, config_path):
    """Appliance deployment gateway."""
    settings = load_settings(config_path)
    ctx.obj = CliState(
        api_url=api_url or settings.api_base_url,
        token=token or settings.token,
        output=output,
        config_path=config_path,
    )


@main.command()
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_obj
def serve(state: CliState, host, port):
    """Run the API service."""
    import uvicorn

    from .api import create_app

    settings = load_settings(state.config_path)
    components = build_components(settings)
    uvicorn.run(
        create_app(components),
        host=host or settings.bind_host,
        port=port or settings.bind_port,
        log_level="info",
    )


@main.group()
def auth():
    """User registration and token checks."""


@auth.command()
@click.argument("username")
@click.pass_context
def register(ctx, username):
    """Register a user; prints the token exactly once."""
    state: CliState = ctx.obj
    response = _request(ctx, state, "POST", "/api/v1/auth/register", json={"username": username})
    _emit(state, response.json())


@auth.command()
@click.pass_context
def whoami(ctx):
    """Check which user the configured token belongs to."""
    state: CliState = ctx.obj
    if not state.token:
        click.echo("no token configured", err=True)
        ctx.exit(EXIT_CLIENT)
    response = _request(ctx, state, "POST", "/api/v1/auth/token", json={"token": state.token})
    _emit(state, response.json())


@main.group()
def catalog():
    """Appliance catalog operations."""


@catalog.command()
@click.argument("file", type=click.Path(exists=True, dir_okay=False))
@click.option("--skip-existing", is_flag=True, help="Ignore appliances already registered.")
@click.pass_context
def seed(ctx, file, skip_existing):
    """Register every appliance in a JSON seed document."""
    state: CliState = ctx.obj
    with open(file, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc.get("appliances", doc if isinstance(doc, list) else [])
    count = 0
    for entry in entries:
        try:
            with state.client() as client:
                response = client.post("/api/v1/applications", json=entry)
        except httpx.HTTPError as exc:
            click.echo(f"CONNECTION_FAILED: {exc}", err=True)
            ctx.exit(EXIT_SERVER)
        if response.status_code == 409 and response.json().get("code") == "DUPLICATE_SLUG":
            if skip_existing:
                continue
            click.echo(f"DUPLICATE_SLUG: {entry.get('slug')}", err=True)
            ctx.exit(EXIT_CLIENT)
        if response.status_code >= 400:
            _fail(ctx, response)
        count += 1
    click.echo(count)


@catalog.command("list")
@click.option("--filter", "filter_text", default=None)
@click.pass_context
def catalog_list(ctx, filter_text):
    state: CliState = ctx.obj
    params = {"q": filter_text} if filter_text else {}
    response = _request(ctx, state, "GET", "/api/v1/applications", params=params)
    _emit(state, response.json())


@main.command()
@click.argument("slug")
@click.option("--version", "app_version", required=True)
@click.option("--cloud", required=True)
@click.option("--name", required=True)
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--creds", "creds_id", type=int, default=None, help="Saved credential set id.")
@click.option("--inline", "inline_pairs", multiple=True, help="Temporary credential field k=v.")
@click.option("--no-wait", is_flag=True)
@click.option("--timeout", "timeout_s", type=float, default=60.0, show_default=True)
@click.option("--poll-interval", type=float, default=1.0, show_default=True)
@click.pass_context
def launch(ctx, slug, app_version, cloud, name, config_file, creds_id, inline_pairs, no_wait, timeout_s, poll_interval):
    """Launch an appliance and wait for it to reach RUNNING."""
    state: CliState = ctx.obj
    if creds_id is not None and inline_pairs:
        click.echo("use either --creds or --inline, not both", err=True)
        ctx.exit(EXIT_CLIENT)
    if creds_id is not None:
        credentials = {"id": creds_id}
    elif inline_pairs:
        credentials = {}
        for pair in inline_pairs:
            key, sep, value = pair.partition("=")
            if not sep:
                click.echo(f"bad --inline value '{pair}', expected k=v", err=True)
                ctx.exit(EXIT_CLIENT)
            credentials[key] = value
    else:
        click.echo("credentials required: pass --creds ID or --inline k=v", err=True)
        ctx.exit(EXIT_CLIENT)

    config_app = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            config_app = json.load(fh)

    body = {
        "application": slug,
        "application_version": app_version,
        "name": name,
        "target_cloud": cloud,
        "config_app": config_app,
        "credentials": credentials,
    }
    response = _request(ctx, state, "POST", "/api/v1/deployments", json=body)
    accepted = response.json()
    if no_wait:
        _emit(state, accepted)
        ctx.exit(EXIT_OK)

    deployment_id = accepted["deployment_id"]
    deadline = time.monotonic() + timeout_s
    while True:
        detail = _request(ctx, state, "GET", f"/api/v1/deployments/{deployment_id}").json()
        status = detail["status"]
        if status == "RUNNING":
            launch_result = (detail.get("launch_result") or {}).get("cloudLaunch", {})
            _emit(
                state,
                {
                    "deployment_id": deployment_id,
                    "status": status,
                    "publicIP": launch_result.get("publicIP"),
                    "applicationURL": launch_result.get("applicationURL"),
                },
            )
            ctx.exit(EXIT_OK)
        if status == "FAILED":
            errors = [t.get("error") for t in detail.get("tasks", []) if t.get("error")]
            click.echo(f"LAUNCH_FAILED: {errors[-1] if errors else status}", err=True)
            ctx.exit(EXIT_SERVER)
        if time.monotonic() >= deadline:
            click.echo(f"TIMEOUT: deployment {deployment_id} still {status}", err=True)
            ctx.exit(EXIT_TIMEOUT)
        time.sleep(poll_interval)


@main.group()
def deployments():
    """Inspect and act on launched appliances."""


@deployments.command("list")
@click.pass_context
def deployments_list(ctx):
    state: CliState = ctx.obj
    response = _request(ctx, state, "GET", "/api/v1/deployments")
    rows = [
        {
            "id": d["id"],
            "name": d["name"],
            "application": d["application"],
            "cloud": d["target_cloud"],
            "status": d["status"],
            "publicIP": ((d.get("launch_result") or {}).get("cloudLaunch") or {}).get("publicIP"),
        }
        for d in response.json()
    ]
    _emit(state, rows)


@deployments.command("get")
@click.argument("deployment_id", type=int)
@click.pass_context
def deployments_get(ctx, deployment_id):
    state: CliState = ctx.obj
    response = _request(ctx, state, "GET", f"/api/v1/deployments/{deployment_id}")
    _emit(state, response.json())


@deployments.command("action")
@click.argument("deployment_id", type=int)
@click.argument("action", type=click.Choice(sorted(KIND_BY_ACTION)))
@click.option("--no-wait", is_flag=True)
@click.option("--timeout", "timeout_s", type=float, default=60.0, show_default=True)
@click.option("--poll-interval", type=float, default=1.0, show_default=True)
@click.pass_context
def deployments_action(ctx, deployment_id, action, no_wait, timeout_s, poll_interval):
    """Request a lifecycle task and wait for its outcome."""
    state: CliState = ctx.obj
    kind = KIND_BY_ACTION[action]
    response = _request(
        ctx, state, "POST", f"/api/v1/deployments/{deployment_id}/tasks", json={"kind": kind}
    )
    task_id = response.json()["task_id"]
    if no_wait:
        _emit(state, {"task_id": task_id, "kind": kind})
        ctx.exit(EXIT_OK)
    deadline = time.monotonic() + timeout_s
    while True:
        task = _request(
            ctx, state, "GET", f"/api/v1/deployments/{deployment_id}/tasks/{task_id}"
        ).json()
        if task["status"] in ("SUCCESS", "FAILED"):
            if action == "health" and task["status"] == "SUCCESS":
                click.echo((task.get("result") or {}).get("state", "UNKNOWN"))
            else:
                _emit(state, {"task_id": task_id, "status": task["status"], "result": task.get("result"), "error": task.get("error")})
            ctx.exit(EXIT_OK if task["status"] == "SUCCESS" else EXIT_SERVER)
        if time.monotonic() >= deadline:
            click.echo(f"TIMEOUT: task {task_id} still {task['status']}", err=True)
            ctx.exit(EXIT_TIMEOUT)
        time.sleep(poll_interval)


@main.group()
def worker():
    """Task worker (operator side; talks to the store directly)."""


@worker.command("run")
@click.option("--once", is_flag=True, help="Execute one polling round and exit.")
@click.option("--interval", type=float, default=1.0, show_default=True)
@click.pass_obj
def worker_run(state: CliState, once, interval):
    components = state.components()
    runner = make_worker(components)
    if once:
        click.echo(runner.poll_and_run())
        return
    click.echo(f"worker {runner.worker_id} polling every {interval}s", err=True)
    while True:
        executed = runner.poll_and_run()
        if executed == 0:
            time.sleep(interval)


@main.group()
def sim():
    """Simulated-cloud controls (operator side)."""


@sim.command("advance")
@click.argument("cloud_id")
@click.argument("ticks", type=int)
@click.pass_context
def sim_advance(ctx, cloud_id, ticks):
    """Advance a simulated cloud's logical clock; prints the new tick."""
    state: CliState = ctx.obj
    components = state.components()
    try:
        tick = components.providers.sim_advance(cloud_id, ticks)
    except Exception as exc:
        click.echo(f"{getattr(exc, 'code', 'ERROR')}: {exc}", err=True)
        ctx.exit(EXIT_CLIENT)
    click.echo(tick)


if __name__ == "__main__":
    main()
