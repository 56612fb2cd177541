"""Deployment and task orchestration.

``Engine`` is the request-side API: it validates launch requests
synchronously, persists a deployment plus its LAUNCH task in one
transaction, and records lifecycle action requests. ``Worker`` is the
execution side: it atomically claims pending tasks from the store and runs
the owning plugin's action. The two share nothing but the store, so any
number of API handlers and workers can run in separate processes.
"""

from __future__ import annotations

import re
from enum import Enum

from . import plugins as plugins_mod
from .errors import (
    ConflictingTask,
    Conflict,
    InvalidName,
    NotOwner,
    UnknownCloud,
    UnknownDeployment,
    UnknownTask,
    ValidationError,
)
from .facade import validate_credentials
from .store import new_worker_id
from .util import utc_now_iso

NAME_RE = re.compile(r"^[a-z0-9_-]{1,63}$")

LAUNCH_REQUEST_REQUIRED = (
    "application",
    "application_version",
    "name",
    "target_cloud",
    "config_app",
    "credentials",
)
# Clients may echo the target cloud's descriptor under "cloud"; it is display
# metadata and carries no authority.
LAUNCH_REQUEST_ALLOWED = LAUNCH_REQUEST_REQUIRED + ("cloud",)


class TaskKind(str, Enum):
    LAUNCH = "LAUNCH"
    HEALTH_CHECK = "HEALTH_CHECK"
    RESTART = "RESTART"
    DELETE = "DELETE"


class TaskStatus(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    SUCCESS = "SUCCESS"
    FAILED = "FAILED"


class DeploymentStatus(str, Enum):
    LAUNCHING = "LAUNCHING"
    RUNNING = "RUNNING"
    FAILED = "FAILED"
    DELETED = "DELETED"


MUTATING_KINDS = (TaskKind.LAUNCH.value, TaskKind.RESTART.value, TaskKind.DELETE.value)
ACTION_KINDS = (TaskKind.HEALTH_CHECK.value, TaskKind.RESTART.value, TaskKind.DELETE.value)


def valid_name(name) -> bool:
    return isinstance(name, str) and bool(NAME_RE.match(name))


def slugify(display_name: str) -> str:
    """Client-side helper mirrored by the UI: 'Demo Ubuntu launch' ->
    'demo-ubuntu-launch'. The server itself stays strict and rejects."""
    slug = re.sub(r"[^a-z0-9_-]+", "-", str(display_name).lower()).strip("-_")
    return slug[:63] or "deployment"


class Engine:
    def __init__(self, store, catalog, plugin_registry, providers, vault):
        self._store = store
        self._catalog = catalog
        self._plugins = plugin_registry
        self._providers = providers
        self._vault = vault

    def create_deployment(self, request: dict, user_id: int) -> tuple[int, int]:
        if not isinstance(request, dict):
            raise ValidationError("launch request must be an object")
        for key in LAUNCH_REQUEST_REQUIRED:
            if key not in request:
                raise ValidationError(f"missing field '{key}'", field_path=key)
        for key in request:
            if key not in LAUNCH_REQUEST_ALLOWED:
                raise ValidationError(f"unexpected field '{key}'", field_path=key)
        if "cloud" in request and not isinstance(request["cloud"], dict):
            raise ValidationError("'cloud' must be an object", field_path="cloud")

        name = request["name"]
        if not valid_name(name):
            raise InvalidName(
                "deployment names are 1-63 characters of lowercase letters, digits,"
                " underscores, and dashes",
                field_path="name",
            )

        cloud_id = request["target_cloud"]
        if not self._providers.has_cloud(cloud_id):
            raise UnknownCloud(f"no cloud registered as '{cloud_id}'")
        descriptor = self._catalog.resolve_launch_descriptor(
            request["application"], request["application_version"], cloud_id
        )
        cloud_type = self._providers.describe(cloud_id).cloud_type.value

        credentials_ref, fields = self._resolve_credentials(
            request["credentials"], user_id, cloud_type
        )
        validate_credentials(cloud_type, fields)

        plugin = self._plugins.resolve(descriptor.backend_plugin_path)
        app_config = request["config_app"]
        user_data = plugins_mod.validate_launch_config(
            plugin, name, descriptor.cloud_config, fields, app_config
        )
        sanitised = plugin.sanitise_app_config(app_config)

        payload_cipher = self._vault.encrypt_blob(
            {"app_config": app_config, "user_data": user_data, "credentials": fields}
        )
        credentials_cipher = (
            self._vault.encrypt_blob(fields) if credentials_ref == "inline" else None
        )
        return self._store.create_deployment_with_task(
            user_id=user_id,
            name=name,
            app_slug=descriptor.slug,
            app_version=descriptor.version,
            cloud_id=cloud_id,
            credentials_ref=credentials_ref,
            credentials_cipher=credentials_cipher,
            app_config=sanitised,
            task_kind=TaskKind.LAUNCH.value,
            payload_cipher=payload_cipher,
        )

    def _resolve_credentials(self, block, user_id: int, cloud_type: str) -> tuple[str, dict]:
        if not isinstance(block, dict) or not block:
            raise ValidationError("credentials must be a non-empty object", field_path="credentials")
        if "id" in block or "url" in block:
            cred_id = block.get("id")
            if cred_id is None:
                match = re.search(r"/(\d+)/?$", str(block.get("url", "")))
                if match is None:
                    raise ValidationError(
                        "saved-credentials reference has no id", field_path="credentials.url"
                    )
                cred_id = int(match.group(1))
            fields = self._vault.retrieve_credentials(user_id, int(cred_id))
            return f"saved:{cred_id}", fields
        # Temporary credentials: used for this launch's task chain, persisted
        # only as keyring ciphertext on the deployment.
        self._vault.check_schema(cloud_type, block)
        return "inline", {k: str(v) for k, v in block.items()}

    def request_action(self, deployment_id: int, kind: str, user_id: int) -> int:
        record = self._owned_deployment(deployment_id, user_id)
        if kind not in ACTION_KINDS:
            raise ValidationError(f"unsupported task kind '{kind}'", field_path="kind")
        exclusive = MUTATING_KINDS if kind in MUTATING_KINDS else ()
        try:
            return self._store.create_action_task(record["id"], kind, None, exclusive)
        except Conflict:
            raise ConflictingTask(
                f"a mutating task is already in flight for deployment {deployment_id}"
            )

    def get_deployment(self, deployment_id: int, user_id: int) -> dict:
        record = self._owned_deployment(deployment_id, user_id)
        tasks = [task_view(t) for t in self._store.list_tasks(record["id"])]
        return deployment_view(record, tasks)

    def list_deployments(self, user_id: int, limit: int = 20, offset: int = 0) -> list[dict]:
        return [
            deployment_view(record, None)
            for record in self._store.list_deployments(user_id, limit, offset)
        ]

    def get_task(self, deployment_id: int, task_id: int, user_id: int) -> dict:
        self._owned_deployment(deployment_id, user_id)
        task = self._store.get_task(task_id)
        if task is None or task["deployment_id"] != deployment_id:
            raise UnknownTask(f"deployment {deployment_id} has no task {task_id}")
        return task_view(task)

    def _owned_deployment(self, deployment_id: int, user_id: int) -> dict:
        record = self._store.get_deployment(deployment_id)
        if record is None:
            raise UnknownDeployment(f"no deployment {deployment_id}")
        if record["user_id"] != user_id:
            raise NotOwner(f"deployment {deployment_id} belongs to another user")
        return record


def deployment_view(record: dict, tasks: list[dict] | None) -> dict:
    view = {
        "id": record["id"],
        "name": record["name"],
        "application": record["app_slug"],
        "application_version": record["app_version"],
        "target_cloud": record["cloud_id"],
        "status": record["status"],
        "credentials": record["credentials_ref"],
        "config_app": record["app_config"],
        "launch_result": record["launch_result"],
        "created_at": record["created_at"],
    }
    if tasks is not None:
        view["tasks"] = tasks
    return view


def task_view(task: dict) -> dict:
    return {
        "id": task["id"],
        "deployment_id": task["deployment_id"],
        "kind": task["kind"],
        "status": task["status"],
        "progress_log": task["progress"],
        "result": task["result"],
        "error": task["error"],
        "created_at": task["created_at"],
    }


class Worker:
    """Claims and executes tasks; safe to run many of these concurrently."""

    def __init__(
        self,
        store,
        catalog,
        plugin_registry,
        providers,
        vault,
        worker_id: str | None = None,
        lease_seconds: float = 600.0,
    ):
        self._store = store
        self._catalog = catalog
        self._plugins = plugin_registry
        self._providers = providers
        self._vault = vault
        self.worker_id = worker_id or new_worker_id()
        self.lease_seconds = lease_seconds
        self.executed: list[int] = []

    def poll_and_run(self, max_tasks: int | None = None) -> int:
        count = 0
        while max_tasks is None or count < max_tasks:
            task = self._store.claim_task(self.worker_id, self.lease_seconds)
            if task is None:
                break
            self._execute(task)
            count += 1
        return count

    def _execute(self, task: dict) -> None:
        self.executed.append(task["id"])
        deployment = self._store.get_deployment(task["deployment_id"])
        kind = task["kind"]
        try:
            provider = self._providers.provider(deployment["cloud_id"])
            descriptor = self._catalog.resolve_launch_descriptor(
                deployment["app_slug"], deployment["app_version"], deployment["cloud_id"]
            )
            plugin = self._plugins.resolve(descriptor.backend_plugin_path)
            if kind == TaskKind.LAUNCH.value:
                self._run_launch(task, deployment, descriptor, plugin, provider)
            elif kind == TaskKind.HEALTH_CHECK.value:
                credentials = self._credentials_for(deployment)
                status = plugin.health_check(provider, deployment, credentials)
                self._store.finish_task(task["id"], TaskStatus.SUCCESS.value, result=status.to_doc())
            elif kind == TaskKind.RESTART.value:
                credentials = self._credentials_for(deployment)
                outcome = plugin.restart(provider, deployment, credentials)
                if outcome.updates:
                    self._store.merge_launch_result(deployment["id"], outcome.updates)
                self._store.finish_task(
                    task["id"],
                    TaskStatus.SUCCESS.value,
                    result={"restarted": outcome.restarted, **outcome.updates},
                )
            elif kind == TaskKind.DELETE.value:
                credentials = self._credentials_for(deployment)
                plugin.delete(provider, deployment, credentials)
                self._store.finish_task(
                    task["id"], TaskStatus.SUCCESS.value, result={"deleted": True}
                )
                self._store.set_deployment_outcome(
                    deployment["id"], DeploymentStatus.DELETED.value
                )
            else:
                raise ValidationError(f"unknown task kind '{kind}'")
        except Exception as exc:
            self._store.finish_task(task["id"], TaskStatus.FAILED.value, error=str(exc))
            if kind == TaskKind.LAUNCH.value:
                self._store.set_deployment_outcome(
                    deployment["id"], DeploymentStatus.FAILED.value
                )

    def _run_launch(self, task, deployment, descriptor, plugin, provider) -> None:
        payload = self._vault.decrypt_blob(task["payload_cipher"])
        task_id = task["id"]
        context = plugins_mod.LaunchContext(
            provider=provider,
            app_slug=deployment["app_slug"],
            reporter=lambda step, message: self._store.append_task_progress(
                task_id, [utc_now_iso(), step, message]
            ),
        )
        result = plugin.launch_app(
            context,
            deployment["name"],
            descriptor.cloud_config,
            payload["credentials"],
            payload["app_config"],
            payload["user_data"],
        )
        self._store.finish_task(task_id, TaskStatus.SUCCESS.value, result=result)
        self._store.set_deployment_outcome(
            deployment["id"], DeploymentStatus.RUNNING.value, launch_result=result
        )

    def _credentials_for(self, deployment: dict) -> dict:
        ref = deployment["credentials_ref"]
        if ref.startswith("saved:"):
            return self._vault.retrieve_credentials(
                deployment["user_id"], int(ref.split(":", 1)[1])
            )
        return self._vault.decrypt_blob(deployment["credentials_cipher"])
