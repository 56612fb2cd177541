"""The REST surface: applications, infrastructure, deployments, authentication.

Handlers are stateless brokers between clients and the catalog, engine,
vault, and cloud facade; any request sequence produces the same responses
whether served by one process or several, because every piece of state
round-trips through the store. Deployment creation is asynchronous: the
request returns 202 once validation and persistence succeed, and the
deployment resource URL is polled for progress.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import re
import secrets

from fastapi import Depends, FastAPI, Header, Query, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict

from .errors import DuplicateUsername, GatewayError, Unauthenticated, ValidationError
from .util import canonical_json

API_PREFIX = "/api/v1"

USERNAME_RE = re.compile(r"^[a-z0-9_-]{3,32}$")

# HTTP status for each machine code; the exception taxonomy itself guarantees
# one code per error class.
HTTP_STATUS_BY_CODE = {
    "VALIDATION_ERROR": 400,
    "INVALID_NAME": 400,
    "SCHEMA_VIOLATION": 400,
    "EMPTY_QUERY": 400,
    "INVALID_CREDENTIALS": 400,
    "NOT_SIM_CLOUD": 400,
    "UNRESOLVABLE_PLUGIN": 400,
    "CYCLIC_COMPOSITION": 400,
    "UNAUTHENTICATED": 401,
    "NOT_OWNER": 403,
    "UNKNOWN_CLOUD": 404,
    "UNKNOWN_APPLIANCE": 404,
    "UNKNOWN_VERSION": 404,
    "NOT_AVAILABLE_ON_CLOUD": 404,
    "UNKNOWN_DEPLOYMENT": 404,
    "UNKNOWN_TASK": 404,
    "UNKNOWN_CREDENTIAL": 404,
    "UNKNOWN_VM_TYPE": 404,
    "UNKNOWN_IMAGE": 404,
    "UNKNOWN_INSTANCE": 404,
    "DUPLICATE_SLUG": 409,
    "DUPLICATE_USERNAME": 409,
    "CONFLICTING_TASK": 409,
    "DUPLICATE_KEY": 409,
    "CONFLICT": 409,
    "QUOTA_EXCEEDED": 409,
    "INSTANCE_NOT_RUNNING": 409,
    "INSTANCE_TERMINATED": 409,
    "UNSUPPORTED_PROVIDER": 501,
    "REGISTRY_UNAVAILABLE": 502,
    "TIMEOUT": 504,
    "INTEGRITY_ERROR": 500,
    "UNKNOWN_KEY": 500,
    "LAUNCH_STEP_FAILED": 500,
    "DOWNGRADE_UNSUPPORTED": 500,
    "GATEWAY_ERROR": 500,
}


def hash_token(token: str) -> str:
    return hashlib.sha256(token.encode()).hexdigest()


# -- request bodies ------------------------------------------------------------


class RegisterBody(BaseModel):
    username: str


class TokenBody(BaseModel):
    token: str


class CredentialsBody(BaseModel):
    cloud_type: str
    name: str
    fields: dict[str, str]


class ApplianceBody(BaseModel):
    model_config = ConfigDict(extra="allow")

    slug: str
    display_name: str = ""
    summary: str = ""
    frontend_plugin_path: str
    backend_plugin_path: str
    versions: list[dict]


class LaunchBody(BaseModel):
    model_config = ConfigDict(extra="allow")

    application: str
    application_version: str
    name: str
    target_cloud: str
    config_app: dict
    credentials: dict


class TaskRequestBody(BaseModel):
    kind: str


# -- response bodies -----------------------------------------------------------


class ApiErrorBody(BaseModel):
    code: str
    message: str
    field_path: str | None = None


class ApplianceSummary(BaseModel):
    slug: str
    display_name: str
    summary: str
    versions: list[str]


class ApplianceDetail(BaseModel):
    slug: str
    display_name: str
    summary: str
    frontend_plugin_path: str
    backend_plugin_path: str
    versions: list[dict]


class SlugCreated(BaseModel):
    slug: str


class CloudInfo(BaseModel):
    cloud_id: str
    cloud_type: str
    display_name: str
    region_name: str


class VmTypeInfo(BaseModel):
    name: str
    vcpus: int
    ram_gb: float
    root_disk_gb: int


class KeyPairInfo(BaseModel):
    name: str
    public_material: str
    created_at: int


class SecurityGroupInfo(BaseModel):
    name: str
    rules: list[dict]


class InstanceInfo(BaseModel):
    instance_id: str
    vm_type: str
    image_id: str
    state: str
    key_pair: str
    security_groups: list[str]
    private_ip: str
    public_ip: str | None
    launched_at_tick: int


class TaskInfo(BaseModel):
    id: int
    deployment_id: int
    kind: str
    status: str
    progress_log: list
    result: dict | None
    error: str | None
    created_at: str


class DeploymentSummary(BaseModel):
    id: int
    name: str
    application: str
    application_version: str
    target_cloud: str
    status: str
    credentials: str
    config_app: dict
    launch_result: dict | None
    created_at: str


class DeploymentDetail(DeploymentSummary):
    tasks: list[TaskInfo]


class LaunchAccepted(BaseModel):
    deployment_id: int
    task_id: int
    location: str


class TaskAccepted(BaseModel):
    task_id: int
    location: str


class UserCreated(BaseModel):
    id: int
    username: str
    token: str


class TokenInfo(BaseModel):
    user_id: int
    username: str


class CredentialInfo(BaseModel):
    id: int
    cloud_type: str
    name: str
    fields: dict[str, str]
    created_at: str


# -- app factory -----------------------------------------------------------------


def create_app(components) -> FastAPI:
    app = FastAPI(
        title="cloudgate",
        version="0.1.0",
        description="Appliance deployment gateway over interchangeable cloud providers",
    )
    app.state.components = components
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def comp(request: Request):
        return request.app.state.components

    def current_user(request: Request, authorization: str | None = Header(default=None)) -> dict:
        if not authorization or not authorization.startswith("Bearer "):
            raise Unauthenticated("missing bearer token")
        presented = hash_token(authorization.removeprefix("Bearer ").strip())
        user = comp(request).store.get_user_by_token_hash(presented)
        if user is None or not hmac.compare_digest(presented, user["token_hash"]):
            raise Unauthenticated("invalid token")
        return user

    @app.exception_handler(GatewayError)
    async def gateway_error_handler(_request, exc: GatewayError):
        status = HTTP_STATUS_BY_CODE.get(exc.code, 500)
        body = ApiErrorBody(code=exc.code, message=exc.message, field_path=exc.field_path)
        return JSONResponse(status_code=status, content=body.model_dump())

    @app.exception_handler(RequestValidationError)
    async def body_error_handler(_request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        loc = ".".join(str(p) for p in first.get("loc", []) if p != "body")
        body = ApiErrorBody(
            code="VALIDATION_ERROR",
            message=first.get("msg", "invalid request body"),
            field_path=loc or None,
        )
        return JSONResponse(status_code=400, content=body.model_dump())

    # -- applications ------------------------------------------------------------

    @app.get(f"{API_PREFIX}/applications", response_model=list[ApplianceSummary])
    def list_applications(
        request: Request,
        q: str | None = Query(default=None),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        summaries = comp(request).catalog.list_appliances(q)
        return summaries[offset : offset + limit]

    @app.post(f"{API_PREFIX}/applications", response_model=SlugCreated, status_code=201)
    def register_application(
        request: Request, body: ApplianceBody, user: dict = Depends(current_user)
    ):
        slug = comp(request).catalog.register_appliance(body.model_dump())
        return {"slug": slug}

    @app.get(f"{API_PREFIX}/applications/{{slug}}", response_model=ApplianceDetail)
    def get_application(request: Request, slug: str):
        return comp(request).catalog.get_appliance(slug).to_doc()

    # -- infrastructure (read-side mirror of the cloud facade) ---------------------

    def cloud_credentials(
        request: Request,
        user: dict,
        credentials_id: int | None,
        header_creds: str | None,
    ) -> dict:
        if credentials_id is not None:
            return comp(request).vault.retrieve_credentials(user["id"], credentials_id)
        if header_creds:
            try:
                parsed = json.loads(header_creds)
            except ValueError:
                raise ValidationError("X-Cloud-Credentials is not valid JSON")
            if not isinstance(parsed, dict):
                raise ValidationError("X-Cloud-Credentials must be a JSON object")
            return parsed
        raise ValidationError(
            "pass credentials_id or an X-Cloud-Credentials header to query this cloud"
        )

    @app.get(f"{API_PREFIX}/infrastructure/clouds", response_model=list[CloudInfo])
    def list_clouds(
        request: Request,
        user: dict = Depends(current_user),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        clouds = [d.public_doc() for d in comp(request).providers.list_clouds()]
        return clouds[offset : offset + limit]

    @app.get(f"{API_PREFIX}/infrastructure/clouds/{{cloud_id}}/vm_types", response_model=list[VmTypeInfo])
    def list_vm_types(
        request: Request,
        cloud_id: str,
        user: dict = Depends(current_user),
        credentials_id: int | None = Query(default=None),
        x_cloud_credentials: str | None = Header(default=None),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        creds = cloud_credentials(request, user, credentials_id, x_cloud_credentials)
        vm_types = comp(request).providers.list_vm_types(cloud_id, creds)
        return [vm.to_doc() for vm in vm_types][offset : offset + limit]

    @app.get(f"{API_PREFIX}/infrastructure/clouds/{{cloud_id}}/keypairs", response_model=list[KeyPairInfo])
    def list_keypairs(
        request: Request,
        cloud_id: str,
        user: dict = Depends(current_user),
        credentials_id: int | None = Query(default=None),
        x_cloud_credentials: str | None = Header(default=None),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        creds = cloud_credentials(request, user, credentials_id, x_cloud_credentials)
        pairs = comp(request).providers.list_key_pairs(cloud_id, creds)
        return [p.to_doc() for p in pairs][offset : offset + limit]

    @app.get(
        f"{API_PREFIX}/infrastructure/clouds/{{cloud_id}}/security_groups",
        response_model=list[SecurityGroupInfo],
    )
    def list_security_groups(
        request: Request,
        cloud_id: str,
        user: dict = Depends(current_user),
        credentials_id: int | None = Query(default=None),
        x_cloud_credentials: str | None = Header(default=None),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        creds = cloud_credentials(request, user, credentials_id, x_cloud_credentials)
        groups = comp(request).providers.list_security_groups(cloud_id, creds)
        return [g.to_doc() for g in groups][offset : offset + limit]

    @app.get(f"{API_PREFIX}/infrastructure/clouds/{{cloud_id}}/instances", response_model=list[InstanceInfo])
    def list_instances(
        request: Request,
        cloud_id: str,
        user: dict = Depends(current_user),
        credentials_id: int | None = Query(default=None),
        x_cloud_credentials: str | None = Header(default=None),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        creds = cloud_credentials(request, user, credentials_id, x_cloud_credentials)
        instances = comp(request).providers.list_instances(cloud_id, creds)
        docs = []
        for inst in instances:
            doc = inst.to_doc()
            doc.pop("user_data", None)  # opaque appliance payload, may hold secrets
            doc.pop("extras", None)
            docs.append(doc)
        return docs[offset : offset + limit]

    # -- deployments --------------------------------------------------------------

    @app.get(f"{API_PREFIX}/deployments", response_model=list[DeploymentSummary])
    def list_deployments(
        request: Request,
        user: dict = Depends(current_user),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        return comp(request).engine.list_deployments(user["id"], limit, offset)

    @app.post(f"{API_PREFIX}/deployments", response_model=LaunchAccepted, status_code=202)
    def create_deployment(request: Request, body: LaunchBody, user: dict = Depends(current_user)):
        deployment_id, task_id = comp(request).engine.create_deployment(
            body.model_dump(), user["id"]
        )
        return {
            "deployment_id": deployment_id,
            "task_id": task_id,
            "location": f"{API_PREFIX}/deployments/{deployment_id}",
        }

    @app.get(f"{API_PREFIX}/deployments/{{deployment_id}}", response_model=DeploymentDetail)
    def get_deployment(request: Request, deployment_id: int, user: dict = Depends(current_user)):
        return comp(request).engine.get_deployment(deployment_id, user["id"])

    @app.post(
        f"{API_PREFIX}/deployments/{{deployment_id}}/tasks",
        response_model=TaskAccepted,
        status_code=202,
    )
    def request_task(
        request: Request,
        deployment_id: int,
        body: TaskRequestBody,
        user: dict = Depends(current_user),
    ):
        task_id = comp(request).engine.request_action(deployment_id, body.kind, user["id"])
        return {
            "task_id": task_id,
            "location": f"{API_PREFIX}/deployments/{deployment_id}/tasks/{task_id}",
        }

    @app.get(
        f"{API_PREFIX}/deployments/{{deployment_id}}/tasks/{{task_id}}",
        response_model=TaskInfo,
    )
    def get_task(
        request: Request, deployment_id: int, task_id: int, user: dict = Depends(current_user)
    ):
        return comp(request).engine.get_task(deployment_id, task_id, user["id"])

    # -- authentication -------------------------------------------------------------

    @app.post(f"{API_PREFIX}/auth/register", response_model=UserCreated, status_code=201)
    def register(request: Request, body: RegisterBody):
        username = body.username.strip()
        if not USERNAME_RE.match(username):
            raise ValidationError(
                "usernames are 3-32 characters of lowercase letters, digits,"
                " underscores, and dashes",
                field_path="username",
            )
        store = comp(request).store
        if store.get_user_by_username(username) is not None:
            raise DuplicateUsername(f"username '{username}' is taken")
        token = secrets.token_urlsafe(32)
        user_id = store.create_user(username, hash_token(token))
        # The raw token is shown exactly once.
        return {"id": user_id, "username": username, "token": token}

    @app.post(f"{API_PREFIX}/auth/token", response_model=TokenInfo)
    def introspect_token(request: Request, body: TokenBody):
        user = comp(request).store.get_user_by_token_hash(hash_token(body.token))
        if user is None:
            raise Unauthenticated("invalid token")
        return {"user_id": user["id"], "username": user["username"]}

    @app.get(f"{API_PREFIX}/auth/user/credentials", response_model=list[CredentialInfo])
    def list_credentials(
        request: Request,
        user: dict = Depends(current_user),
        limit: int = Query(default=20, ge=1, le=200),
        offset: int = Query(default=0, ge=0),
    ):
        return comp(request).vault.list_credentials(user["id"], limit, offset)

    @app.post(f"{API_PREFIX}/auth/user/credentials", response_model=CredentialInfo, status_code=201)
    def save_credentials(request: Request, body: CredentialsBody, user: dict = Depends(current_user)):
        vault = comp(request).vault
        cred_id = vault.store_credentials(user["id"], body.cloud_type, body.name, body.fields)
        return vault.describe_credentials(user["id"], cred_id)

    @app.delete(f"{API_PREFIX}/auth/user/credentials/{{cred_id}}", status_code=204)
    def delete_credentials(request: Request, cred_id: int, user: dict = Depends(current_user)):
        comp(request).vault.delete_credentials(user["id"], cred_id)
        return Response(status_code=204)

    return app


def serve_openapi_document(app: FastAPI) -> str:
    """Canonical bytes of the machine-readable API description."""
    return canonical_json(app.openapi())


def declared_routes(app: FastAPI) -> set[tuple[str, str]]:
    """(method, path) pairs for every business route the service exposes."""
    routes = set()
    for route in app.routes:
        path = getattr(route, "path", "")
        if not path.startswith(API_PREFIX):
            continue
        for method in route.methods - {"HEAD", "OPTIONS"}:
            routes.add((method, path))
    return routes
