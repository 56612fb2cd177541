import json
import time

import pytest
from fastapi.testclient import TestClient

import cloudgate.errors as errors_mod
from cloudgate.api import HTTP_STATUS_BY_CODE, create_app, declared_routes, serve_openapi_document
from cloudgate.errors import GatewayError
from cloudgate.runtime import make_worker

from conftest import (
    CLOUD_AWS,
    SIM_CREDS,
    fig6_shaped_payload,
    memory_components,
    register_user,
    save_sim_credentials,
)

# The complete business surface: four top-level endpoint families.
EXPECTED_ROUTES = {
    ("GET", "/api/v1/applications"),
    ("POST", "/api/v1/applications"),
    ("GET", "/api/v1/applications/{slug}"),
    ("GET", "/api/v1/infrastructure/clouds"),
    ("GET", "/api/v1/infrastructure/clouds/{cloud_id}/vm_types"),
    ("GET", "/api/v1/infrastructure/clouds/{cloud_id}/keypairs"),
    ("GET", "/api/v1/infrastructure/clouds/{cloud_id}/security_groups"),
    ("GET", "/api/v1/infrastructure/clouds/{cloud_id}/instances"),
    ("GET", "/api/v1/deployments"),
    ("POST", "/api/v1/deployments"),
    ("GET", "/api/v1/deployments/{deployment_id}"),
    ("POST", "/api/v1/deployments/{deployment_id}/tasks"),
    ("GET", "/api/v1/deployments/{deployment_id}/tasks/{task_id}"),
    ("POST", "/api/v1/auth/register"),
    ("POST", "/api/v1/auth/token"),
    ("GET", "/api/v1/auth/user/credentials"),
    ("POST", "/api/v1/auth/user/credentials"),
    ("DELETE", "/api/v1/auth/user/credentials/{cred_id}"),
}


class TestRouteTable:
    def test_service_exposes_exactly_the_documented_routes(self, components):
        app = create_app(components)
        assert declared_routes(app) == EXPECTED_ROUTES

    def test_openapi_document_covers_every_route(self, components):
        app = create_app(components)
        doc = app.openapi()
        documented = {
            (method.upper(), path)
            for path, methods in doc["paths"].items()
            for method in methods
        }
        assert documented == EXPECTED_ROUTES

    def test_every_route_has_request_and_response_schema(self, components):
        doc = create_app(components).openapi()
        for path, methods in doc["paths"].items():
            for method, operation in methods.items():
                assert "responses" in operation, f"{method} {path}"
                success = [s for s in operation["responses"] if s.startswith("2")]
                assert success, f"{method} {path} has no success response"
                for status in success:
                    body = operation["responses"][status]
                    if status == "204":
                        continue
                    assert "content" in body, f"{method} {path} {status} lacks a schema"
                if method == "post":
                    assert "requestBody" in operation, f"{method} {path} lacks a request schema"

    def test_openapi_regeneration_is_byte_identical(self, components):
        first = serve_openapi_document(create_app(components))
        second = serve_openapi_document(create_app(components))
        assert first == second


class TestAuth:
    def test_register_shows_token_once_and_it_works(self, client):
        body, headers = register_user(client, "carol")
        assert body["username"] == "carol"
        check = client.post("/api/v1/auth/token", json={"token": body["token"]})
        assert check.status_code == 200
        assert check.json() == {"user_id": body["id"], "username": "carol"}

    def test_garbage_token_is_401(self, client):
        response = client.get(
            "/api/v1/deployments", headers={"Authorization": "Bearer garbage"}
        )
        assert response.status_code == 401
        assert response.json()["code"] == "UNAUTHENTICATED"

    def test_missing_token_is_401(self, client):
        assert client.get("/api/v1/deployments").status_code == 401

    def test_duplicate_username_conflict(self, client):
        register_user(client, "dave")
        response = client.post("/api/v1/auth/register", json={"username": "dave"})
        assert response.status_code == 409
        assert response.json()["code"] == "DUPLICATE_USERNAME"

    def test_catalog_browsing_is_public(self, client):
        response = client.get("/api/v1/applications")
        assert response.status_code == 200
        assert [a["slug"] for a in response.json()] == [
            "docker-launch",
            "lab-workbench",
            "ubuntu",
            "web-starter",
        ]
        assert client.get("/api/v1/applications/ubuntu").status_code == 200

    def test_everything_else_requires_auth(self, client):
        assert client.get("/api/v1/infrastructure/clouds").status_code == 401
        assert client.post("/api/v1/applications", json={}).status_code == 401
        assert client.get("/api/v1/auth/user/credentials").status_code == 401

    def test_foreign_deployment_is_403(self, client, components):
        _alice, alice_headers = register_user(client, "alice")
        cred_id = save_sim_credentials(client, alice_headers)
        launch = client.post(
            "/api/v1/deployments",
            json=fig6_shaped_payload({"id": cred_id}),
            headers=alice_headers,
        )
        deployment_id = launch.json()["deployment_id"]
        _bob, bob_headers = register_user(client, "bob")
        response = client.get(f"/api/v1/deployments/{deployment_id}", headers=bob_headers)
        assert response.status_code == 403
        assert response.json()["code"] == "NOT_OWNER"


class TestDeploymentRoutes:
    def test_documented_payload_accepted_asynchronously(self, client):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        response = client.post(
            "/api/v1/deployments", json=fig6_shaped_payload({"id": cred_id}), headers=headers
        )
        assert response.status_code == 202
        body = response.json()
        assert set(body) == {"deployment_id", "task_id", "location"}
        detail = client.get(body["location"], headers=headers)
        assert detail.status_code == 200
        assert detail.json()["status"] == "LAUNCHING"

    def test_invalid_name_maps_to_machine_code(self, client):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        response = client.post(
            "/api/v1/deployments",
            json=fig6_shaped_payload({"id": cred_id}, name="Bad Name"),
            headers=headers,
        )
        assert response.status_code == 400
        body = response.json()
        assert body["code"] == "INVALID_NAME"
        assert body["field_path"] == "name"

    def test_response_time_independent_of_boot_delay(self):
        clouds = json.loads(json.dumps(memory_components().settings.clouds))
        for cloud in clouds:
            if "sim" in cloud:
                cloud["sim"]["boot_delay_ticks"] = 10_000
        components = memory_components(clouds=clouds)
        with TestClient(create_app(components)) as client:
            _user, headers = register_user(client)
            cred_id = save_sim_credentials(client, headers)
            started = time.monotonic()
            response = client.post(
                "/api/v1/deployments", json=fig6_shaped_payload({"id": cred_id}), headers=headers
            )
            elapsed = time.monotonic() - started
        assert response.status_code == 202
        assert elapsed < 1.0

    def test_task_request_and_detail(self, client, components):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        accepted = client.post(
            "/api/v1/deployments", json=fig6_shaped_payload({"id": cred_id}), headers=headers
        ).json()
        make_worker(components).poll_and_run()
        response = client.post(
            f"/api/v1/deployments/{accepted['deployment_id']}/tasks",
            json={"kind": "HEALTH_CHECK"},
            headers=headers,
        )
        assert response.status_code == 202
        make_worker(components).poll_and_run()
        task = client.get(response.json()["location"], headers=headers).json()
        assert task["status"] == "SUCCESS"
        assert task["result"]["state"] == "HEALTHY"

    def test_pagination_defaults_and_bounds(self, client):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        for i in range(25):
            client.post(
                "/api/v1/deployments",
                json=fig6_shaped_payload({"id": cred_id}, name=f"dep-{i:02d}"),
                headers=headers,
            )
        default_page = client.get("/api/v1/deployments", headers=headers).json()
        assert len(default_page) == 20
        second_page = client.get(
            "/api/v1/deployments", params={"offset": 20}, headers=headers
        ).json()
        assert len(second_page) == 5
        assert second_page[0]["name"] == "dep-20"


class TestInfrastructureRoutes:
    def test_reads_require_credentials_and_mirror_facade(self, client, components):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        response = client.get(
            f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/vm_types",
            params={"credentials_id": cred_id},
            headers=headers,
        )
        assert response.status_code == 200
        names = [vm["name"] for vm in response.json()]
        assert "c5.large" in names and names == sorted(names)

    def test_temporary_credentials_header(self, client):
        _user, headers = register_user(client)
        response = client.get(
            f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/vm_types",
            headers={**headers, "X-Cloud-Credentials": json.dumps(SIM_CREDS)},
        )
        assert response.status_code == 200

    def test_missing_credentials_is_client_error(self, client):
        _user, headers = register_user(client)
        response = client.get(
            f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/vm_types", headers=headers
        )
        assert response.status_code == 400

    def test_infrastructure_reads_never_mutate_sim_state(self, client, components):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        before = components.providers.sim_state_json(CLOUD_AWS)
        for suffix in ("vm_types", "keypairs", "security_groups", "instances"):
            response = client.get(
                f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/{suffix}",
                params={"credentials_id": cred_id},
                headers=headers,
            )
            assert response.status_code == 200
        client.get("/api/v1/infrastructure/clouds", headers=headers)
        assert components.providers.sim_state_json(CLOUD_AWS) == before

    def test_instances_view_hides_user_data(self, client, components):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        client.post(
            "/api/v1/deployments", json=fig6_shaped_payload({"id": cred_id}), headers=headers
        )
        make_worker(components).poll_and_run()
        response = client.get(
            f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/instances",
            params={"credentials_id": cred_id},
            headers=headers,
        )
        body = response.json()
        assert body and "user_data" not in body[0]


class TestCredentialsRoutes:
    def test_listing_masks_every_field(self, client):
        _user, headers = register_user(client)
        save_sim_credentials(client, headers)
        listed = client.get("/api/v1/auth/user/credentials", headers=headers).json()
        assert listed[0]["fields"] == {"access_key": "***", "secret_key": "***"}

    def test_delete_then_gone(self, client):
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        assert (
            client.delete(f"/api/v1/auth/user/credentials/{cred_id}", headers=headers).status_code
            == 204
        )
        assert client.get("/api/v1/auth/user/credentials", headers=headers).json() == []

    def test_schema_violation_maps_to_400(self, client):
        _user, headers = register_user(client)
        response = client.post(
            "/api/v1/auth/user/credentials",
            json={"cloud_type": "sim", "name": "x", "fields": {"access_key": "only"}},
            headers=headers,
        )
        assert response.status_code == 400
        assert response.json()["code"] == "SCHEMA_VIOLATION"


class TestErrorMapping:
    def test_every_error_class_has_exactly_one_status(self):
        classes = [
            obj
            for obj in vars(errors_mod).values()
            if isinstance(obj, type) and issubclass(obj, GatewayError)
        ]
        codes = [cls.code for cls in classes]
        assert len(set(codes)) == len(codes), "machine codes must be unique per class"
        for cls in classes:
            assert cls.code in HTTP_STATUS_BY_CODE, f"{cls.__name__} unmapped"

    def test_malformed_body_is_machine_readable(self, client):
        _user, headers = register_user(client)
        response = client.post("/api/v1/deployments", json={"application": 5}, headers=headers)
        assert response.status_code == 400
        assert response.json()["code"] == "VALIDATION_ERROR"


class TestResponseHygiene:
    def test_no_response_ever_echoes_secrets(self, client, components):
        secret = "gvl-web-password-77a1"
        _user, headers = register_user(client)
        cred_id = save_sim_credentials(client, headers)
        payload = fig6_shaped_payload({"id": cred_id}, name="lab-run")
        payload["application"] = "lab-workbench"
        payload["application_version"] = "4.3.0"
        payload["config_app"]["config_gvl"] = {
            "password": secret,
            "gvl_cmdline_utilities": True,
            "smrt_portal": False,
        }
        recorded = []
        accepted = client.post("/api/v1/deployments", json=payload, headers=headers)
        recorded.append(accepted.text)
        make_worker(components).poll_and_run()
        dep_id = accepted.json()["deployment_id"]
        recorded.append(client.get(f"/api/v1/deployments/{dep_id}", headers=headers).text)
        recorded.append(client.get("/api/v1/deployments", headers=headers).text)
        recorded.append(
            client.get(
                f"/api/v1/infrastructure/clouds/{CLOUD_AWS}/instances",
                params={"credentials_id": cred_id},
                headers=headers,
            ).text
        )
        recorded.append(client.get("/api/v1/auth/user/credentials", headers=headers).text)
        for body in recorded:
            assert secret not in body
            assert SIM_CREDS["secret_key"] not in body
