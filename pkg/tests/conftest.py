from __future__ import annotations

import sys
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

sys.path.insert(0, str(Path(__file__).parent))

from cloudgate.api import create_app
from cloudgate.config import Settings, default_catalog_doc
from cloudgate.runtime import build_components, make_worker

CLOUD_AWS = "amazon-us-east-n-virginia"
CLOUD_NECTAR = "nectar-melbourne"
SIM_CREDS = {"access_key": "AKTESTKEY12345", "secret_key": "volatile-test-secret-9c1f"}


def memory_components(seed_catalog: bool = True, clouds: list[dict] | None = None):
    settings = Settings(store_path=":memory:", keyring_path=None)
    if clouds is not None:
        settings.clouds = clouds
    components = build_components(settings)
    if seed_catalog:
        components.catalog.import_doc(default_catalog_doc())
    return components


@pytest.fixture
def components():
    c = memory_components()
    yield c
    c.store.close()


@pytest.fixture
def worker(components):
    return make_worker(components)


@pytest.fixture
def client(components):
    app = create_app(components)
    with TestClient(app, raise_server_exceptions=False) as test_client:
        yield test_client


def register_user(client, username: str = "alice"):
    response = client.post("/api/v1/auth/register", json={"username": username})
    assert response.status_code == 201, response.text
    body = response.json()
    return body, {"Authorization": f"Bearer {body['token']}"}


def save_sim_credentials(client, headers, name: str = "lab-keys"):
    response = client.post(
        "/api/v1/auth/user/credentials",
        json={"cloud_type": "sim", "name": name, "fields": dict(SIM_CREDS)},
        headers=headers,
    )
    assert response.status_code == 201, response.text
    return response.json()["id"]


def fig6_shaped_payload(cred_block: dict, name: str = "demo-ubuntu-launch") -> dict:
    """The documented launch payload shape: six required fields plus the
    display echo of the target cloud, with the reserved framework subtree."""
    return {
        "application": "ubuntu",
        "application_version": "16.04",
        "name": name,
        "target_cloud": CLOUD_AWS,
        "config_app": {
            "config_cloudlaunch": {
                "customImageID": None,
                "instanceType": "c5.large",
                "keyPair": "",
                "network": None,
                "placementZone": "",
                "provider_settings": {"efsOptimised": "", "volumeIOPS": ""},
                "rootStorageType": "instance",
                "staticIP": "",
                "subnet": "",
            }
        },
        "credentials": cred_block,
        "cloud": {
            "cloud_type": "sim",
            "name": "Sim AWS - US East (N. Virginia)",
            "region_name": "us-east-1",
        },
    }
