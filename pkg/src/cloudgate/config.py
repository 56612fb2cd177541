"""Configuration: one JSON file plus environment overrides.

Recognized environment variables (all optional): CLOUDGATE_CONFIG,
CLOUDGATE_STORE_PATH, CLOUDGATE_KEYRING_PATH, CLOUDGATE_BIND_HOST,
CLOUDGATE_BIND_PORT, CLOUDGATE_FIXTURE_DIR, CLOUDGATE_LIVE_REGISTRY,
CLOUDGATE_REGISTRY_BASE_URL, CLOUDGATE_API_URL, CLOUDGATE_TOKEN.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("cloudgate").joinpath("data", *parts)))


def default_clouds() -> list[dict]:
    with open(data_path("seed_clouds.json"), encoding="utf-8") as fh:
        return json.load(fh)["clouds"]


def default_catalog_doc() -> dict:
    with open(data_path("seed_catalog.json"), encoding="utf-8") as fh:
        return json.load(fh)


def default_fixture_dir() -> str:
    return str(data_path("registry_fixtures"))


@dataclass
class Settings:
    bind_host: str = "127.0.0.1"
    bind_port: int = 8080
    store_path: str = "cloudgate.db"
    keyring_path: str | None = "cloudgate-keys.json"
    fixture_dir: str = field(default_factory=default_fixture_dir)
    live_registry: bool = False
    registry_base_url: str | None = None
    registry_timeout: float = 5.0
    clouds: list[dict] = field(default_factory=default_clouds)
    api_base_url: str = "http://127.0.0.1:8080"
    token: str | None = None


def load_settings(path: str | None = None, env: dict | None = None) -> Settings:
    env = os.environ if env is None else env
    path = path or env.get("CLOUDGATE_CONFIG")
    settings = Settings()
    if path:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        for key, value in doc.items():
            if hasattr(settings, key):
                setattr(settings, key, value)
    overrides = {
        "CLOUDGATE_STORE_PATH": ("store_path", str),
        "CLOUDGATE_KEYRING_PATH": ("keyring_path", str),
        "CLOUDGATE_BIND_HOST": ("bind_host", str),
        "CLOUDGATE_BIND_PORT": ("bind_port", int),
        "CLOUDGATE_FIXTURE_DIR": ("fixture_dir", str),
        "CLOUDGATE_LIVE_REGISTRY": ("live_registry", lambda v: v.lower() in ("1", "true", "yes")),
        "CLOUDGATE_REGISTRY_BASE_URL": ("registry_base_url", str),
        "CLOUDGATE_API_URL": ("api_base_url", str),
        "CLOUDGATE_TOKEN": ("token", str),
    }
    for var, (attr, cast) in overrides.items():
        if env.get(var):
            setattr(settings, attr, cast(env[var]))
    return settings
