"""Appliance catalog: what can be launched, where, and with which plugins.

Entries live in the relational store so operators can add appliances without
redeploying. Each (appliance, version, cloud) triple resolves to a launch
descriptor carrying the machine image, default hardware, required firewall
ports, and default launch properties for that cloud.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .errors import (
    DuplicateSlug,
    EmptyQuery,
    NotAvailableOnCloud,
    RegistryUnavailable,
    UnknownAppliance,
    UnknownVersion,
    UnresolvablePlugin,
    ValidationError,
)
from .facade import CloudType, FirewallRule

SLUG_RE = re.compile(r"^[a-z0-9_-]+$")
MAX_SEARCH_RESULTS = 25


@dataclass
class CloudConfig:
    image_id: str
    default_vm_type: str
    required_ports: list[FirewallRule] = field(default_factory=list)
    default_launch_properties: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "image_id": self.image_id,
            "default_vm_type": self.default_vm_type,
            "required_ports": [r.to_doc() for r in self.required_ports],
            "default_launch_properties": copy.deepcopy(self.default_launch_properties),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "CloudConfig":
        cfg = cls(
            image_id=doc.get("image_id", ""),
            default_vm_type=doc.get("default_vm_type", ""),
            required_ports=[FirewallRule.from_doc(r) for r in doc.get("required_ports", [])],
            default_launch_properties=copy.deepcopy(doc.get("default_launch_properties", {})),
        )
        if not cfg.image_id:
            raise ValidationError("image_id empty", field_path="image_id")
        if not cfg.default_vm_type:
            raise ValidationError("default_vm_type empty", field_path="default_vm_type")
        return cfg


@dataclass
class ApplianceVersion:
    version: str
    cloud_configs: dict[str, CloudConfig]

    def to_doc(self) -> dict:
        return {
            "version": self.version,
            "cloud_configs": {cid: c.to_doc() for cid, c in sorted(self.cloud_configs.items())},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "ApplianceVersion":
        configs = {
            cid: CloudConfig.from_doc(c) for cid, c in doc.get("cloud_configs", {}).items()
        }
        if not doc.get("version"):
            raise ValidationError("version empty", field_path="version")
        if not configs:
            raise ValidationError(
                f"version '{doc['version']}' has no cloud configs", field_path="cloud_configs"
            )
        return cls(version=doc["version"], cloud_configs=configs)


@dataclass
class Appliance:
    slug: str
    display_name: str
    summary: str
    frontend_plugin_path: str
    backend_plugin_path: str
    versions: list[ApplianceVersion]

    def to_doc(self) -> dict:
        return {
            "slug": self.slug,
            "display_name": self.display_name,
            "summary": self.summary,
            "frontend_plugin_path": self.frontend_plugin_path,
            "backend_plugin_path": self.backend_plugin_path,
            "versions": [v.to_doc() for v in self.versions],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Appliance":
        return cls(
            slug=doc["slug"],
            display_name=doc.get("display_name", doc["slug"]),
            summary=doc.get("summary", ""),
            frontend_plugin_path=doc.get("frontend_plugin_path", ""),
            backend_plugin_path=doc.get("backend_plugin_path", ""),
            versions=[ApplianceVersion.from_doc(v) for v in doc.get("versions", [])],
        )

    def summary_doc(self) -> dict:
        return {
            "slug": self.slug,
            "display_name": self.display_name,
            "summary": self.summary,
            "versions": [v.version for v in self.versions],
        }


@dataclass
class LaunchDescriptor:
    slug: str
    version: str
    cloud_id: str
    cloud_config: CloudConfig
    backend_plugin_path: str
    frontend_plugin_path: str


class Catalog:
    def __init__(self, store, plugin_registry, providers=None):
        self._store = store
        self._plugins = plugin_registry
        self._providers = providers

    def register_appliance(self, definition: Appliance | dict) -> str:
        appliance = (
            definition if isinstance(definition, Appliance) else Appliance.from_doc(definition)
        )
        if not SLUG_RE.match(appliance.slug or ""):
            raise ValidationError(f"bad slug '{appliance.slug}'", field_path="slug")
        if self._store.get_appliance(appliance.slug) is not None:
            raise DuplicateSlug(f"appliance '{appliance.slug}' already registered")
        if not appliance.versions:
            raise ValidationError("appliance needs at least one version", field_path="versions")
        self._plugins.resolve(appliance.backend_plugin_path)  # UnresolvablePlugin if bad
        if not self._plugins.has_frontend(appliance.frontend_plugin_path):
            raise UnresolvablePlugin(
                f"no frontend plugin '{appliance.frontend_plugin_path}'"
            )
        seen_versions = set()
        for version in appliance.versions:
            if version.version in seen_versions:
                raise ValidationError(
                    f"duplicate version '{version.version}'", field_path="versions"
                )
            seen_versions.add(version.version)
            for cloud_id, config in version.cloud_configs.items():
                self._check_cloud_config(cloud_id, config)
        self._store.insert_appliance(appliance.slug, appliance.to_doc())
        return appliance.slug

    def _check_cloud_config(self, cloud_id: str, config: CloudConfig) -> None:
        if self._providers is None:
            return
        if not self._providers.has_cloud(cloud_id):
            raise ValidationError(f"unknown cloud '{cloud_id}'", field_path="cloud_configs")
        descriptor = self._providers.describe(cloud_id)
        if descriptor.cloud_type is CloudType.SIM and descriptor.sim_profile is not None:
            known = {vm.name for vm in descriptor.sim_profile.vm_types}
            if config.default_vm_type not in known:
                raise ValidationError(
                    f"vm type '{config.default_vm_type}' not on cloud '{cloud_id}'",
                    field_path="default_vm_type",
                )

    def list_appliances(self, filter_text: str | None = None) -> list[dict]:
        summaries = [Appliance.from_doc(doc).summary_doc() for doc in self._store.list_appliances()]
        if filter_text:
            needle = filter_text.lower()
            summaries = [
                s
                for s in summaries
                if needle in s["slug"].lower() or needle in s["display_name"].lower()
            ]
        return summaries

    def get_appliance(self, slug: str) -> Appliance:
        doc = self._store.get_appliance(slug)
        if doc is None:
            raise UnknownAppliance(f"no appliance '{slug}'")
        return Appliance.from_doc(doc)

    def resolve_launch_descriptor(self, slug: str, version: str, cloud_id: str) -> LaunchDescriptor:
        appliance = self.get_appliance(slug)
        matching = next((v for v in appliance.versions if v.version == version), None)
        if matching is None:
            raise UnknownVersion(f"appliance '{slug}' has no version '{version}'")
        config = matching.cloud_configs.get(cloud_id)
        if config is None:
            raise NotAvailableOnCloud(
                f"appliance '{slug}' {version} is not available on cloud '{cloud_id}'"
            )
        return LaunchDescriptor(
            slug=slug,
            version=version,
            cloud_id=cloud_id,
            cloud_config=CloudConfig.from_doc(config.to_doc()),
            backend_plugin_path=appliance.backend_plugin_path,
            frontend_plugin_path=appliance.frontend_plugin_path,
        )

    def export_doc(self) -> dict:
        return {"appliances": self._store.list_appliances()}

    def import_doc(self, doc: dict, skip_existing: bool = False) -> int:
        count = 0
        for entry in doc.get("appliances", []):
            try:
                self.register_appliance(entry)
            except DuplicateSlug:
                if not skip_existing:
                    raise
                continue
            count += 1
        return count


@dataclass
class RegistryImageResult:
    image_name: str
    description: str = ""
    dockerfile_text: str | None = None
    default_port_mappings: list[tuple[int, int]] = field(default_factory=list)
    default_env: dict[str, str] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "image_name": self.image_name,
            "description": self.description,
            "dockerfile_text": self.dockerfile_text,
            "default_port_mappings": [list(p) for p in self.default_port_mappings],
            "default_env": dict(self.default_env),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "RegistryImageResult":
        mappings = []
        for pair in doc.get("default_port_mappings", []):
            container, host = int(pair[0]), int(pair[1])
            for port in (container, host):
                if not 1 <= port <= 65535:
                    raise ValidationError(f"port out of range: {port}", field_path="default_port_mappings")
            mappings.append((container, host))
        return cls(
            image_name=doc["image_name"],
            description=doc.get("description", ""),
            dockerfile_text=doc.get("dockerfile_text"),
            default_port_mappings=mappings,
            default_env={str(k): str(v) for k, v in doc.get("default_env", {}).items()},
        )


class RegistrySearchClient:
    """Container-image search: offline fixture files by default, with an
    optional live HTTP mode against any registry exposing /search?q=."""

    def __init__(
        self,
        fixture_dir: str | Path,
        live: bool = False,
        base_url: str | None = None,
        timeout: float = 5.0,
    ):
        self._fixture_dir = Path(fixture_dir)
        self._live = live
        self._base_url = base_url
        self._timeout = timeout

    def search(self, query: str, mode: str | None = None) -> list[RegistryImageResult]:
        if not query or not query.strip():
            raise EmptyQuery("search query empty")
        chosen = mode or ("live" if self._live else "fixture")
        if chosen == "live":
            results = self._search_live(query.strip())
        else:
            results = self._search_fixture(query.strip())
        return results[:MAX_SEARCH_RESULTS]

    def _fixture_path(self, query: str) -> Path:
        key = re.sub(r"[^a-z0-9_-]+", "-", query.lower()).strip("-")
        return self._fixture_dir / f"{key}.json"

    def _search_fixture(self, query: str) -> list[RegistryImageResult]:
        path = self._fixture_path(query)
        if not path.exists():
            return []
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return [RegistryImageResult.from_doc(entry) for entry in doc.get("results", [])]

    def _search_live(self, query: str) -> list[RegistryImageResult]:
        if not self._base_url:
            raise RegistryUnavailable("no registry base URL configured")
        try:
            response = httpx.get(
                f"{self._base_url.rstrip('/')}/search",
                params={"q": query},
                timeout=self._timeout,
            )
            response.raise_for_status()
            payload = response.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise RegistryUnavailable(f"registry search failed: {exc}")
        if not isinstance(payload, list):
            raise RegistryUnavailable("registry returned an unexpected document")
        return [RegistryImageResult.from_doc(entry) for entry in payload]
