"""Wires the store, providers, vault, catalog, and engine into one stack.

API processes and worker processes each call ``build_components`` over the
same configuration; the only thing they end up sharing is the store file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .catalog import Catalog, RegistrySearchClient
from .config import Settings
from .engine import Engine, Worker
from .facade import ProviderRegistry
from .plugins import PluginRegistry, default_registry
from .store import Store, StoreSimBackend
from .vault import CredentialVault, KeyRing


@dataclass
class Components:
    settings: Settings
    store: Store
    providers: ProviderRegistry
    plugin_registry: PluginRegistry
    catalog: Catalog
    vault: CredentialVault
    engine: Engine
    search: RegistrySearchClient


def load_or_create_keyring(path: str | None) -> tuple[KeyRing, str | None]:
    if path is None:
        return KeyRing.create(), None
    if os.path.exists(path):
        return KeyRing.from_file(path), path
    ring = KeyRing.create()
    ring.to_file(path)
    return ring, path


def build_components(settings: Settings, plugin_registry: PluginRegistry | None = None) -> Components:
    store = Store(settings.store_path)
    store.migrate()
    # Cloud rows must exist before providers seed their state (FK on sim_state).
    from .facade import CloudDescriptor

    for doc in settings.clouds:
        descriptor = CloudDescriptor.from_doc(doc)
        store.upsert_cloud(descriptor.cloud_id, descriptor.public_doc())
    providers = ProviderRegistry.from_config(settings.clouds, StoreSimBackend(store))
    plugins = plugin_registry or default_registry()
    ring, ring_path = load_or_create_keyring(settings.keyring_path)
    vault = CredentialVault(store, ring, keyring_path=ring_path)
    catalog = Catalog(store, plugins, providers)
    engine = Engine(store, catalog, plugins, providers, vault)
    search = RegistrySearchClient(
        settings.fixture_dir,
        live=settings.live_registry,
        base_url=settings.registry_base_url,
        timeout=settings.registry_timeout,
    )
    return Components(
        settings=settings,
        store=store,
        providers=providers,
        plugin_registry=plugins,
        catalog=catalog,
        vault=vault,
        engine=engine,
        search=search,
    )


def make_worker(components: Components, worker_id: str | None = None, lease_seconds: float = 600.0) -> Worker:
    return Worker(
        components.store,
        components.catalog,
        components.plugin_registry,
        components.providers,
        components.vault,
        worker_id=worker_id,
        lease_seconds=lease_seconds,
    )
