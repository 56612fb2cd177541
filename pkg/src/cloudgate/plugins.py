"""Composable appliance plugins.

A plugin captures one appliance's behavior: validating launch configuration
into provider-ready user data, redacting secrets, and driving the launch,
health-check, restart, and delete lifecycles. Plugins are stateless and
composable by delegation: a composed plugin owns one subtree of the launch
configuration (its ``config_name``), calls its parent's ``validate_app_config``
on that sub-config, and extends the returned user data. The reserved
``config_cloudlaunch`` subtree (hardware, image, network selection) flows
down the chain unchanged so the bottom layer can both echo and apply it.
"""

from __future__ import annotations

import copy
import shlex
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    CyclicComposition,
    LaunchStepError,
    UnknownInstance,
    UnresolvablePlugin,
    ValidationError,
)
from .facade import FirewallRule, InstanceState, ssh_rule
from .util import canonical_json

RESERVED_CONFIG_KEY = "config_cloudlaunch"
RESERVED_LAUNCH_FIELDS = frozenset(
    {
        "customImageID",
        "instanceType",
        "keyPair",
        "network",
        "placementZone",
        "provider_settings",
        "rootStorageType",
        "staticIP",
        "subnet",
    }
)

DEFAULT_KEY_PAIR_NAME = "cloudgate-default"
SECURITY_GROUP_PREFIX = "cloudgate"
LAUNCH_WAIT_TICKS = 60
SECRET_MASK = "***"


class HealthState(str, Enum):
    HEALTHY = "HEALTHY"
    DEGRADED = "DEGRADED"
    DOWN = "DOWN"
    UNKNOWN = "UNKNOWN"


@dataclass
class HealthStatus:
    state: HealthState
    detail: str = ""

    def to_doc(self) -> dict:
        return {"state": self.state.value, "detail": self.detail}


@dataclass
class RestartOutcome:
    restarted: bool
    updates: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PluginDescriptor:
    path: str
    config_name: str
    parent: str | None = None
    requires_config: bool = False
    secret_paths: tuple[tuple[str, ...], ...] = ()


@dataclass
class LaunchContext:
    """What a running launch needs from its surroundings: the provider handle
    for the target cloud, the owning appliance slug (used to name shared
    resources), and a progress sink."""

    provider: object
    app_slug: str = ""
    reporter: object = None
    progress: list = field(default_factory=list)

    def report(self, step: str, message: str) -> None:
        self.progress.append((step, message))
        if self.reporter is not None:
            self.reporter(step, message)


class AppliancePlugin:
    def __init__(self, descriptor: PluginDescriptor, parent: "AppliancePlugin | None" = None):
        self.descriptor = descriptor
        self.parent = parent

    # -- composition helpers ---------------------------------------------------

    def chain_descriptors(self) -> list[PluginDescriptor]:
        chain = [self.descriptor]
        node = self.parent
        while node is not None:
            chain.append(node.descriptor)
            node = node.parent
        return chain

    def parent_paths(self) -> list[str]:
        return [d.path for d in self.chain_descriptors()[1:]]

    def own_config(self, app_config: dict) -> dict:
        sub = app_config.get(self.descriptor.config_name)
        if sub is None:
            if self.descriptor.requires_config:
                raise ValidationError(
                    f"missing required subtree '{self.descriptor.config_name}'",
                    field_path=self.descriptor.config_name,
                )
            return {}
        if not isinstance(sub, dict):
            raise ValidationError(
                f"'{self.descriptor.config_name}' must be an object",
                field_path=self.descriptor.config_name,
            )
        return sub

    def delegate_validate(self, name, cloud_version_config, credentials, app_config: dict) -> dict:
        """Runs the parent's validation on this plugin's sub-config, with the
        reserved framework subtree carried along."""
        sub = self.own_config(app_config)
        delegated = dict(sub)
        if RESERVED_CONFIG_KEY in app_config and RESERVED_CONFIG_KEY not in delegated:
            delegated[RESERVED_CONFIG_KEY] = app_config[RESERVED_CONFIG_KEY]
        return self.parent.validate_app_config(name, cloud_version_config, credentials, delegated)

    # -- the plugin interface ---------------------------------------------------

    def validate_app_config(self, name, cloud_version_config, credentials, app_config) -> dict:
        raise NotImplementedError

    def sanitise_app_config(self, app_config: dict) -> dict:
        """Masks every secret-designated leaf; structure is never changed."""
        clean = copy.deepcopy(app_config)
        for descriptor in self.chain_descriptors():
            for path in descriptor.secret_paths:
                node = clean
                for key in path[:-1]:
                    if not isinstance(node, dict) or key not in node:
                        node = None
                        break
                    node = node[key]
                if isinstance(node, dict) and path[-1] in node:
                    node[path[-1]] = SECRET_MASK
        return clean

    def launch_app(self, task_ctx, name, cloud_version_config, credentials, app_config, user_data) -> dict:
        raise NotImplementedError

    def health_check(self, provider, deployment: dict, credentials: dict) -> HealthStatus:
        raise NotImplementedError

    def restart(self, provider, deployment: dict, credentials: dict) -> RestartOutcome:
        raise NotImplementedError

    def delete(self, provider, deployment: dict, credentials: dict) -> bool:
        raise NotImplementedError


def _instance_id_of(deployment: dict) -> str | None:
    result = deployment.get("launch_result") or {}
    return (result.get("cloudLaunch") or {}).get("instance_id")


class BaseVmPlugin(AppliancePlugin):
    """Launches a plain virtual machine; the root of every composition chain."""

    def validate_app_config(self, name, cloud_version_config, credentials, app_config) -> dict:
        self.own_config(app_config)
        launch_cfg = app_config.get(RESERVED_CONFIG_KEY, {})
        if not isinstance(launch_cfg, dict):
            raise ValidationError(
                f"'{RESERVED_CONFIG_KEY}' must be an object", field_path=RESERVED_CONFIG_KEY
            )
        for key in launch_cfg:
            if key not in RESERVED_LAUNCH_FIELDS:
                raise ValidationError(
                    f"unknown launch field '{key}'", field_path=f"{RESERVED_CONFIG_KEY}.{key}"
                )
        provider_settings = launch_cfg.get("provider_settings") or {}
        if not isinstance(provider_settings, dict):
            raise ValidationError(
                "provider_settings must be an object",
                field_path=f"{RESERVED_CONFIG_KEY}.provider_settings",
            )
        effective = {
            "applianceName": name,
            "imageID": launch_cfg.get("customImageID") or cloud_version_config.image_id,
            "instanceType": launch_cfg.get("instanceType") or cloud_version_config.default_vm_type,
            "keyPair": launch_cfg.get("keyPair") or DEFAULT_KEY_PAIR_NAME,
            "network": launch_cfg.get("network"),
            "placementZone": launch_cfg.get("placementZone", ""),
            "provider_settings": dict(provider_settings),
            "rootStorageType": launch_cfg.get("rootStorageType", "instance"),
            "staticIP": launch_cfg.get("staticIP", ""),
            "subnet": launch_cfg.get("subnet", ""),
        }
        return {"cloudlaunch": effective}

    def extra_firewall_rules(self, app_config: dict, user_data: dict) -> list[FirewallRule]:
        return []

    def launch_app(self, task_ctx, name, cloud_version_config, credentials, app_config, user_data) -> dict:
        provider = task_ctx.provider
        settings = user_data.get("cloudlaunch", {})
        key_name = settings.get("keyPair") or DEFAULT_KEY_PAIR_NAME
        group_name = f"{SECURITY_GROUP_PREFIX}-{task_ctx.app_slug or 'default'}"
        rules = sorted(
            set(
                [ssh_rule()]
                + list(cloud_version_config.required_ports)
                + self.extra_firewall_rules(app_config, user_data)
            )
        )

        step = "get_or_create_key_pair"
        try:
            key_pair = provider.get_or_create_key_pair(credentials, key_name)
            task_ctx.report(step, f"key pair '{key_pair.name}' ready")

            step = "ensure_security_group"
            group = provider.ensure_security_group(credentials, group_name, rules)
            task_ctx.report(step, f"security group '{group.name}' holds {len(group.rules)} rules")

            step = "launch_instance"
            instance = provider.launch_instance(
                credentials,
                {
                    "image_id": settings.get("imageID"),
                    "vm_type": settings.get("instanceType"),
                    "key_pair": key_pair.name,
                    "security_groups": [group.name],
                    "user_data": canonical_json(user_data),
                    "extras": {
                        k: settings.get(k)
                        for k in ("rootStorageType", "network", "subnet", "placementZone", "staticIP")
                    },
                },
            )
            task_ctx.report(step, f"instance {instance.instance_id} pending")
        except Exception as exc:
            raise LaunchStepError(step, exc)

        try:
            step = "wait_until_running"
            provider.wait_until_running(credentials, instance.instance_id, LAUNCH_WAIT_TICKS)
            task_ctx.report(step, f"instance {instance.instance_id} running")

            step = "assign_public_ip"
            public_ip = provider.assign_public_ip(credentials, instance.instance_id)
            task_ctx.report(step, f"public address {public_ip} attached")
        except Exception as exc:
            # Roll back only what this launch created; the key pair and the
            # security group are shared, idempotently re-ensured resources.
            try:
                provider.terminate_instance(credentials, instance.instance_id)
            except Exception:
                pass
            raise LaunchStepError(step, exc)

        return {
            "cloudLaunch": {
                "publicIP": public_ip,
                "instance_id": instance.instance_id,
                "keyPair": key_pair.name,
                "securityGroup": group.name,
            }
        }

    def health_check(self, provider, deployment, credentials) -> HealthStatus:
        instance_id = _instance_id_of(deployment)
        if instance_id is None:
            return HealthStatus(HealthState.UNKNOWN, "deployment has no launch result")
        try:
            instance = provider.get_instance(credentials, instance_id)
        except UnknownInstance:
            return HealthStatus(HealthState.DOWN, f"instance {instance_id} no longer exists")
        except Exception as exc:
            return HealthStatus(HealthState.UNKNOWN, f"probe failed: {exc}")
        if instance.state is InstanceState.RUNNING:
            return HealthStatus(HealthState.HEALTHY, f"instance {instance_id} running")
        return HealthStatus(HealthState.DOWN, f"instance {instance_id} is {instance.state.value}")

    def restart(self, provider, deployment, credentials) -> RestartOutcome:
        instance_id = _instance_id_of(deployment)
        if instance_id is None:
            raise UnknownInstance("deployment has no instance to restart")
        instance = provider.get_instance(credentials, instance_id)
        if instance.state is InstanceState.TERMINATED:
            return RestartOutcome(False)
        # Replace-in-kind: terminate and relaunch with the identical spec. The
        # freed public address is lowest-free, so the replacement reacquires it.
        provider.terminate_instance(credentials, instance_id)
        replacement = provider.launch_instance(
            credentials,
            {
                "image_id": instance.image_id,
                "vm_type": instance.vm_type,
                "key_pair": instance.key_pair,
                "security_groups": list(instance.security_groups),
                "user_data": instance.user_data,
                "extras": dict(instance.extras),
            },
        )
        provider.wait_until_running(credentials, replacement.instance_id, LAUNCH_WAIT_TICKS)
        public_ip = provider.assign_public_ip(credentials, replacement.instance_id)
        return RestartOutcome(
            True, {"instance_id": replacement.instance_id, "publicIP": public_ip}
        )

    def delete(self, provider, deployment, credentials) -> bool:
        instance_id = _instance_id_of(deployment)
        if instance_id is None:
            return True
        try:
            provider.terminate_instance(credentials, instance_id)
        except UnknownInstance:
            pass
        return True


class SimpleWebAppPlugin(BaseVmPlugin):
    """A base VM that serves HTTP: opens the web port, publishes an
    application URL, and distinguishes 'VM up' from 'application reachable'."""

    PROBE_PORT = 80

    def validate_app_config(self, name, cloud_version_config, credentials, app_config) -> dict:
        sub = self.own_config(app_config)
        user_data = self.delegate_validate(name, cloud_version_config, credentials, app_config)
        probe_port = sub.get("probe_port", self.PROBE_PORT)
        if not isinstance(probe_port, int) or isinstance(probe_port, bool) or not 1 <= probe_port <= 65535:
            raise ValidationError(
                f"bad probe port {probe_port!r}",
                field_path=f"{self.descriptor.config_name}.probe_port",
            )
        user_data["web"] = {"probe_port": probe_port}
        return user_data

    def extra_firewall_rules(self, app_config, user_data) -> list[FirewallRule]:
        port = user_data.get("web", {}).get("probe_port", self.PROBE_PORT)
        return [FirewallRule("tcp", port, port, "0.0.0.0/0")]

    def launch_app(self, task_ctx, name, cloud_version_config, credentials, app_config, user_data) -> dict:
        result = super().launch_app(
            task_ctx, name, cloud_version_config, credentials, app_config, user_data
        )
        public_ip = result["cloudLaunch"]["publicIP"]
        result["cloudLaunch"]["applicationURL"] = f"http://{public_ip}"
        port = user_data.get("web", {}).get("probe_port", self.PROBE_PORT)
        try:
            reachable = task_ctx.provider.check_endpoint(credentials, public_ip, port)
        except Exception:
            reachable = False
        task_ctx.report(
            "probe_application",
            f"http probe on port {port} {'succeeded' if reachable else 'failed'}",
        )
        result["web"] = {"probe_port": port, "reachable_at_launch": reachable}
        return result

    def health_check(self, provider, deployment, credentials) -> HealthStatus:
        base = super().health_check(provider, deployment, credentials)
        if base.state is not HealthState.HEALTHY:
            return base
        launch = deployment.get("launch_result") or {}
        cloud_part = launch.get("cloudLaunch") or {}
        public_ip = cloud_part.get("publicIP")
        port = (launch.get("web") or {}).get("probe_port", self.PROBE_PORT)
        if not public_ip:
            return HealthStatus(HealthState.UNKNOWN, "no public address recorded")
        try:
            reachable = provider.check_endpoint(credentials, public_ip, port)
        except Exception as exc:
            return HealthStatus(HealthState.UNKNOWN, f"probe failed: {exc}")
        if reachable:
            return HealthStatus(HealthState.HEALTHY, f"application answering on port {port}")
        return HealthStatus(
            HealthState.DEGRADED, f"instance running but port {port} is closed"
        )


class ComposedLabPlugin(SimpleWebAppPlugin):
    """Three-layer composed appliance: a web application stack extended with
    optional lab tooling toggles."""

    EXTRA_TOGGLES = ("gvl_cmdline_utilities", "smrt_portal")

    def validate_app_config(self, name, cloud_version_config, credentials, app_config) -> dict:
        sub = self.own_config(app_config)
        user_data = self.delegate_validate(name, cloud_version_config, credentials, app_config)
        install = []
        for toggle in self.EXTRA_TOGGLES:
            value = sub.get(toggle, False)
            if not isinstance(value, bool):
                raise ValidationError(
                    f"'{toggle}' must be a boolean",
                    field_path=f"{self.descriptor.config_name}.{toggle}",
                )
            install.append(value)
        user_data["gvl_config"] = {"install": install}
        if sub.get("password"):
            user_data["gvl_config"]["password"] = sub["password"]
        return user_data

    def launch_app(self, task_ctx, name, cloud_version_config, credentials, app_config, user_data) -> dict:
        result = super().launch_app(
            task_ctx, name, cloud_version_config, credentials, app_config, user_data
        )
        result["cloudLaunch"]["applicationURL"] = "http://{0}".format(
            result["cloudLaunch"]["publicIP"]
        )
        return result


class DockerLaunchPlugin(BaseVmPlugin):
    """Launches a VM instructed (via user data) to start one container image;
    the engine never executes the composed command itself."""

    def validate_app_config(self, name, cloud_version_config, credentials, app_config) -> dict:
        sub = self.own_config(app_config)
        image_name = str(sub.get("image_name", "") or "").strip()
        if not image_name:
            raise ValidationError(
                "image_name required", field_path=f"{self.descriptor.config_name}.image_name"
            )
        mappings = _parse_port_mappings(sub.get("port_mappings", []), self.descriptor.config_name)
        env = sub.get("env", {})
        if not isinstance(env, dict):
            raise ValidationError(
                "env must be a mapping", field_path=f"{self.descriptor.config_name}.env"
            )
        env = {str(k): str(v) for k, v in env.items()}
        user_data = self.delegate_validate(name, cloud_version_config, credentials, app_config)
        user_data["docker"] = {
            "image_name": image_name,
            "port_mappings": [list(pair) for pair in mappings],
            "env": env,
            "command": compose_container_command(image_name, mappings, env),
        }
        return user_data

    def extra_firewall_rules(self, app_config, user_data) -> list[FirewallRule]:
        rules = []
        for _container, host in user_data.get("docker", {}).get("port_mappings", []):
            rules.append(FirewallRule("tcp", host, host, "0.0.0.0/0"))
        return rules

    def launch_app(self, task_ctx, name, cloud_version_config, credentials, app_config, user_data) -> dict:
        result = super().launch_app(
            task_ctx, name, cloud_version_config, credentials, app_config, user_data
        )
        result["docker"] = {"command": user_data.get("docker", {}).get("command", "")}
        return result


def _parse_port_mappings(raw, config_name: str) -> list[tuple[int, int]]:
    if not isinstance(raw, (list, tuple)):
        raise ValidationError(
            "port_mappings must be a list of [container, host] pairs",
            field_path=f"{config_name}.port_mappings",
        )
    mappings = []
    for pair in raw:
        try:
            container, host = int(pair[0]), int(pair[1])
        except (TypeError, ValueError, IndexError):
            raise ValidationError(
                f"bad port mapping {pair!r}", field_path=f"{config_name}.port_mappings"
            )
        for port in (container, host):
            if not 1 <= port <= 65535:
                raise ValidationError(
                    f"port out of range: {port}", field_path=f"{config_name}.port_mappings"
                )
        mappings.append((container, host))
    return mappings


def compose_container_command(image_name: str, port_mappings, env: dict) -> str:
    """Deterministic `docker run` line: detach flag, -p pairs in input order,
    -e pairs in sorted-key order, then the image. Tokens are shell-quoted only
    when they need it."""
    if not image_name or not str(image_name).strip():
        raise ValidationError("image_name required", field_path="image_name")
    mappings = _parse_port_mappings(list(port_mappings), "docker")
    parts = ["docker", "run", "-d"]
    for container, host in mappings:
        parts += ["-p", f"{host}:{container}"]
    for key in sorted(env):
        parts += ["-e", shlex.quote(f"{key}={env[key]}")]
    parts.append(shlex.quote(str(image_name)))
    return " ".join(parts)


class PluginRegistry:
    """Static manifest of plugin paths; resolves stateless plugin instances
    with their parent chains wired."""

    def __init__(self):
        self._backends: dict[str, tuple[type, PluginDescriptor]] = {}
        self._frontends: set[str] = set()

    def register_backend(self, cls: type, descriptor: PluginDescriptor) -> None:
        self._backends[descriptor.path] = (cls, descriptor)

    def register_frontend(self, path: str) -> None:
        self._frontends.add(path)

    def has_frontend(self, path: str) -> bool:
        return path in self._frontends

    def frontend_paths(self) -> list[str]:
        return sorted(self._frontends)

    def descriptor(self, path: str) -> PluginDescriptor:
        entry = self._backends.get(path)
        if entry is None:
            raise UnresolvablePlugin(f"no backend plugin '{path}'")
        return entry[1]

    def chain(self, path: str) -> list[PluginDescriptor]:
        chain: list[PluginDescriptor] = []
        seen: set[str] = set()
        config_names: set[str] = set()
        current: str | None = path
        while current is not None:
            if current in seen:
                raise CyclicComposition(f"plugin composition cycle through '{current}'")
            seen.add(current)
            descriptor = self.descriptor(current)
            if descriptor.config_name in config_names:
                raise ValidationError(
                    f"config name '{descriptor.config_name}' appears twice in chain '{path}'"
                )
            config_names.add(descriptor.config_name)
            chain.append(descriptor)
            current = descriptor.parent
        return chain

    def resolve(self, path: str) -> AppliancePlugin:
        chain = self.chain(path)
        instance: AppliancePlugin | None = None
        for descriptor in reversed(chain):
            cls = self._backends[descriptor.path][0]
            instance = cls(descriptor=descriptor, parent=instance)
        return instance


DEFAULT_BACKENDS: tuple[tuple[type, PluginDescriptor], ...] = (
    (
        BaseVmPlugin,
        PluginDescriptor(path="base_vm", config_name="config_ubuntu"),
    ),
    (
        SimpleWebAppPlugin,
        PluginDescriptor(path="simple_web_app", config_name="config_webapp", parent="base_vm"),
    ),
    (
        ComposedLabPlugin,
        PluginDescriptor(
            path="composed_lab",
            config_name="config_gvl",
            parent="simple_web_app",
            requires_config=True,
            secret_paths=(("config_gvl", "password"),),
        ),
    ),
    (
        DockerLaunchPlugin,
        PluginDescriptor(
            path="docker_launch",
            config_name="config_docker",
            parent="base_vm",
            requires_config=True,
        ),
    ),
)

DEFAULT_FRONTENDS = ("default_vm_form", "web_form", "composed_lab_form", "docker_form")


def default_registry() -> PluginRegistry:
    registry = PluginRegistry()
    for cls, descriptor in DEFAULT_BACKENDS:
        registry.register_backend(cls, descriptor)
    for path in DEFAULT_FRONTENDS:
        registry.register_frontend(path)
    return registry


def validate_launch_config(plugin: AppliancePlugin, name, cloud_version_config, credentials, app_config) -> dict:
    """Framework entry point: rejects unknown top-level subtrees, then runs
    the plugin chain's validation."""
    if not isinstance(app_config, dict):
        raise ValidationError("config_app must be an object", field_path="config_app")
    allowed = {RESERVED_CONFIG_KEY} | {d.config_name for d in plugin.chain_descriptors()}
    for key in app_config:
        if key not in allowed:
            raise ValidationError(f"unknown configuration subtree '{key}'", field_path=key)
    return plugin.validate_app_config(name, cloud_version_config, credentials, app_config)
