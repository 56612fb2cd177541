"""Uniform resource-management surface over interchangeable cloud providers.

Higher layers (plugins, engine, API) only ever talk to a ``ProviderRegistry``,
which routes each call to the provider bound to a cloud id. The simulated
provider is the only one with behavior; descriptors for real provider
flavors can still be registered so listings and the launch wizard stay
uniform, but their operations raise ``UnsupportedProvider``.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    InvalidCredentials,
    NotSimCloud,
    UnknownCloud,
    UnsupportedProvider,
    ValidationError,
)


class CloudType(str, Enum):
    SIM = "sim"
    AWS_LIKE = "aws-like"
    OPENSTACK_LIKE = "openstack-like"


# Field names a credential set must carry, per provider flavor.
CREDENTIAL_SCHEMAS: dict[str, tuple[str, ...]] = {
    CloudType.SIM.value: ("access_key", "secret_key"),
    CloudType.AWS_LIKE.value: ("access_key", "secret_key"),
    CloudType.OPENSTACK_LIKE.value: ("username", "password", "project_name"),
}


def validate_credentials(cloud_type: str, creds: dict | None) -> None:
    """Shape check shared by the simulator and the vault's probe path."""
    schema = CREDENTIAL_SCHEMAS.get(cloud_type)
    if schema is None:
        raise InvalidCredentials(f"no credential schema for cloud_type '{cloud_type}'")
    if not isinstance(creds, dict):
        raise InvalidCredentials("credentials missing")
    for key in schema:
        if not str(creds.get(key, "") or "").strip():
            raise InvalidCredentials(f"missing or empty credential field '{key}'")


@dataclass(frozen=True, order=True)
class FirewallRule:
    protocol: str
    port_from: int
    port_to: int
    cidr: str

    def validate(self) -> "FirewallRule":
        if self.protocol not in ("tcp", "udp"):
            raise ValidationError(f"unsupported protocol '{self.protocol}'", field_path="protocol")
        for label, port in (("port_from", self.port_from), ("port_to", self.port_to)):
            if not isinstance(port, int) or isinstance(port, bool) or not 1 <= port <= 65535:
                raise ValidationError(f"port out of range: {port!r}", field_path=label)
        if self.port_to < self.port_from:
            raise ValidationError("port_to < port_from", field_path="port_to")
        try:
            ipaddress.IPv4Network(self.cidr)
        except ValueError as exc:
            raise ValidationError(f"bad CIDR '{self.cidr}': {exc}", field_path="cidr")
        return self

    def to_doc(self) -> dict:
        return {
            "protocol": self.protocol,
            "port_from": self.port_from,
            "port_to": self.port_to,
            "cidr": self.cidr,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FirewallRule":
        return cls(
            protocol=doc["protocol"],
            port_from=doc["port_from"],
            port_to=doc["port_to"],
            cidr=doc["cidr"],
        ).validate()


def ssh_rule() -> FirewallRule:
    return FirewallRule("tcp", 22, 22, "0.0.0.0/0")


@dataclass
class VmType:
    name: str
    vcpus: int
    ram_gb: float
    root_disk_gb: int

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "vcpus": self.vcpus,
            "ram_gb": self.ram_gb,
            "root_disk_gb": self.root_disk_gb,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "VmType":
        vm = cls(
            name=doc["name"],
            vcpus=int(doc["vcpus"]),
            ram_gb=float(doc["ram_gb"]),
            root_disk_gb=int(doc.get("root_disk_gb", 0)),
        )
        if not vm.name:
            raise ValidationError("vm type name empty", field_path="name")
        if vm.vcpus < 1 or vm.ram_gb < 0 or vm.root_disk_gb < 0:
            raise ValidationError(f"bad vm type sizing for '{vm.name}'")
        return vm


@dataclass
class KeyPair:
    name: str
    public_material: str
    created_at: int  # logical tick on the simulator

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "public_material": self.public_material,
            "created_at": self.created_at,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "KeyPair":
        return cls(doc["name"], doc["public_material"], int(doc["created_at"]))


@dataclass
class SecurityGroup:
    name: str
    rules: list[FirewallRule]

    def to_doc(self) -> dict:
        return {"name": self.name, "rules": [r.to_doc() for r in sorted(set(self.rules))]}

    @classmethod
    def from_doc(cls, doc: dict) -> "SecurityGroup":
        return cls(doc["name"], [FirewallRule.from_doc(r) for r in doc["rules"]])


class InstanceState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    TERMINATED = "TERMINATED"


@dataclass
class Instance:
    instance_id: str
    vm_type: str
    image_id: str
    state: InstanceState
    key_pair: str
    security_groups: list[str]
    private_ip: str
    public_ip: str | None
    launched_at_tick: int
    user_data: str = ""
    extras: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "vm_type": self.vm_type,
            "image_id": self.image_id,
            "state": self.state.value,
            "key_pair": self.key_pair,
            "security_groups": list(self.security_groups),
            "private_ip": self.private_ip,
            "public_ip": self.public_ip,
            "launched_at_tick": self.launched_at_tick,
            "user_data": self.user_data,
            "extras": dict(self.extras),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Instance":
        return cls(
            instance_id=doc["instance_id"],
            vm_type=doc["vm_type"],
            image_id=doc["image_id"],
            state=InstanceState(doc["state"]),
            key_pair=doc["key_pair"],
            security_groups=list(doc["security_groups"]),
            private_ip=doc["private_ip"],
            public_ip=doc["public_ip"],
            launched_at_tick=doc["launched_at_tick"],
            user_data=doc.get("user_data", ""),
            extras=dict(doc.get("extras", {})),
        )


@dataclass
class SimProfile:
    """Seed data for one simulated cloud: its hardware menu, image registry,
    boot behavior, and any declaratively scheduled faults (tick -> error code)."""

    vm_types: list[VmType] = field(default_factory=list)
    images: list[str] = field(default_factory=list)
    boot_delay_ticks: int = 2
    seed: int = 0
    fault_plan: dict[int, str] = field(default_factory=dict)

    @classmethod
    def from_doc(cls, doc: dict) -> "SimProfile":
        return cls(
            vm_types=[VmType.from_doc(v) for v in doc.get("vm_types", [])],
            images=list(doc.get("images", [])),
            boot_delay_ticks=int(doc.get("boot_delay_ticks", 2)),
            seed=int(doc.get("seed", 0)),
            fault_plan={int(k): v for k, v in doc.get("fault_plan", {}).items()},
        )


@dataclass
class CloudDescriptor:
    cloud_id: str
    cloud_type: CloudType
    display_name: str
    region_name: str
    sim_profile: SimProfile | None = None

    def __post_init__(self):
        if not self.cloud_id:
            raise ValidationError("cloud_id empty", field_path="cloud_id")
        if not self.region_name:
            raise ValidationError("region_name empty", field_path="region_name")

    def public_doc(self) -> dict:
        return {
            "cloud_id": self.cloud_id,
            "cloud_type": self.cloud_type.value,
            "display_name": self.display_name,
            "region_name": self.region_name,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "CloudDescriptor":
        cloud_type = CloudType(doc["cloud_type"])
        sim = doc.get("sim")
        return cls(
            cloud_id=doc["cloud_id"],
            cloud_type=cloud_type,
            display_name=doc.get("display_name", doc["cloud_id"]),
            region_name=doc["region_name"],
            sim_profile=SimProfile.from_doc(sim) if sim is not None else None,
        )


class CloudProvider:
    """Operations every provider implementation must support.

    `creds` is always the plaintext credential mapping for the target cloud;
    implementations must reject it before doing any work.
    """

    descriptor: CloudDescriptor

    def list_vm_types(self, creds: dict) -> list[VmType]:
        raise NotImplementedError

    def get_or_create_key_pair(self, creds: dict, name: str) -> KeyPair:
        raise NotImplementedError

    def ensure_security_group(self, creds: dict, name: str, rules) -> SecurityGroup:
        raise NotImplementedError

    def launch_instance(self, creds: dict, spec: dict) -> Instance:
        raise NotImplementedError

    def wait_until_running(self, creds: dict, instance_id: str, timeout_ticks: int) -> Instance:
        raise NotImplementedError

    def assign_public_ip(self, creds: dict, instance_id: str) -> str:
        raise NotImplementedError

    def terminate_instance(self, creds: dict, instance_id: str) -> None:
        raise NotImplementedError

    def get_instance(self, creds: dict, instance_id: str) -> Instance:
        raise NotImplementedError

    def list_instances(self, creds: dict) -> list[Instance]:
        raise NotImplementedError

    def list_key_pairs(self, creds: dict) -> list[KeyPair]:
        raise NotImplementedError

    def list_security_groups(self, creds: dict) -> list[SecurityGroup]:
        raise NotImplementedError

    def check_endpoint(self, creds: dict, public_ip: str, port: int) -> bool:
        raise NotImplementedError


class UnimplementedProvider(CloudProvider):
    """Registered-but-not-shipped provider flavor; every call fails loudly."""

    def __init__(self, descriptor: CloudDescriptor):
        self.descriptor = descriptor

    def _refuse(self, *_args, **_kwargs):
        raise UnsupportedProvider(
            f"no provider implementation for cloud_type "
            f"'{self.descriptor.cloud_type.value}' (cloud '{self.descriptor.cloud_id}')"
        )

    list_vm_types = _refuse
    get_or_create_key_pair = _refuse
    ensure_security_group = _refuse
    launch_instance = _refuse
    wait_until_running = _refuse
    assign_public_ip = _refuse
    terminate_instance = _refuse
    get_instance = _refuse
    list_instances = _refuse
    list_key_pairs = _refuse
    list_security_groups = _refuse
    check_endpoint = _refuse


class ProviderRegistry:
    """Maps cloud ids to provider handles and exposes the uniform facade.

    Handles are shareable: each simulated cloud serializes its own mutations,
    so concurrent tasks can go through one registry instance.
    """

    def __init__(self):
        self._providers: dict[str, CloudProvider] = {}

    @classmethod
    def from_config(cls, clouds_doc: list[dict], state_backend) -> "ProviderRegistry":
        from .simcloud import SimCloud

        registry = cls()
        for doc in clouds_doc:
            descriptor = CloudDescriptor.from_doc(doc)
            if descriptor.cloud_id in registry._providers:
                raise ValidationError(f"duplicate cloud_id '{descriptor.cloud_id}'")
            if descriptor.cloud_type is CloudType.SIM:
                provider = SimCloud(descriptor, state_backend)
            else:
                provider = UnimplementedProvider(descriptor)
            registry._providers[descriptor.cloud_id] = provider
        return registry

    def provider(self, cloud_id: str) -> CloudProvider:
        try:
            return self._providers[cloud_id]
        except KeyError:
            raise UnknownCloud(f"no cloud registered as '{cloud_id}'")

    def describe(self, cloud_id: str) -> CloudDescriptor:
        return self.provider(cloud_id).descriptor

    def list_clouds(self) -> list[CloudDescriptor]:
        return [self._providers[cid].descriptor for cid in sorted(self._providers)]

    def has_cloud(self, cloud_id: str) -> bool:
        return cloud_id in self._providers

    # Uniform facade entry points; all take the target cloud id explicitly.

    def list_vm_types(self, cloud_id: str, creds: dict) -> list[VmType]:
        return self.provider(cloud_id).list_vm_types(creds)

    def get_or_create_key_pair(self, cloud_id: str, creds: dict, name: str) -> KeyPair:
        return self.provider(cloud_id).get_or_create_key_pair(creds, name)

    def ensure_security_group(self, cloud_id: str, creds: dict, name: str, rules) -> SecurityGroup:
        return self.provider(cloud_id).ensure_security_group(creds, name, rules)

    def launch_instance(self, cloud_id: str, creds: dict, spec: dict) -> Instance:
        return self.provider(cloud_id).launch_instance(creds, spec)

    def wait_until_running(self, cloud_id: str, creds: dict, instance_id: str, timeout_ticks: int) -> Instance:
        return self.provider(cloud_id).wait_until_running(creds, instance_id, timeout_ticks)

    def assign_public_ip(self, cloud_id: str, creds: dict, instance_id: str) -> str:
        return self.provider(cloud_id).assign_public_ip(creds, instance_id)

    def terminate_instance(self, cloud_id: str, creds: dict, instance_id: str) -> None:
        return self.provider(cloud_id).terminate_instance(creds, instance_id)

    def get_instance(self, cloud_id: str, creds: dict, instance_id: str) -> Instance:
        return self.provider(cloud_id).get_instance(creds, instance_id)

    def list_instances(self, cloud_id: str, creds: dict) -> list[Instance]:
        return self.provider(cloud_id).list_instances(creds)

    def list_key_pairs(self, cloud_id: str, creds: dict) -> list[KeyPair]:
        return self.provider(cloud_id).list_key_pairs(creds)

    def list_security_groups(self, cloud_id: str, creds: dict) -> list[SecurityGroup]:
        return self.provider(cloud_id).list_security_groups(creds)

    def check_endpoint(self, cloud_id: str, creds: dict, public_ip: str, port: int) -> bool:
        return self.provider(cloud_id).check_endpoint(creds, public_ip, port)

    # Simulator-only controls (the logical clock and test plumbing).

    def _sim(self, cloud_id: str):
        from .simcloud import SimCloud

        provider = self.provider(cloud_id)
        if not isinstance(provider, SimCloud):
            raise NotSimCloud(f"cloud '{cloud_id}' is not simulated")
        return provider

    def sim_advance(self, cloud_id: str, ticks: int) -> int:
        return self._sim(cloud_id).advance(ticks)

    def sim_set_fault(self, cloud_id: str, tick: int, code: str) -> None:
        self._sim(cloud_id).set_fault(tick, code)

    def sim_set_port(self, cloud_id: str, instance_id: str, port: int, open_: bool) -> None:
        self._sim(cloud_id).set_port(instance_id, port, open_)

    def sim_state_json(self, cloud_id: str) -> str:
        return self._sim(cloud_id).serialized_state()
