"""Deterministic in-memory cloud, the stand-in for a real IaaS provider.

This module also documents the simulator's semantics:

* Time is a logical tick counter, never wall-clock. A PENDING instance
  becomes RUNNING once ``launched_at_tick + boot_delay_ticks <= tick``;
  the only other transitions are PENDING/RUNNING -> TERMINATED.
* Public addresses are allocated lowest-free from 203.0.113.0/24 (a
  documentation range: recognizable in fixtures, never routable) and
  return to the pool on termination.
* When an instance reaches RUNNING, the TCP port ranges of its security
  groups are considered open (the appliance is assumed to have started);
  ``set_port`` can close individual ports to exercise degraded-health paths.
* Faults are declarative: ``fault_plan[tick] = "quota_exceeded"`` makes any
  ``launch_instance`` executed at that tick fail, which makes engine
  rollback paths reachable deterministically.

Every operation is an atomic read-modify-write on the serialized state, so
handles are safe to share across concurrent tasks. Two simulators with equal
seeds, fault plans, and call sequences serialize to identical bytes.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import ipaddress
import threading

from .errors import (
    InstanceNotRunning,
    InstanceTerminated,
    QuotaExceeded,
    Timeout,
    UnknownInstance,
    UnknownVmType,
    UnknownImage,
    ValidationError,
)
from .facade import (
    CloudDescriptor,
    CloudProvider,
    FirewallRule,
    Instance,
    InstanceState,
    KeyPair,
    SecurityGroup,
    SimProfile,
    VmType,
    validate_credentials,
)
from .util import canonical_json

PUBLIC_POOL: tuple[str, ...] = tuple(
    str(ip) for ip in ipaddress.IPv4Network("203.0.113.0/24").hosts()
)

FAULT_QUOTA_EXCEEDED = "quota_exceeded"


class MemoryStateBackend:
    """Holds serialized sim state in-process; used by unit tests and demos.

    ``mutate`` yields a working copy and writes it back only on success, so a
    failed operation leaves no partial mutation behind.
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._docs: dict[str, dict] = {}

    def seed(self, cloud_id: str, doc: dict) -> None:
        with self._lock:
            self._docs.setdefault(cloud_id, copy.deepcopy(doc))

    @contextlib.contextmanager
    def mutate(self, cloud_id: str):
        with self._lock:
            working = copy.deepcopy(self._docs[cloud_id])
            yield working
            self._docs[cloud_id] = working

    def read(self, cloud_id: str) -> dict:
        with self._lock:
            return copy.deepcopy(self._docs[cloud_id])


def initial_state_doc(profile: SimProfile) -> dict:
    return {
        "tick": 0,
        "boot_delay_ticks": profile.boot_delay_ticks,
        "seed": profile.seed,
        "instance_seq": 0,
        "vm_types": {vm.name: vm.to_doc() for vm in profile.vm_types},
        "images": sorted(profile.images),
        "key_pairs": {},
        "security_groups": {},
        "instances": {},
        "open_ports": {},
        "closed_ports": {},
        "fault_plan": {str(k): v for k, v in sorted(profile.fault_plan.items())},
    }


def _promote_ready(doc: dict) -> None:
    """Apply the boot-transition rule to every eligible PENDING instance."""
    delay = doc["boot_delay_ticks"]
    for iid in sorted(doc["instances"]):
        inst = doc["instances"][iid]
        if inst["state"] != InstanceState.PENDING.value:
            continue
        if inst["launched_at_tick"] + delay <= doc["tick"]:
            inst["state"] = InstanceState.RUNNING.value
            ranges = []
            for group_name in inst["security_groups"]:
                group = doc["security_groups"].get(group_name, {"rules": []})
                for rule in group["rules"]:
                    if rule["protocol"] == "tcp":
                        ranges.append([rule["port_from"], rule["port_to"]])
            doc["open_ports"][iid] = sorted(ranges)


def _assigned_ips(doc: dict) -> set[str]:
    return {
        inst["public_ip"]
        for inst in doc["instances"].values()
        if inst["public_ip"] is not None and inst["state"] != InstanceState.TERMINATED.value
    }


def _lowest_free_ip(doc: dict) -> str:
    taken = _assigned_ips(doc)
    for ip in PUBLIC_POOL:
        if ip not in taken:
            return ip
    raise QuotaExceeded("public address pool exhausted")


class SimCloud(CloudProvider):
    def __init__(self, descriptor: CloudDescriptor, backend):
        if descriptor.sim_profile is None:
            descriptor.sim_profile = SimProfile()
        self.descriptor = descriptor
        self.cloud_id = descriptor.cloud_id
        self._backend = backend
        # In-memory trace of facade calls made through this handle; not part
        # of serialized state so repeated calls stay byte-idempotent.
        self.call_log: list[str] = []
        backend.seed(self.cloud_id, initial_state_doc(descriptor.sim_profile))

    def _record(self, op: str) -> None:
        self.call_log.append(op)

    def _creds(self, creds: dict) -> None:
        validate_credentials(self.descriptor.cloud_type.value, creds)

    @contextlib.contextmanager
    def _state(self):
        with self._backend.mutate(self.cloud_id) as doc:
            _promote_ready(doc)
            yield doc

    # -- resource operations -------------------------------------------------

    def list_vm_types(self, creds: dict) -> list[VmType]:
        self._record("list_vm_types")
        self._creds(creds)
        with self._state() as doc:
            return [VmType.from_doc(doc["vm_types"][name]) for name in sorted(doc["vm_types"])]

    def get_or_create_key_pair(self, creds: dict, name: str) -> KeyPair:
        self._record("get_or_create_key_pair")
        self._creds(creds)
        if not name or not str(name).strip():
            raise ValidationError("key pair name empty", field_path="name")
        with self._state() as doc:
            existing = doc["key_pairs"].get(name)
            if existing is not None:
                return KeyPair.from_doc(existing)
            material = "sim-rsa-" + hashlib.sha256(
                f"{doc['seed']}:{self.cloud_id}:{name}".encode()
            ).hexdigest()[:32]
            pair = KeyPair(name=name, public_material=material, created_at=doc["tick"])
            doc["key_pairs"][name] = pair.to_doc()
            return pair

    def ensure_security_group(self, creds: dict, name: str, rules) -> SecurityGroup:
        self._record("ensure_security_group")
        self._creds(creds)
        if not name or not str(name).strip():
            raise ValidationError("security group name empty", field_path="name")
        wanted = [r.validate() if isinstance(r, FirewallRule) else FirewallRule.from_doc(r) for r in rules]
        with self._state() as doc:
            group_doc = doc["security_groups"].get(name)
            existing = SecurityGroup.from_doc(group_doc) if group_doc else SecurityGroup(name, [])
            merged = sorted(set(existing.rules) | set(wanted))
            group = SecurityGroup(name, merged)
            doc["security_groups"][name] = group.to_doc()
            return group

    def launch_instance(self, creds: dict, spec: dict) -> Instance:
        self._record("launch_instance")
        self._creds(creds)
        image_id = spec.get("image_id") or ""
        vm_type = spec.get("vm_type") or ""
        key_pair = spec.get("key_pair") or ""
        groups = list(spec.get("security_groups") or [])
        user_data = spec.get("user_data", "")
        extras = dict(spec.get("extras") or {})
        if not image_id:
            raise ValidationError("image_id empty", field_path="image_id")
        with self._state() as doc:
            if vm_type not in doc["vm_types"]:
                raise UnknownVmType(f"no vm type '{vm_type}' on cloud '{self.cloud_id}'")
            if image_id not in doc["images"]:
                raise UnknownImage(f"no image '{image_id}' on cloud '{self.cloud_id}'")
            if key_pair not in doc["key_pairs"]:
                raise ValidationError(f"key pair '{key_pair}' does not exist", field_path="key_pair")
            for group in groups:
                if group not in doc["security_groups"]:
                    raise ValidationError(
                        f"security group '{group}' does not exist", field_path="security_groups"
                    )
            if doc["fault_plan"].get(str(doc["tick"])) == FAULT_QUOTA_EXCEEDED:
                raise QuotaExceeded(f"quota exceeded on cloud '{self.cloud_id}'")
            doc["instance_seq"] += 1
            seq = doc["instance_seq"]
            instance = Instance(
                instance_id=f"i-{seq:06d}",
                vm_type=vm_type,
                image_id=image_id,
                state=InstanceState.PENDING,
                key_pair=key_pair,
                security_groups=sorted(groups),
                private_ip=f"10.0.{seq // 256}.{seq % 256}",
                public_ip=None,
                launched_at_tick=doc["tick"],
                user_data=user_data,
                extras=extras,
            )
            doc["instances"][instance.instance_id] = instance.to_doc()
            return instance

    def wait_until_running(self, creds: dict, instance_id: str, timeout_ticks: int) -> Instance:
        """Polls the instance, advancing the logical clock one tick per poll so
        callers never need provider-specific waiting code."""
        self._record("wait_until_running")
        self._creds(creds)
        waited = 0
        while True:
            with self._state() as doc:
                inst_doc = doc["instances"].get(instance_id)
                if inst_doc is None:
                    raise UnknownInstance(f"no instance '{instance_id}'")
                state = inst_doc["state"]
                if state == InstanceState.RUNNING.value:
                    return Instance.from_doc(inst_doc)
                if state == InstanceState.TERMINATED.value:
                    raise InstanceTerminated(f"instance '{instance_id}' terminated while waiting")
                if waited >= timeout_ticks:
                    raise Timeout(
                        f"instance '{instance_id}' not running after {timeout_ticks} ticks"
                    )
                doc["tick"] += 1
                _promote_ready(doc)
            waited += 1

    def assign_public_ip(self, creds: dict, instance_id: str) -> str:
        self._record("assign_public_ip")
        self._creds(creds)
        with self._state() as doc:
            inst_doc = doc["instances"].get(instance_id)
            if inst_doc is None:
                raise UnknownInstance(f"no instance '{instance_id}'")
            if inst_doc["state"] != InstanceState.RUNNING.value:
                raise InstanceNotRunning(f"instance '{instance_id}' is {inst_doc['state']}")
            if inst_doc["public_ip"] is not None:
                return inst_doc["public_ip"]
            ip = _lowest_free_ip(doc)
            inst_doc["public_ip"] = ip
            return ip

    def terminate_instance(self, creds: dict, instance_id: str) -> None:
        self._record("terminate_instance")
        self._creds(creds)
        with self._state() as doc:
            inst_doc = doc["instances"].get(instance_id)
            if inst_doc is None:
                raise UnknownInstance(f"no instance '{instance_id}'")
            if inst_doc["state"] == InstanceState.TERMINATED.value:
                return
            inst_doc["state"] = InstanceState.TERMINATED.value
            inst_doc["public_ip"] = None
            doc["open_ports"].pop(instance_id, None)
            doc["closed_ports"].pop(instance_id, None)

    def get_instance(self, creds: dict, instance_id: str) -> Instance:
        self._record("get_instance")
        self._creds(creds)
        with self._state() as doc:
            inst_doc = doc["instances"].get(instance_id)
            if inst_doc is None:
                raise UnknownInstance(f"no instance '{instance_id}'")
            return Instance.from_doc(inst_doc)

    def list_instances(self, creds: dict) -> list[Instance]:
        self._record("list_instances")
        self._creds(creds)
        with self._state() as doc:
            return [Instance.from_doc(doc["instances"][iid]) for iid in sorted(doc["instances"])]

    def list_key_pairs(self, creds: dict) -> list[KeyPair]:
        self._record("list_key_pairs")
        self._creds(creds)
        with self._state() as doc:
            return [KeyPair.from_doc(doc["key_pairs"][n]) for n in sorted(doc["key_pairs"])]

    def list_security_groups(self, creds: dict) -> list[SecurityGroup]:
        self._record("list_security_groups")
        self._creds(creds)
        with self._state() as doc:
            return [
                SecurityGroup.from_doc(doc["security_groups"][n])
                for n in sorted(doc["security_groups"])
            ]

    def check_endpoint(self, creds: dict, public_ip: str, port: int) -> bool:
        self._record("check_endpoint")
        self._creds(creds)
        with self._state() as doc:
            for iid in sorted(doc["instances"]):
                inst = doc["instances"][iid]
                if inst["public_ip"] == public_ip and inst["state"] == InstanceState.RUNNING.value:
                    if port in doc["closed_ports"].get(iid, []):
                        return False
                    return any(
                        low <= port <= high for low, high in doc["open_ports"].get(iid, [])
                    )
            raise UnknownInstance(f"no running instance holds address {public_ip}")

    # -- simulator controls ---------------------------------------------------

    def advance(self, ticks: int) -> int:
        if ticks < 0:
            raise ValidationError("ticks must be >= 0", field_path="ticks")
        with self._backend.mutate(self.cloud_id) as doc:
            doc["tick"] += ticks
            _promote_ready(doc)
            return doc["tick"]

    def set_fault(self, tick: int, code: str) -> None:
        with self._backend.mutate(self.cloud_id) as doc:
            doc["fault_plan"][str(tick)] = code

    def set_port(self, instance_id: str, port: int, open_: bool) -> None:
        with self._backend.mutate(self.cloud_id) as doc:
            if instance_id not in doc["instances"]:
                raise UnknownInstance(f"no instance '{instance_id}'")
            closed = set(doc["closed_ports"].get(instance_id, []))
            if open_:
                closed.discard(port)
            else:
                closed.add(port)
            doc["closed_ports"][instance_id] = sorted(closed)

    def current_tick(self) -> int:
        return self._backend.read(self.cloud_id)["tick"]

    def state_doc(self) -> dict:
        return self._backend.read(self.cloud_id)

    def serialized_state(self) -> str:
        return canonical_json(self.state_doc())
