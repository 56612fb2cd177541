import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudgate.engine import NAME_RE, Worker, slugify, valid_name
from cloudgate.errors import (
    ConflictingTask,
    InvalidName,
    NotOwner,
    SchemaViolation,
    UnknownAppliance,
    UnknownCloud,
    UnknownDeployment,
    ValidationError,
)
from cloudgate.runtime import make_worker

from conftest import CLOUD_AWS, SIM_CREDS, fig6_shaped_payload, memory_components


@pytest.fixture
def env(components):
    user_id = components.store.create_user("alice", "hash-a")
    other_id = components.store.create_user("bob", "hash-b")
    cred_id = components.vault.store_credentials(user_id, "sim", "lab", dict(SIM_CREDS))
    return components, user_id, other_id, cred_id


def launch_request(cred_id, **overrides):
    payload = fig6_shaped_payload({"id": cred_id, "name": "lab"})
    payload.update(overrides)
    return payload


class TestCreateDeployment:
    def test_documented_payload_creates_launching_deployment(self, env):
        components, user_id, _other, cred_id = env
        dep_id, task_id = components.engine.create_deployment(launch_request(cred_id), user_id)
        record = components.store.get_deployment(dep_id)
        assert record["status"] == "LAUNCHING"
        task = components.store.get_task(task_id)
        assert task["kind"] == "LAUNCH" and task["status"] == "PENDING"

    def test_name_with_spaces_rejected(self, env):
        components, user_id, _other, cred_id = env
        with pytest.raises(InvalidName):
            components.engine.create_deployment(
                launch_request(cred_id, name="Has Spaces!"), user_id
            )

    def test_name_boundary_63_accepted_64_rejected(self, env):
        components, user_id, _other, cred_id = env
        components.engine.create_deployment(launch_request(cred_id, name="a" * 63), user_id)
        with pytest.raises(InvalidName):
            components.engine.create_deployment(launch_request(cred_id, name="a" * 64), user_id)

    def test_validation_failure_persists_nothing(self, env):
        components, user_id, _other, cred_id = env
        bad = launch_request(cred_id)
        bad["config_app"] = {"config_bogus": {}}
        before = components.store.dump()
        with pytest.raises(ValidationError):
            components.engine.create_deployment(bad, user_id)
        assert components.store.dump() == before

    def test_unknown_appliance(self, env):
        components, user_id, _other, cred_id = env
        with pytest.raises(UnknownAppliance):
            components.engine.create_deployment(
                launch_request(cred_id, application="missing"), user_id
            )

    def test_unknown_cloud(self, env):
        components, user_id, _other, cred_id = env
        with pytest.raises(UnknownCloud):
            components.engine.create_deployment(
                launch_request(cred_id, target_cloud="nowhere"), user_id
            )

    def test_unexpected_top_level_field_rejected(self, env):
        components, user_id, _other, cred_id = env
        payload = launch_request(cred_id)
        payload["surprise"] = 1
        with pytest.raises(ValidationError):
            components.engine.create_deployment(payload, user_id)

    def test_inline_credentials_accepted_and_never_stored_plain(self, env):
        components, user_id, _other, _cred = env
        payload = launch_request(0, credentials=dict(SIM_CREDS))
        dep_id, _task = components.engine.create_deployment(payload, user_id)
        record = components.store.get_deployment(dep_id)
        assert record["credentials_ref"] == "inline"
        assert SIM_CREDS["secret_key"] not in components.store.dump()

    def test_inline_credentials_schema_checked(self, env):
        components, user_id, _other, _cred = env
        payload = launch_request(0, credentials={"access_key": "only-half"})
        with pytest.raises(SchemaViolation):
            components.engine.create_deployment(payload, user_id)

    def test_saved_reference_by_url(self, env):
        components, user_id, _other, cred_id = env
        block = {
            "access_key": SIM_CREDS["access_key"],
            "name": "lab",
            "url": f"http://host/api/v1/auth/user/credentials/sim/{cred_id}/",
        }
        dep_id, _task = components.engine.create_deployment(
            launch_request(cred_id, credentials=block), user_id
        )
        assert components.store.get_deployment(dep_id)["credentials_ref"] == f"saved:{cred_id}"


class TestWorker:
    def test_single_pending_launch_runs_to_running(self, env):
        components, user_id, _other, cred_id = env
        dep_id, _task = components.engine.create_deployment(launch_request(cred_id), user_id)
        assert make_worker(components).poll_and_run() == 1
        view = components.engine.get_deployment(dep_id, user_id)
        assert view["status"] == "RUNNING"
        assert view["launch_result"]["cloudLaunch"]["publicIP"] == "203.0.113.1"

    def test_two_workers_one_task_single_execution(self, env):
        components, user_id, _other, cred_id = env
        components.engine.create_deployment(launch_request(cred_id), user_id)
        first = make_worker(components, worker_id="w1")
        second = make_worker(components, worker_id="w2")
        counts = sorted([first.poll_and_run(), second.poll_and_run()])
        assert counts == [0, 1]

    def test_no_pending_tasks(self, env):
        components, _user, _other, _cred = env
        assert make_worker(components).poll_and_run() == 0

    def test_progress_log_records_every_step(self, env):
        components, user_id, _other, cred_id = env
        dep_id, task_id = components.engine.create_deployment(launch_request(cred_id), user_id)
        make_worker(components).poll_and_run()
        task = components.engine.get_task(dep_id, task_id, user_id)
        steps = [entry[1] for entry in task["progress_log"]]
        assert steps == [
            "get_or_create_key_pair",
            "ensure_security_group",
            "launch_instance",
            "wait_until_running",
            "assign_public_ip",
        ]

    def test_worker_restart_between_tasks_changes_nothing(self, env):
        """All state round-trips through the store: a brand-new worker per
        poll produces the same outcome as one long-lived worker."""
        components, user_id, _other, cred_id = env
        dep_id, _task = components.engine.create_deployment(launch_request(cred_id), user_id)
        components.engine.request_action(dep_id, "HEALTH_CHECK", user_id)
        while make_worker(components).poll_and_run(max_tasks=1):
            pass
        view = components.engine.get_deployment(dep_id, user_id)
        assert view["status"] == "RUNNING"
        health_tasks = [t for t in view["tasks"] if t["kind"] == "HEALTH_CHECK"]
        assert health_tasks[0]["result"]["state"] == "HEALTHY"


class TestActions:
    def launch_and_run(self, components, user_id, cred_id):
        dep_id, _ = components.engine.create_deployment(launch_request(cred_id), user_id)
        make_worker(components).poll_and_run()
        return dep_id

    def test_health_check_reports_healthy(self, env):
        components, user_id, _other, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        task_id = components.engine.request_action(dep_id, "HEALTH_CHECK", user_id)
        make_worker(components).poll_and_run()
        task = components.engine.get_task(dep_id, task_id, user_id)
        assert task["status"] == "SUCCESS"
        assert task["result"]["state"] == "HEALTHY"

    def test_concurrent_restart_requests_conflict(self, env):
        components, user_id, _other, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        components.engine.request_action(dep_id, "RESTART", user_id)
        with pytest.raises(ConflictingTask):
            components.engine.request_action(dep_id, "RESTART", user_id)

    def test_health_check_allowed_while_mutation_pending(self, env):
        components, user_id, _other, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        components.engine.request_action(dep_id, "RESTART", user_id)
        components.engine.request_action(dep_id, "HEALTH_CHECK", user_id)

    def test_delete_on_deleted_is_noop_success(self, env):
        components, user_id, _other, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        components.engine.request_action(dep_id, "DELETE", user_id)
        make_worker(components).poll_and_run()
        assert components.engine.get_deployment(dep_id, user_id)["status"] == "DELETED"
        second = components.engine.request_action(dep_id, "DELETE", user_id)
        make_worker(components).poll_and_run()
        task = components.engine.get_task(dep_id, second, user_id)
        assert task["status"] == "SUCCESS"

    def test_restart_updates_recorded_instance(self, env):
        components, user_id, _other, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        old = components.engine.get_deployment(dep_id, user_id)["launch_result"]["cloudLaunch"]
        components.engine.request_action(dep_id, "RESTART", user_id)
        make_worker(components).poll_and_run()
        fresh = components.engine.get_deployment(dep_id, user_id)["launch_result"]["cloudLaunch"]
        assert fresh["instance_id"] != old["instance_id"]
        assert fresh["publicIP"] == old["publicIP"]

    def test_foreign_deployment_refused(self, env):
        components, user_id, other_id, cred_id = env
        dep_id = self.launch_and_run(components, user_id, cred_id)
        with pytest.raises(NotOwner):
            components.engine.request_action(dep_id, "DELETE", other_id)
        with pytest.raises(NotOwner):
            components.engine.get_deployment(dep_id, other_id)

    def test_unknown_deployment(self, env):
        components, user_id, _other, _cred = env
        with pytest.raises(UnknownDeployment):
            components.engine.request_action(999, "DELETE", user_id)
        with pytest.raises(UnknownDeployment):
            components.engine.get_deployment(999, user_id)


class TestViews:
    def test_stored_config_is_sanitised_and_tasks_ordered(self, env):
        components, user_id, _other, cred_id = env
        payload = fig6_shaped_payload({"id": cred_id, "name": "lab"})
        payload["application"] = "lab-workbench"
        payload["application_version"] = "4.3.0"
        payload["config_app"]["config_gvl"] = {
            "password": "gvl-launch-secret",
            "gvl_cmdline_utilities": True,
            "smrt_portal": False,
        }
        dep_id, _ = components.engine.create_deployment(payload, user_id)
        make_worker(components).poll_and_run()
        components.engine.request_action(dep_id, "HEALTH_CHECK", user_id)
        make_worker(components).poll_and_run()
        view = components.engine.get_deployment(dep_id, user_id)
        assert view["config_app"]["config_gvl"]["password"] == "***"
        assert "gvl-launch-secret" not in json.dumps(view)
        task_ids = [t["id"] for t in view["tasks"]]
        assert task_ids == sorted(task_ids)
        assert [t["kind"] for t in view["tasks"]] == ["LAUNCH", "HEALTH_CHECK"]

    def test_deployment_records_never_hold_secret_leaves(self, env):
        components, user_id, _other, cred_id = env
        payload = fig6_shaped_payload({"id": cred_id, "name": "lab"})
        payload["application"] = "lab-workbench"
        payload["application_version"] = "4.3.0"
        payload["config_app"]["config_gvl"] = {"password": "gvl-launch-secret"}
        components.engine.create_deployment(payload, user_id)
        rows = json.loads(components.store.dump())["tables"]["deployments"]
        assert "gvl-launch-secret" not in json.dumps(rows)


class TestNameRules:
    @settings(max_examples=300, deadline=None)
    @given(
        st.text(
            alphabet=st.sampled_from("abcdefghijklmnopqrstuvwxyzABC_-019 !./"), max_size=80
        )
    )
    def test_acceptance_is_exactly_the_documented_pattern(self, name):
        assert valid_name(name) == bool(NAME_RE.match(name))

    def test_boundaries(self):
        assert valid_name("a")
        assert valid_name("a" * 63)
        assert not valid_name("a" * 64)
        assert not valid_name("")
        assert not valid_name("Has Spaces!")

    def test_slugify_matches_ui_contract(self):
        assert slugify("Demo Ubuntu launch") == "demo-ubuntu-launch"
        assert slugify("  Weird---Name!! ") == "weird---name"
        assert valid_name(slugify("X" * 200))
