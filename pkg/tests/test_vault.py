import json
import secrets

import pytest

from cloudgate.errors import (
    DuplicateKey,
    IntegrityError,
    NotOwner,
    SchemaViolation,
    UnknownCredential,
    UnknownKey,
)
from cloudgate.store import Store
from cloudgate.vault import KeyRing, CredentialVault

AWS_FIELDS = {"access_key": "AKIAEXAMPLE", "secret_key": "deadbeefcafe42"}


@pytest.fixture
def store():
    s = Store(":memory:")
    s.migrate()
    s.create_user("owner", "hash")
    s.create_user("other", "hash2")
    yield s
    s.close()


@pytest.fixture
def vault(store):
    return CredentialVault(store, KeyRing.create())


class TestStoreRetrieve:
    def test_round_trip(self, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        assert vault.retrieve_credentials(1, cred_id) == AWS_FIELDS

    def test_ciphertext_never_carries_plaintext(self, store, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        raw = json.dumps(store.get_credentials(cred_id)["fields_cipher"])
        for secret in AWS_FIELDS.values():
            assert secret not in raw

    def test_missing_field_rejected(self, vault):
        with pytest.raises(SchemaViolation):
            vault.store_credentials(1, "aws-like", "work", {"access_key": "AK"})

    def test_wrong_schema_rejected(self, vault):
        with pytest.raises(SchemaViolation):
            vault.store_credentials(1, "openstack-like", "work", dict(AWS_FIELDS))

    def test_extra_field_rejected(self, vault):
        fields = dict(AWS_FIELDS, region="us-east-1")
        with pytest.raises(SchemaViolation):
            vault.store_credentials(1, "aws-like", "work", fields)

    def test_not_owner(self, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        with pytest.raises(NotOwner):
            vault.retrieve_credentials(2, cred_id)

    def test_unknown_credential(self, vault):
        with pytest.raises(UnknownCredential):
            vault.retrieve_credentials(1, 999)

    def test_listing_masks_values(self, vault):
        vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        listed = vault.list_credentials(1)
        assert listed[0]["fields"] == {"access_key": "***", "secret_key": "***"}


class TestTampering:
    def test_flipped_ciphertext_byte_detected(self, store, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        cipher = store.get_credentials(cred_id)["fields_cipher"]
        kid, _, body = cipher["secret_key"].partition(":")
        tampered = body[:-2] + ("A" if body[-2] != "A" else "B") + body[-1]
        cipher["secret_key"] = f"{kid}:{tampered}"
        store.update_credentials_cipher(cred_id, cipher)
        with pytest.raises(IntegrityError):
            vault.retrieve_credentials(1, cred_id)

    def test_unknown_key_id_detected(self, store, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        cipher = store.get_credentials(cred_id)["fields_cipher"]
        cipher["secret_key"] = "feedfacefeed:" + cipher["secret_key"].partition(":")[2]
        store.update_credentials_cipher(cred_id, cipher)
        with pytest.raises(UnknownKey):
            vault.retrieve_credentials(1, cred_id)


class TestRotation:
    def test_rotate_reencrypts_everything(self, store, vault):
        ids = [
            vault.store_credentials(1, "aws-like", f"set{i}", dict(AWS_FIELDS)) for i in range(3)
        ]
        count = vault.rotate_key(KeyRing.generate_material())
        assert count == 3
        head = vault.keyring.head_key_id
        for cred_id in ids:
            cipher = store.get_credentials(cred_id)["fields_cipher"]
            assert all(token.partition(":")[0] == head for token in cipher.values())
            assert vault.retrieve_credentials(1, cred_id) == AWS_FIELDS

    def test_rotate_with_no_records(self, vault):
        assert vault.rotate_key(KeyRing.generate_material()) == 0

    def test_rotating_existing_key_refused(self, vault):
        material = KeyRing.generate_material()
        vault.rotate_key(material)
        with pytest.raises(DuplicateKey):
            vault.rotate_key(material)

    def test_round_trip_under_repeated_rotation(self, vault):
        cred_id = vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        for _ in range(3):
            vault.rotate_key(KeyRing.generate_material())
        assert vault.retrieve_credentials(1, cred_id) == AWS_FIELDS

    def test_prune_drops_unreferenced_old_keys(self, vault):
        vault.store_credentials(1, "aws-like", "work", dict(AWS_FIELDS))
        old_head = vault.keyring.head_key_id
        vault.rotate_key(KeyRing.generate_material())
        removed = vault.prune_keys()
        assert old_head in removed
        assert vault.keyring.key_ids == [vault.keyring.head_key_id]


class TestKeyRingFile:
    def test_file_round_trip(self, tmp_path):
        path = str(tmp_path / "keys.json")
        ring = KeyRing.create()
        ring.rotate(KeyRing.generate_material())
        ring.to_file(path)
        loaded = KeyRing.from_file(path)
        assert loaded.key_ids == ring.key_ids
        assert loaded.head_key_id == ring.head_key_id

    def test_blob_round_trip(self, vault):
        payload = {"credentials": dict(AWS_FIELDS), "nested": {"a": [1, 2, 3]}}
        assert vault.decrypt_blob(vault.encrypt_blob(payload)) == payload


class TestPersistedByteScan:
    def test_store_file_never_contains_secret_bytes(self, tmp_path):
        path = str(tmp_path / "vault.db")
        store = Store(path)
        store.migrate()
        store.create_user("owner", "hash")
        vault = CredentialVault(store, KeyRing.create())
        secrets_used = []
        for i in range(10):
            fields = {
                "access_key": f"AK{secrets.token_hex(12)}",
                "secret_key": secrets.token_hex(24),
            }
            secrets_used.append(fields["secret_key"])
            vault.store_credentials(1, "aws-like", f"set{i}", fields)
        store.close()
        blob = open(path, "rb").read()
        for secret in secrets_used:
            assert secret.encode() not in blob
