"""Encrypted-at-rest credential storage with rotatable keys.

Secret values are encrypted per-field with Fernet (authenticated symmetric
encryption, random IV per token) under the ring's head key and tagged with
that key's id, so rotation can re-encrypt eagerly and old keys become
prunable once nothing references them. The key ring itself lives in
configuration, never in the main database.
"""

from __future__ import annotations

import hashlib
import json
import os

from cryptography.fernet import Fernet, InvalidToken

from .errors import (
    DuplicateKey,
    IntegrityError,
    NotOwner,
    SchemaViolation,
    UnknownCredential,
    UnknownKey,
)
from .facade import CREDENTIAL_SCHEMAS
from .util import canonical_json

MASK = "***"


def _key_id(material: str) -> str:
    return hashlib.sha256(material.encode()).hexdigest()[:12]


class KeyRing:
    """Ordered symmetric keys; the last entry is the current encryption key."""

    def __init__(self, materials: list[str]):
        if not materials:
            raise ValueError("key ring must hold at least one key")
        self._order: list[str] = []
        self._fernets: dict[str, Fernet] = {}
        self._materials: dict[str, str] = {}
        for material in materials:
            self._add(material)

    def _add(self, material: str) -> str:
        kid = _key_id(material)
        if kid in self._fernets:
            raise DuplicateKey(f"key {kid} already on the ring")
        self._fernets[kid] = Fernet(material.encode())
        self._materials[kid] = material
        self._order.append(kid)
        return kid

    @property
    def head_key_id(self) -> str:
        return self._order[-1]

    @property
    def key_ids(self) -> list[str]:
        return list(self._order)

    @staticmethod
    def generate_material() -> str:
        return Fernet.generate_key().decode()

    @classmethod
    def create(cls) -> "KeyRing":
        return cls([cls.generate_material()])

    @classmethod
    def from_file(cls, path: str) -> "KeyRing":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(list(doc["keys"]))

    def to_file(self, path: str) -> None:
        doc = {"keys": [self._materials[k] for k in self._order]}
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)

    def rotate(self, new_material: str) -> str:
        return self._add(new_material)

    def prune(self, referenced_key_ids: set[str]) -> list[str]:
        """Drops keys that neither encrypt new data nor decrypt existing data."""
        removable = [
            kid for kid in self._order[:-1] if kid not in referenced_key_ids
        ]
        for kid in removable:
            self._order.remove(kid)
            del self._fernets[kid]
            del self._materials[kid]
        return removable

    def encrypt(self, plaintext: bytes) -> str:
        kid = self.head_key_id
        return f"{kid}:{self._fernets[kid].encrypt(plaintext).decode()}"

    def decrypt(self, token: str) -> bytes:
        kid, _, body = token.partition(":")
        fernet = self._fernets.get(kid)
        if fernet is None:
            raise UnknownKey(f"ciphertext references unknown key {kid}")
        try:
            return fernet.decrypt(body.encode())
        except InvalidToken:
            raise IntegrityError("ciphertext failed authentication")

    def key_id_of(self, token: str) -> str:
        return token.partition(":")[0]


class CredentialVault:
    def __init__(self, store, keyring: KeyRing, keyring_path: str | None = None):
        self._store = store
        self._ring = keyring
        self._keyring_path = keyring_path

    @property
    def keyring(self) -> KeyRing:
        return self._ring

    def check_schema(self, cloud_type: str, fields: dict) -> None:
        schema = CREDENTIAL_SCHEMAS.get(cloud_type)
        if schema is None:
            raise SchemaViolation(f"unknown cloud_type '{cloud_type}'", field_path="cloud_type")
        if not isinstance(fields, dict):
            raise SchemaViolation("fields must be a mapping", field_path="fields")
        missing = [k for k in schema if not str(fields.get(k, "") or "").strip()]
        if missing:
            raise SchemaViolation(f"missing credential fields: {missing}", field_path=missing[0])
        extra = sorted(set(fields) - set(schema))
        if extra:
            raise SchemaViolation(
                f"fields not in '{cloud_type}' schema: {extra}", field_path=extra[0]
            )

    def store_credentials(self, user_id: int, cloud_type: str, name: str, fields: dict) -> int:
        self.check_schema(cloud_type, fields)
        cipher = {k: self._ring.encrypt(str(v).encode()) for k, v in fields.items()}
        return self._store.insert_credentials(user_id, cloud_type, name, cipher)

    def retrieve_credentials(self, user_id: int, cred_id: int) -> dict:
        rec = self._get_owned(user_id, cred_id)
        return {k: self._ring.decrypt(token).decode() for k, token in rec["fields_cipher"].items()}

    def describe_credentials(self, user_id: int, cred_id: int) -> dict:
        rec = self._get_owned(user_id, cred_id)
        return self._public(rec)

    def list_credentials(self, user_id: int, limit: int = 100, offset: int = 0) -> list[dict]:
        return [self._public(rec) for rec in self._store.list_credentials(user_id, limit, offset)]

    def delete_credentials(self, user_id: int, cred_id: int) -> None:
        self._get_owned(user_id, cred_id)
        self._store.delete_credentials(cred_id)

    def rotate_key(self, new_material: str) -> int:
        """Makes the new key the head and eagerly re-encrypts every record."""
        self._ring.rotate(new_material)
        count = 0
        for rec in self._store.all_credentials():
            plain = {k: self._ring.decrypt(tok) for k, tok in rec["fields_cipher"].items()}
            cipher = {k: self._ring.encrypt(v) for k, v in plain.items()}
            self._store.update_credentials_cipher(rec["id"], cipher)
            count += 1
        if self._keyring_path:
            self._ring.to_file(self._keyring_path)
        return count

    def prune_keys(self) -> list[str]:
        referenced = {
            self._ring.key_id_of(tok)
            for rec in self._store.all_credentials()
            for tok in rec["fields_cipher"].values()
        }
        removed = self._ring.prune(referenced)
        if removed and self._keyring_path:
            self._ring.to_file(self._keyring_path)
        return removed

    # The engine reuses the ring for launch payloads that must reach workers
    # without ever persisting plaintext.

    def encrypt_blob(self, obj) -> str:
        return self._ring.encrypt(canonical_json(obj).encode())

    def decrypt_blob(self, token: str):
        return json.loads(self._ring.decrypt(token))

    def _get_owned(self, user_id: int, cred_id: int) -> dict:
        rec = self._store.get_credentials(cred_id)
        if rec is None:
            raise UnknownCredential(f"no credential set {cred_id}")
        if rec["user_id"] != user_id:
            raise NotOwner(f"credential set {cred_id} belongs to another user")
        return rec

    @staticmethod
    def _public(rec: dict) -> dict:
        return {
            "id": rec["id"],
            "cloud_type": rec["cloud_type"],
            "name": rec["name"],
            "fields": {k: MASK for k in sorted(rec["fields_cipher"])},
            "created_at": rec["created_at"],
        }
