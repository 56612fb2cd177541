"""SQLite-backed persistence: the single source of durable state.

Everything the API and workers share flows through here — catalog entries,
users, credential ciphertext, deployments, tasks, and serialized simulator
state. The queue primitive is ``claim_task``'s compare-and-set under
``BEGIN IMMEDIATE``; there is no other coordination channel.
"""

from __future__ import annotations

import contextlib
import json
import sqlite3
import threading
import time
import uuid

from .errors import Conflict, DowngradeUnsupported
from .util import canonical_json, utc_now_iso

MIGRATIONS: list[tuple[int, list[str]]] = [
    (
        1,
        [
            """
            CREATE TABLE clouds (
                cloud_id TEXT PRIMARY KEY,
                doc TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE sim_state (
                cloud_id TEXT PRIMARY KEY REFERENCES clouds(cloud_id),
                doc TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE appliances (
                slug TEXT PRIMARY KEY,
                doc TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE users (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                username TEXT NOT NULL UNIQUE,
                token_hash TEXT NOT NULL,
                created_at TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE credentials (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                user_id INTEGER NOT NULL REFERENCES users(id),
                cloud_type TEXT NOT NULL,
                name TEXT NOT NULL,
                fields_cipher TEXT NOT NULL,
                created_at TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE deployments (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                user_id INTEGER NOT NULL REFERENCES users(id),
                name TEXT NOT NULL,
                app_slug TEXT NOT NULL REFERENCES appliances(slug),
                app_version TEXT NOT NULL,
                cloud_id TEXT NOT NULL REFERENCES clouds(cloud_id),
                credentials_ref TEXT NOT NULL,
                credentials_cipher TEXT,
                app_config TEXT NOT NULL,
                launch_result TEXT,
                status TEXT NOT NULL,
                created_at TEXT NOT NULL
            )
            """,
            """
            CREATE TABLE tasks (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                deployment_id INTEGER NOT NULL REFERENCES deployments(id),
                kind TEXT NOT NULL,
                status TEXT NOT NULL,
                claimed_by TEXT,
                claimed_at REAL,
                payload_cipher TEXT,
                progress TEXT NOT NULL DEFAULT '[]',
                result TEXT,
                error TEXT,
                created_at TEXT NOT NULL
            )
            """,
        ],
    ),
    (
        2,
        [
            "CREATE INDEX idx_tasks_claimable ON tasks(status, id)",
            "CREATE INDEX idx_tasks_deployment ON tasks(deployment_id)",
            "CREATE INDEX idx_deployments_user ON deployments(user_id)",
        ],
    ),
]

SCHEMA_VERSION = MIGRATIONS[-1][0]

_TABLES = ("clouds", "sim_state", "appliances", "users", "credentials", "deployments", "tasks")


class Store:
    def __init__(self, path: str = ":memory:"):
        self.path = path
        self._lock = threading.RLock()
        self._tx_depth = 0
        self._conn = sqlite3.connect(path, check_same_thread=False, isolation_level=None)
        self._conn.row_factory = sqlite3.Row
        self._conn.execute("PRAGMA foreign_keys = ON")
        if path != ":memory:":
            self._conn.execute("PRAGMA journal_mode = WAL")
            self._conn.execute("PRAGMA busy_timeout = 30000")

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    @contextlib.contextmanager
    def tx(self):
        """All-or-nothing visibility for grouped writes; nestable in-process."""
        with self._lock:
            if self._tx_depth > 0:
                self._tx_depth += 1
                try:
                    yield self._conn
                finally:
                    self._tx_depth -= 1
                return
            self._conn.execute("BEGIN IMMEDIATE")
            self._tx_depth = 1
            try:
                yield self._conn
            except BaseException:
                self._conn.execute("ROLLBACK")
                raise
            finally:
                self._tx_depth = 0
            self._conn.execute("COMMIT")

    def transactional(self, fn):
        try:
            with self.tx() as conn:
                return fn(conn)
        except sqlite3.IntegrityError as exc:
            raise Conflict(str(exc))

    # -- schema ----------------------------------------------------------------

    def schema_version(self) -> int:
        row = self._conn.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name='schema_meta'"
        ).fetchone()
        if row is None:
            return 0
        return self._conn.execute("SELECT version FROM schema_meta").fetchone()["version"]

    def migrate(self, to_version: int | None = None) -> list[int]:
        target = SCHEMA_VERSION if to_version is None else to_version
        with self.tx() as conn:
            conn.execute("CREATE TABLE IF NOT EXISTS schema_meta (version INTEGER NOT NULL)")
            row = conn.execute("SELECT version FROM schema_meta").fetchone()
            current = row["version"] if row else 0
            if row is None:
                conn.execute("INSERT INTO schema_meta(version) VALUES (0)")
            if target < current:
                raise DowngradeUnsupported(f"store is at v{current}, cannot go back to v{target}")
            applied = []
            for version, statements in MIGRATIONS:
                if current < version <= target:
                    for statement in statements:
                        conn.execute(statement)
                    conn.execute("UPDATE schema_meta SET version = ?", (version,))
                    applied.append(version)
            return applied

    # -- clouds and simulator state ---------------------------------------------

    def upsert_cloud(self, cloud_id: str, doc: dict) -> None:
        with self.tx() as conn:
            conn.execute(
                "INSERT INTO clouds(cloud_id, doc) VALUES (?, ?) "
                "ON CONFLICT(cloud_id) DO UPDATE SET doc = excluded.doc",
                (cloud_id, canonical_json(doc)),
            )

    def get_cloud(self, cloud_id: str) -> dict | None:
        row = self._query_one("SELECT doc FROM clouds WHERE cloud_id = ?", (cloud_id,))
        return json.loads(row["doc"]) if row else None

    def list_clouds(self) -> list[dict]:
        rows = self._query("SELECT doc FROM clouds ORDER BY cloud_id")
        return [json.loads(r["doc"]) for r in rows]

    def seed_sim_state(self, cloud_id: str, doc: dict) -> None:
        with self.tx() as conn:
            conn.execute(
                "INSERT OR IGNORE INTO sim_state(cloud_id, doc) VALUES (?, ?)",
                (cloud_id, canonical_json(doc)),
            )

    def read_sim_state(self, cloud_id: str) -> dict:
        row = self._query_one("SELECT doc FROM sim_state WHERE cloud_id = ?", (cloud_id,))
        if row is None:
            raise KeyError(cloud_id)
        return json.loads(row["doc"])

    @contextlib.contextmanager
    def mutate_sim_state(self, cloud_id: str):
        with self.tx() as conn:
            row = conn.execute("SELECT doc FROM sim_state WHERE cloud_id = ?", (cloud_id,)).fetchone()
            if row is None:
                raise KeyError(cloud_id)
            doc = json.loads(row["doc"])
            yield doc
            conn.execute(
                "UPDATE sim_state SET doc = ? WHERE cloud_id = ?",
                (canonical_json(doc), cloud_id),
            )

    # -- catalog -----------------------------------------------------------------

    def insert_appliance(self, slug: str, doc: dict) -> None:
        def run(conn):
            conn.execute(
                "INSERT INTO appliances(slug, doc) VALUES (?, ?)", (slug, canonical_json(doc))
            )

        self.transactional(run)

    def get_appliance(self, slug: str) -> dict | None:
        row = self._query_one("SELECT doc FROM appliances WHERE slug = ?", (slug,))
        return json.loads(row["doc"]) if row else None

    def list_appliances(self) -> list[dict]:
        rows = self._query("SELECT doc FROM appliances ORDER BY slug")
        return [json.loads(r["doc"]) for r in rows]

    # -- users ---------------------------------------------------------------------

    def create_user(self, username: str, token_hash: str) -> int:
        def run(conn):
            cur = conn.execute(
                "INSERT INTO users(username, token_hash, created_at) VALUES (?, ?, ?)",
                (username, token_hash, utc_now_iso()),
            )
            return cur.lastrowid

        return self.transactional(run)

    def get_user(self, user_id: int) -> dict | None:
        row = self._query_one("SELECT * FROM users WHERE id = ?", (user_id,))
        return dict(row) if row else None

    def get_user_by_username(self, username: str) -> dict | None:
        row = self._query_one("SELECT * FROM users WHERE username = ?", (username,))
        return dict(row) if row else None

    def get_user_by_token_hash(self, token_hash: str) -> dict | None:
        row = self._query_one("SELECT * FROM users WHERE token_hash = ?", (token_hash,))
        return dict(row) if row else None

    # -- credentials -----------------------------------------------------------------

    def insert_credentials(self, user_id: int, cloud_type: str, name: str, fields_cipher: dict) -> int:
        def run(conn):
            cur = conn.execute(
                "INSERT INTO credentials(user_id, cloud_type, name, fields_cipher, created_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (user_id, cloud_type, name, canonical_json(fields_cipher), utc_now_iso()),
            )
            return cur.lastrowid

        return self.transactional(run)

    def get_credentials(self, cred_id: int) -> dict | None:
        row = self._query_one("SELECT * FROM credentials WHERE id = ?", (cred_id,))
        if row is None:
            return None
        rec = dict(row)
        rec["fields_cipher"] = json.loads(rec["fields_cipher"])
        return rec

    def list_credentials(self, user_id: int, limit: int = 100, offset: int = 0) -> list[dict]:
        rows = self._query(
            "SELECT * FROM credentials WHERE user_id = ? ORDER BY id LIMIT ? OFFSET ?",
            (user_id, limit, offset),
        )
        out = []
        for row in rows:
            rec = dict(row)
            rec["fields_cipher"] = json.loads(rec["fields_cipher"])
            out.append(rec)
        return out

    def all_credentials(self) -> list[dict]:
        rows = self._query("SELECT * FROM credentials ORDER BY id")
        out = []
        for row in rows:
            rec = dict(row)
            rec["fields_cipher"] = json.loads(rec["fields_cipher"])
            out.append(rec)
        return out

    def update_credentials_cipher(self, cred_id: int, fields_cipher: dict) -> None:
        with self.tx() as conn:
            conn.execute(
                "UPDATE credentials SET fields_cipher = ? WHERE id = ?",
                (canonical_json(fields_cipher), cred_id),
            )

    def delete_credentials(self, cred_id: int) -> None:
        with self.tx() as conn:
            conn.execute("DELETE FROM credentials WHERE id = ?", (cred_id,))

    # -- deployments and tasks ----------------------------------------------------------

    def create_deployment_with_task(
        self,
        *,
        user_id: int,
        name: str,
        app_slug: str,
        app_version: str,
        cloud_id: str,
        credentials_ref: str,
        credentials_cipher: str | None,
        app_config: dict,
        task_kind: str,
        payload_cipher: str | None,
    ) -> tuple[int, int]:
        def run(conn):
            now = utc_now_iso()
            cur = conn.execute(
                "INSERT INTO deployments(user_id, name, app_slug, app_version, cloud_id,"
                " credentials_ref, credentials_cipher, app_config, launch_result, status, created_at)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?, NULL, 'LAUNCHING', ?)",
                (
                    user_id,
                    name,
                    app_slug,
                    app_version,
                    cloud_id,
                    credentials_ref,
                    credentials_cipher,
                    canonical_json(app_config),
                    now,
                ),
            )
            deployment_id = cur.lastrowid
            cur = conn.execute(
                "INSERT INTO tasks(deployment_id, kind, status, payload_cipher, created_at)"
                " VALUES (?, ?, 'PENDING', ?, ?)",
                (deployment_id, task_kind, payload_cipher, now),
            )
            return deployment_id, cur.lastrowid

        return self.transactional(run)

    def get_deployment(self, deployment_id: int) -> dict | None:
        row = self._query_one("SELECT * FROM deployments WHERE id = ?", (deployment_id,))
        return self._deployment_from_row(row) if row else None

    def list_deployments(self, user_id: int, limit: int = 20, offset: int = 0) -> list[dict]:
        rows = self._query(
            "SELECT * FROM deployments WHERE user_id = ? ORDER BY id LIMIT ? OFFSET ?",
            (user_id, limit, offset),
        )
        return [self._deployment_from_row(r) for r in rows]

    @staticmethod
    def _deployment_from_row(row) -> dict:
        rec = dict(row)
        rec["app_config"] = json.loads(rec["app_config"])
        rec["launch_result"] = json.loads(rec["launch_result"]) if rec["launch_result"] else None
        return rec

    def set_deployment_outcome(self, deployment_id: int, status: str, launch_result: dict | None = None) -> None:
        with self.tx() as conn:
            if launch_result is None:
                conn.execute(
                    "UPDATE deployments SET status = ? WHERE id = ?", (status, deployment_id)
                )
            else:
                conn.execute(
                    "UPDATE deployments SET status = ?, launch_result = ? WHERE id = ?",
                    (status, canonical_json(launch_result), deployment_id),
                )

    def merge_launch_result(self, deployment_id: int, updates: dict) -> None:
        """Shallow-merges `updates` into launch_result['cloudLaunch']."""
        with self.tx() as conn:
            row = conn.execute(
                "SELECT launch_result FROM deployments WHERE id = ?", (deployment_id,)
            ).fetchone()
            if row is None or not row["launch_result"]:
                return
            result = json.loads(row["launch_result"])
            result.setdefault("cloudLaunch", {}).update(updates)
            conn.execute(
                "UPDATE deployments SET launch_result = ? WHERE id = ?",
                (canonical_json(result), deployment_id),
            )

    def create_action_task(
        self,
        deployment_id: int,
        kind: str,
        payload_cipher: str | None,
        exclusive_against: tuple[str, ...] = (),
    ) -> int:
        """Inserts a task, atomically refusing when an in-flight task of an
        exclusive kind exists for the deployment. Returns the new task id or
        raises Conflict (callers map it to their domain error)."""

        def run(conn):
            if exclusive_against:
                placeholders = ",".join("?" for _ in exclusive_against)
                row = conn.execute(
                    f"SELECT id FROM tasks WHERE deployment_id = ? AND kind IN ({placeholders})"
                    " AND status IN ('PENDING', 'RUNNING') LIMIT 1",
                    (deployment_id, *exclusive_against),
                ).fetchone()
                if row is not None:
                    raise Conflict(f"task {row['id']} already in flight")
            cur = conn.execute(
                "INSERT INTO tasks(deployment_id, kind, status, payload_cipher, created_at)"
                " VALUES (?, ?, 'PENDING', ?, ?)",
                (deployment_id, kind, payload_cipher, utc_now_iso()),
            )
            return cur.lastrowid

        return self.transactional(run)

    def get_task(self, task_id: int) -> dict | None:
        row = self._query_one("SELECT * FROM tasks WHERE id = ?", (task_id,))
        return self._task_from_row(row) if row else None

    def list_tasks(self, deployment_id: int) -> list[dict]:
        rows = self._query(
            "SELECT * FROM tasks WHERE deployment_id = ? ORDER BY id", (deployment_id,)
        )
        return [self._task_from_row(r) for r in rows]

    @staticmethod
    def _task_from_row(row) -> dict:
        rec = dict(row)
        rec["progress"] = json.loads(rec["progress"])
        rec["result"] = json.loads(rec["result"]) if rec["result"] else None
        return rec

    def claim_task(self, worker_id: str, lease_seconds: float = 600.0) -> dict | None:
        """Atomic compare-and-set claim; at most one winner per task. Tasks whose
        claim outlived the lease are reclaimable."""
        now = time.time()
        stale_before = now - lease_seconds
        with self.tx() as conn:
            row = conn.execute(
                "SELECT id, status FROM tasks WHERE status = 'PENDING'"
                " OR (status = 'RUNNING' AND claimed_at IS NOT NULL AND claimed_at < ?)"
                " ORDER BY id LIMIT 1",
                (stale_before,),
            ).fetchone()
            if row is None:
                return None
            cur = conn.execute(
                "UPDATE tasks SET status = 'RUNNING', claimed_by = ?, claimed_at = ?"
                " WHERE id = ? AND (status = 'PENDING'"
                "   OR (status = 'RUNNING' AND claimed_at IS NOT NULL AND claimed_at < ?))",
                (worker_id, now, row["id"], stale_before),
            )
            if cur.rowcount != 1:
                return None
            claimed = conn.execute("SELECT * FROM tasks WHERE id = ?", (row["id"],)).fetchone()
            return self._task_from_row(claimed)

    def release_stale_claims(self, max_age_seconds: float) -> int:
        cutoff = time.time() - max_age_seconds
        with self.tx() as conn:
            cur = conn.execute(
                "UPDATE tasks SET status = 'PENDING', claimed_by = NULL, claimed_at = NULL"
                " WHERE status = 'RUNNING' AND claimed_at IS NOT NULL AND claimed_at < ?",
                (cutoff,),
            )
            return cur.rowcount

    def append_task_progress(self, task_id: int, entry: list) -> None:
        with self.tx() as conn:
            row = conn.execute("SELECT progress FROM tasks WHERE id = ?", (task_id,)).fetchone()
            if row is None:
                return
            progress = json.loads(row["progress"])
            progress.append(entry)
            conn.execute(
                "UPDATE tasks SET progress = ? WHERE id = ?", (json.dumps(progress), task_id)
            )

    def finish_task(self, task_id: int, status: str, result: dict | None = None, error: str | None = None) -> None:
        with self.tx() as conn:
            conn.execute(
                "UPDATE tasks SET status = ?, result = ?, error = ?, payload_cipher = NULL WHERE id = ?",
                (status, canonical_json(result) if result is not None else None, error, task_id),
            )

    # -- fixtures and debugging -----------------------------------------------------

    def dump(self) -> str:
        doc: dict = {"schema_version": self.schema_version(), "tables": {}}
        for table in _TABLES:
            rows = self._query(f"SELECT * FROM {table} ORDER BY 1")
            doc["tables"][table] = [dict(r) for r in rows]
        return canonical_json(doc)

    def load(self, dump_doc: str | dict) -> None:
        doc = json.loads(dump_doc) if isinstance(dump_doc, str) else dump_doc
        with self.tx() as conn:
            for table in reversed(_TABLES):
                conn.execute(f"DELETE FROM {table}")
            for table in _TABLES:
                for row in doc["tables"].get(table, []):
                    columns = sorted(row)
                    placeholders = ",".join("?" for _ in columns)
                    conn.execute(
                        f"INSERT INTO {table}({','.join(columns)}) VALUES ({placeholders})",
                        tuple(row[c] for c in columns),
                    )

    # -- helpers -------------------------------------------------------------------

    def _query(self, sql: str, params: tuple = ()) -> list:
        with self._lock:
            return self._conn.execute(sql, params).fetchall()

    def _query_one(self, sql: str, params: tuple = ()):
        with self._lock:
            return self._conn.execute(sql, params).fetchone()


class StoreSimBackend:
    """Simulator state backend that round-trips through the store, so API
    handlers and workers in separate processes see one simulated cloud."""

    def __init__(self, store: Store):
        self._store = store

    def seed(self, cloud_id: str, doc: dict) -> None:
        self._store.seed_sim_state(cloud_id, doc)

    def mutate(self, cloud_id: str):
        return self._store.mutate_sim_state(cloud_id)

    def read(self, cloud_id: str) -> dict:
        return self._store.read_sim_state(cloud_id)


def new_worker_id() -> str:
    return f"worker-{uuid.uuid4().hex[:8]}"
