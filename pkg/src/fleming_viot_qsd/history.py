"""SQLite log of fvqsd runs, one RunRecord per invocation."""

import sqlite3
from contextlib import closing, contextmanager
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Optional, Sequence

from .config import default_data_dir

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    command TEXT NOT NULL,
    experiment TEXT,
    config_hash TEXT NOT NULL,
    seed TEXT NOT NULL,
    out_dir TEXT,
    status TEXT NOT NULL,
    record_count INTEGER,
    message TEXT,
    created_at TEXT NOT NULL,
    finished_at TEXT
);
CREATE INDEX IF NOT EXISTS idx_runs_hash ON runs(config_hash);
"""

_COLUMNS = (
    "id, command, experiment, config_hash, seed, out_dir, status, "
    "record_count, message, created_at, finished_at"
)


def _now() -> str:
    return datetime.now().isoformat(timespec="seconds")


@dataclass(frozen=True)
class RunRecord:
    """One fvqsd invocation: what ran, under which configuration hash, and how it ended.

    status is "running", "complete" or "failed". Seeds are stored as text
    because unsigned 64-bit values overflow SQLite integers.
    """

    id: int
    command: str
    experiment: Optional[str]
    config_hash: str
    seed: int
    out_dir: Optional[str]
    status: str
    record_count: Optional[int]
    message: Optional[str]
    created_at: str
    finished_at: Optional[str]

    @classmethod
    def from_row(cls, row: sqlite3.Row) -> "RunRecord":
        data = dict(row)
        data["seed"] = int(data["seed"])
        return cls(**data)

    @property
    def name(self) -> str:
        return self.experiment or self.command

    def summary_line(self) -> str:
        records = "-" if self.record_count is None else self.record_count
        return (
            f"#{self.id:<4} [{self.status:8}] {self.name:22} seed={self.seed} "
            f"records={records} hash={self.config_hash[:12]} {self.out_dir or ''}"
        )


class RunHistory:
    """Run records kept in $FVQSD_HOME/history.db."""

    def __init__(self, db_path: Optional[Path] = None):
        self._db_path = Path(db_path) if db_path is not None else default_data_dir() / "history.db"
        self._db_path.parent.mkdir(parents=True, exist_ok=True)
        with self._transaction() as conn:
            conn.executescript(_SCHEMA)

    @property
    def db_path(self) -> Path:
        return self._db_path

    @contextmanager
    def _transaction(self) -> Iterator[sqlite3.Connection]:
        """Short-lived connection; commits on success, rolls back on error."""
        with closing(sqlite3.connect(self._db_path)) as conn:
            conn.row_factory = sqlite3.Row
            with conn:
                yield conn

    def _select(
        self, where: str = "", params: Sequence = (), order: str = "id DESC", limit: int = -1
    ) -> list[RunRecord]:
        sql = f"SELECT {_COLUMNS} FROM runs {where} ORDER BY {order} LIMIT ?"
        with self._transaction() as conn:
            rows = conn.execute(sql, (*params, limit)).fetchall()
        return [RunRecord.from_row(row) for row in rows]

    def start_run(
        self,
        command: str,
        config_hash: str,
        seed: int,
        out_dir: Optional[str] = None,
        experiment: Optional[str] = None,
    ) -> int:
        """Record a run as running; returns its id."""
        with self._transaction() as conn:
            cursor = conn.execute(
                "INSERT INTO runs (command, experiment, config_hash, seed, out_dir, status, created_at) "
                "VALUES (?, ?, ?, ?, ?, 'running', ?)",
                (command, experiment, config_hash, str(seed), out_dir, _now()),
            )
            run_id = int(cursor.lastrowid)
        return run_id

    def _finish(self, run_id: int, status: str, record_count: Optional[int], message: Optional[str]) -> None:
        with self._transaction() as conn:
            conn.execute(
                "UPDATE runs SET status = ?, record_count = ?, message = ?, finished_at = ? WHERE id = ?",
                (status, record_count, message, _now(), run_id),
            )

    def mark_complete(self, run_id: int, record_count: int) -> None:
        self._finish(run_id, "complete", record_count, None)

    def mark_failed(self, run_id: int, message: str) -> None:
        self._finish(run_id, "failed", None, message)

    def recent(self, limit: int = 20) -> list[RunRecord]:
        """Latest runs first."""
        return self._select(limit=limit)

    def get(self, run_id: int) -> Optional[RunRecord]:
        found = self._select("WHERE id = ?", (run_id,), limit=1)
        return found[0] if found else None

    def with_hash(self, prefix: str, status: Optional[str] = None) -> list[RunRecord]:
        """Runs whose configuration hash starts with prefix, oldest first."""
        where = "WHERE config_hash LIKE ?"
        params: list = [prefix.replace("%", "").replace("_", "") + "%"]
        if status is not None:
            where += " AND status = ?"
            params.append(status)
        return self._select(where, params, order="id ASC")

    def prune(self, days: int) -> int:
        """Delete finished runs started more than days ago; returns the count removed."""
        cutoff = (datetime.now() - timedelta(days=days)).isoformat(timespec="seconds")
        with self._transaction() as conn:
            cursor = conn.execute(
                "DELETE FROM runs WHERE created_at < ? AND status != 'running'", (cutoff,)
            )
            removed = cursor.rowcount
        return removed
