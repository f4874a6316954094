"""
Run registry and audit log.

This module owns:
- Schema creation
- One row per CLI run (command, config echo, outcome, counts)
- Free-form audit events attached to a run

SQLite keeps the registry a single local file. Nothing recorded here
feeds back into indexes, reports or query files.
"""

import sqlite3
from pathlib import Path
from typing import Any, Dict, List, Optional

from src import config
from src.utils import json_dumps_safe, json_loads_safe, utc_now_iso


# ============================
# CONNECTION
# ============================

def get_connection() -> sqlite3.Connection:
    path = Path(config.DATABASE_PATH)
    path.parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(path)
    conn.row_factory = sqlite3.Row
    return conn


# ============================
# SCHEMA INITIALIZATION
# ============================

def init_db():
    """Create all required tables if they do not exist."""
    conn = get_connection()
    cur = conn.cursor()

    # --- RUNS ---
    cur.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            command TEXT,
            started_at TEXT,
            finished_at TEXT,
            status TEXT,
            config_json TEXT,
            summary_json TEXT
        )
    """)

    # --- AUDIT LOG ---
    cur.execute("""
        CREATE TABLE IF NOT EXISTS audit_log (
            timestamp TEXT,
            action TEXT,
            run_id TEXT,
            details TEXT
        )
    """)

    conn.commit()
    conn.close()


# ============================
# AUDIT LOGGING
# ============================

def log_audit(action: str, run_id: str, details: Optional[Dict[str, Any]] = None):
    if not config.ENABLE_AUDIT_LOGGING:
        return

    init_db()
    conn = get_connection()
    cur = conn.cursor()

    cur.execute("""
        INSERT INTO audit_log (timestamp, action, run_id, details)
        VALUES (?, ?, ?, ?)
    """, (
        utc_now_iso(),
        action,
        run_id,
        json_dumps_safe(details or {}, sort_keys=True)
    ))

    conn.commit()
    conn.close()


def get_audit_events(run_id: str) -> List[Dict[str, Any]]:
    init_db()
    conn = get_connection()
    rows = conn.execute("""
        SELECT * FROM audit_log WHERE run_id = ? ORDER BY rowid ASC
    """, (run_id,)).fetchall()
    conn.close()

    events = []
    for row in rows:
        data = dict(row)
        data["details"] = json_loads_safe(data["details"])
        events.append(data)
    return events


# ============================
# RUNS
# ============================

def start_run(run_id: str, command: str, run_config: Dict[str, Any]):
    if not config.ENABLE_AUDIT_LOGGING:
        return

    init_db()
    conn = get_connection()
    conn.execute("""
        INSERT INTO runs (run_id, command, started_at, status, config_json)
        VALUES (?, ?, ?, ?, ?)
    """, (
        run_id,
        command,
        utc_now_iso(),
        "running",
        json_dumps_safe(run_config, sort_keys=True)
    ))
    conn.commit()
    conn.close()

    log_audit("RUN_STARTED", run_id, {"command": command})


def finish_run(run_id: str, status: str, summary: Optional[Dict[str, Any]] = None):
    if not config.ENABLE_AUDIT_LOGGING:
        return

    init_db()
    conn = get_connection()
    conn.execute("""
        UPDATE runs SET finished_at = ?, status = ?, summary_json = ?
        WHERE run_id = ?
    """, (
        utc_now_iso(),
        status,
        json_dumps_safe(summary or {}, sort_keys=True),
        run_id
    ))
    conn.commit()
    conn.close()

    log_audit("RUN_FINISHED", run_id, {"status": status})


def list_runs(command: Optional[str] = None) -> List[Dict[str, Any]]:
    init_db()
    conn = get_connection()
    if command:
        rows = conn.execute(
            "SELECT * FROM runs WHERE command = ? ORDER BY started_at ASC", (command,)
        ).fetchall()
    else:
        rows = conn.execute("SELECT * FROM runs ORDER BY started_at ASC").fetchall()
    conn.close()

    runs = []
    for row in rows:
        data = dict(row)
        data["config"] = json_loads_safe(data.pop("config_json"))
        data["summary"] = json_loads_safe(data.pop("summary_json"))
        runs.append(data)
    return runs
