"""
Database module for the run registry
Keeps one row per simulated run (and its check results) in SQLite
"""
import sqlite3
from datetime import datetime
from typing import Dict, List, Optional

DATABASE = "runs.db"


def get_db_connection(db_path: Optional[str] = None) -> sqlite3.Connection:
    conn = sqlite3.connect(str(db_path or DATABASE))
    conn.row_factory = sqlite3.Row
    return conn


def init_database(db_path: Optional[str] = None) -> None:
    """Create the registry tables if they do not exist."""
    conn = get_db_connection(db_path)
    try:
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                tag TEXT UNIQUE NOT NULL,
                scenario TEXT NOT NULL,
                sweep_key TEXT,
                sweep_value REAL,
                lambda REAL NOT NULL,
                gamma_0 REAL NOT NULL,
                n_eta INTEGER NOT NULL,
                steps INTEGER NOT NULL,
                final_time REAL NOT NULL,
                passed INTEGER NOT NULL,
                warnings INTEGER NOT NULL,
                created_at TEXT NOT NULL
            )
            """
        )
        conn.execute(
            """
            CREATE TABLE IF NOT EXISTS checks (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                name TEXT NOT NULL,
                ok INTEGER NOT NULL,
                applicable INTEGER NOT NULL,
                message TEXT,
                FOREIGN KEY (run_id) REFERENCES runs (id)
            )
            """
        )
        conn.commit()
    finally:
        conn.close()


def insert_run(tag: str, scenario: str, sweep_key: Optional[str], sweep_value: Optional[float],
               lam: float, gamma_0: float, n_eta: int, steps: int, final_time: float,
               passed: bool, warnings: List[str], checks: List[Dict], db_path: Optional[str] = None) -> bool:
    """
    Insert (or replace) a run and its checks. A rerun of the same tag
    overwrites the earlier row.
    """
    conn = get_db_connection(db_path)
    try:
        old = conn.execute("SELECT id FROM runs WHERE tag = ?", (tag,)).fetchone()
        if old:
            conn.execute("DELETE FROM checks WHERE run_id = ?", (old["id"],))
            conn.execute("DELETE FROM runs WHERE id = ?", (old["id"],))
        cur = conn.execute(
            """
            INSERT INTO runs (tag, scenario, sweep_key, sweep_value, lambda, gamma_0, n_eta,
                              steps, final_time, passed, warnings, created_at)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (tag, scenario, sweep_key, sweep_value, lam, gamma_0, n_eta, steps, final_time,
             int(passed), len(warnings), datetime.now().isoformat()),
        )
        run_id = cur.lastrowid
        for check in checks:
            conn.execute(
                """
                INSERT INTO checks (run_id, name, ok, applicable, message)
                VALUES (?, ?, ?, ?, ?)
                """,
                (run_id, check["name"], int(check["ok"]), int(check["applicable"]), check.get("message")),
            )
        conn.commit()
        return True
    except sqlite3.Error:
        return False
    finally:
        conn.close()


def get_run_by_tag(tag: str, db_path: Optional[str] = None) -> Optional[Dict]:
    """Get one run with its checks, or None."""
    conn = get_db_connection(db_path)
    try:
        row = conn.execute("SELECT * FROM runs WHERE tag = ?", (tag,)).fetchone()
        if not row:
            return None
        run = dict(row)
        rows = conn.execute(
            "SELECT name, ok, applicable, message FROM checks WHERE run_id = ? ORDER BY id",
            (run["id"],),
        ).fetchall()
        run["checks"] = [
            {"name": r["name"], "ok": bool(r["ok"]), "applicable": bool(r["applicable"]), "message": r["message"]}
            for r in rows
        ]
        run["passed"] = bool(run["passed"])
        return run
    finally:
        conn.close()


def get_all_runs(db_path: Optional[str] = None) -> List[Dict]:
    """Every registered run, oldest first."""
    conn = get_db_connection(db_path)
    try:
        rows = conn.execute("SELECT * FROM runs ORDER BY id").fetchall()
        out = []
        for r in rows:
            run = dict(r)
            run["passed"] = bool(run["passed"])
            out.append(run)
        return out
    finally:
        conn.close()


def get_failed_runs(db_path: Optional[str] = None) -> List[Dict]:
    """Runs with at least one failing applicable check."""
    conn = get_db_connection(db_path)
    try:
        rows = conn.execute(
            """
            SELECT r.tag, c.name, c.message
            FROM runs r
            JOIN checks c ON c.run_id = r.id
            WHERE c.applicable = 1 AND c.ok = 0
            ORDER BY r.id, c.id
            """
        ).fetchall()
        return [dict(r) for r in rows]
    finally:
        conn.close()
