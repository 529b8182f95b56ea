import hashlib
import json
import logging
import sqlite3
import threading
from pathlib import Path
from typing import List, Optional

from lanetrade.utils.helpers import cache_dir

"""
    Counterexample archive for the non-emptiness sweep.

     db schema:

     key - sha1 of the canonical instance json, first 16 hex digits
     epsilon - the least epsilon found for the instance
     n, lanes - instance size
     instance - json: `{"thetas": [...], "queues": [...]}`
     program - json dump of the epsilon program and its solution, or null

"""

logger = logging.getLogger(__name__)
_lock = threading.Lock()

SCHEMA = """
    CREATE TABLE IF NOT EXISTS counterexamples (
        key TEXT PRIMARY KEY,
        epsilon REAL,
        n INTEGER,
        lanes INTEGER,
        instance TEXT,
        program TEXT
    )
"""


def archive_path() -> Path:
    return cache_dir() / "counterexamples.db"


def get_sqlite3_connection(path) -> sqlite3.Connection:
    db = sqlite3.connect(str(path))
    db.execute(SCHEMA)
    return db


def instance_key(instance_json: dict) -> str:
    canonical = json.dumps(instance_json, sort_keys=True)
    return hashlib.sha1(canonical.encode()).hexdigest()[:16]


def archive_counterexample(instance, epsilon: float, program_json: Optional[dict] = None, path=None) -> str:
    data = instance.to_json()
    key = instance_key(data)
    path = path or archive_path()

    with _lock:
        db = get_sqlite3_connection(path)
        try:
            with db:
                db.execute(
                    "INSERT OR REPLACE INTO counterexamples VALUES (?, ?, ?, ?, ?, ?)",
                    (key, epsilon, instance.n, instance.lanes, json.dumps(data), json.dumps(program_json)),
                )
        finally:
            db.close()

    logger.info("Archived counterexample %s (eps=%s) in %s", key, epsilon, path)
    return key


def fetch_counterexamples(path=None) -> List[dict]:
    path = path or archive_path()
    if not Path(path).is_file():
        return []

    with _lock:
        db = get_sqlite3_connection(path)
        try:
            rows = db.execute("SELECT key, epsilon, instance, program FROM counterexamples ORDER BY key").fetchall()
        finally:
            db.close()

    return [
        {"key": key, "epsilon": eps, "instance": json.loads(instance), "program": json.loads(program)}
        for key, eps, instance, program in rows
    ]
