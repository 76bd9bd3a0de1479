import json
import sqlite3
import threading
from typing import List, Optional, Tuple


class RunLedger:
    """sqlite record of finished fine-tuning runs, so an interrupted seed sweep can resume."""

    def __init__(self, db_path: str = 'consistency_ft.db'):
        self.db_path = db_path
        self.lock = threading.Lock()
        self._init_db()

    def _init_db(self):
        with self.lock, sqlite3.connect(self.db_path) as conn:
            conn.execute('''
                CREATE TABLE IF NOT EXISTS ft_runs (
                    mode TEXT NOT NULL,
                    seed INTEGER NOT NULL,
                    fixture_hash TEXT NOT NULL,
                    config_digest TEXT NOT NULL,
                    report_json TEXT NOT NULL,
                    PRIMARY KEY (mode, seed, fixture_hash, config_digest)
                )
            ''')
            conn.commit()

    def is_recorded(self, mode: str, seed: int, fixture_hash: str, config_digest: str) -> bool:
        with self.lock, sqlite3.connect(self.db_path) as conn:
            cur = conn.execute(
                'SELECT 1 FROM ft_runs WHERE mode = ? AND seed = ? AND fixture_hash = ? AND config_digest = ?',
                (mode, seed, fixture_hash, config_digest))
            return cur.fetchone() is not None

    def add_run(self, mode: str, seed: int, fixture_hash: str, config_digest: str, report: dict):
        with self.lock, sqlite3.connect(self.db_path) as conn:
            conn.execute(
                'INSERT OR REPLACE INTO ft_runs (mode, seed, fixture_hash, config_digest, report_json) '
                'VALUES (?, ?, ?, ?, ?)',
                (mode, seed, fixture_hash, config_digest, json.dumps(report, sort_keys=True))
            )
            conn.commit()

    def get_report(self, mode: str, seed: int, fixture_hash: str, config_digest: str) -> Optional[dict]:
        with self.lock, sqlite3.connect(self.db_path) as conn:
            cur = conn.execute(
                'SELECT report_json FROM ft_runs WHERE mode = ? AND seed = ? AND fixture_hash = ? AND config_digest = ?',
                (mode, seed, fixture_hash, config_digest))
            row = cur.fetchone()
            return json.loads(row[0]) if row else None

    def get_all_runs(self) -> List[Tuple[str, int]]:
        with self.lock, sqlite3.connect(self.db_path) as conn:
            cur = conn.execute('SELECT mode, seed FROM ft_runs ORDER BY mode, seed')
            return [(row[0], row[1]) for row in cur.fetchall()]
