import os
import json
import sqlite3
import logging
from pathlib import Path

logger = logging.getLogger(__name__)

RESULTS_DB = os.getenv("RESULTS_DB", "runs.db")

PH = "?"  # SQL placeholder for SQLite


def sql(query):
    """Replace {PH} placeholders in query string"""
    return query.replace("{PH}", PH)


def get_conn(db_path=None):
    conn = sqlite3.connect(str(db_path or RESULTS_DB), timeout=30, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    conn.execute("PRAGMA journal_mode=WAL;")
    conn.execute("PRAGMA busy_timeout=30000;")
    return conn


def add_column_if_missing(conn, table, column, coltype):
    """Add column to table if it doesn't exist"""
    cur = conn.cursor()
    cur.execute(f"PRAGMA table_info({table})")
    cols = [row[1] for row in cur.fetchall()]
    if column not in cols:
        cur.execute(f"ALTER TABLE {table} ADD COLUMN {column} {coltype}")
        conn.commit()


def init_db(db_path=None):
    Path(db_path or RESULTS_DB).parent.mkdir(parents=True, exist_ok=True)
    conn = get_conn(db_path)
    cur = conn.cursor()

    cur.execute("""
    CREATE TABLE IF NOT EXISTS experiments (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        experiment TEXT NOT NULL,
        architecture TEXT NOT NULL,
        seed INTEGER NOT NULL,
        sample_size INTEGER NOT NULL,
        folds INTEGER NOT NULL,
        overall_accuracy REAL,
        result_dir TEXT UNIQUE NOT NULL,
        invocation_json TEXT,
        created_at TEXT DEFAULT CURRENT_TIMESTAMP
    )
    """)

    cur.execute("""
    CREATE TABLE IF NOT EXISTS fold_runs (
        id INTEGER PRIMARY KEY AUTOINCREMENT,
        experiment_id INTEGER NOT NULL,
        fold INTEGER NOT NULL,
        best_epoch INTEGER,
        best_val_accuracy REAL,
        test_accuracy REAL,
        wall_time REAL,
        FOREIGN KEY(experiment_id) REFERENCES experiments(id)
    )
    """)

    # Columns added after the first results directories were written
    add_column_if_missing(conn, "experiments", "class_count", "INTEGER DEFAULT 0")
    add_column_if_missing(conn, "experiments", "vocab_sha256", "TEXT")

    conn.commit()
    conn.close()


def record_experiment(summary, result_dir, runs=(), db_path=None) -> int:
    """
    Index one results directory. Re-recording the same directory replaces
    its previous rows.
    """
    init_db(db_path)
    conn = get_conn(db_path)
    cur = conn.cursor()
    result_dir = str(Path(result_dir).resolve())

    cur.execute(sql("SELECT id FROM experiments WHERE result_dir = {PH}"), (result_dir,))
    row = cur.fetchone()
    if row:
        cur.execute(sql("DELETE FROM fold_runs WHERE experiment_id = {PH}"), (row[0],))
        cur.execute(sql("DELETE FROM experiments WHERE id = {PH}"), (row[0],))

    cur.execute(sql("""
        INSERT INTO experiments (experiment, architecture, seed, sample_size, folds,
                                 overall_accuracy, result_dir, invocation_json,
                                 class_count, vocab_sha256)
        VALUES ({PH}, {PH}, {PH}, {PH}, {PH}, {PH}, {PH}, {PH}, {PH}, {PH})
    """), (
        summary.experiment,
        summary.architecture,
        summary.seed,
        summary.sample_size,
        summary.folds,
        summary.overall_accuracy,
        result_dir,
        json.dumps(summary.invocation),
        len(summary.class_names),
        summary.vocab_sha256,
    ))
    experiment_id = cur.lastrowid

    for run in runs:
        cur.execute(sql("""
            INSERT INTO fold_runs (experiment_id, fold, best_epoch, best_val_accuracy, test_accuracy, wall_time)
            VALUES ({PH}, {PH}, {PH}, {PH}, {PH}, {PH})
        """), (experiment_id, run.fold, run.best_epoch, run.best_val_accuracy, run.test_accuracy, run.wall_time))

    conn.commit()
    conn.close()
    logger.debug(f"indexed {result_dir} as experiment {experiment_id}")
    return experiment_id


def list_experiments(db_path=None, experiment: str | None = None):
    if not Path(db_path or RESULTS_DB).exists():
        return []
    conn = get_conn(db_path)
    cur = conn.cursor()
    if experiment:
        cur.execute(sql("""
            SELECT * FROM experiments WHERE experiment = {PH} ORDER BY id
        """), (experiment,))
    else:
        cur.execute("SELECT * FROM experiments ORDER BY id")
    rows = cur.fetchall()
    conn.close()

    experiments = []
    for r in rows:
        item = dict(r)
        try:
            item["invocation"] = json.loads(item.pop("invocation_json") or "[]")
        except Exception:
            item["invocation"] = []
        experiments.append(item)
    return experiments
