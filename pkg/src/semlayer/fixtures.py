"""Bundled fixture databases and scripted transcripts.

* ``staff_orders``: the two-table orders/staff schema with a replay campaign that
  distills the views ``intern`` and ``staff_generates_revenue``.
* ``braze``: a small customer-engagement schema shaped like a Braze export,
  with a recorded three-view session and a fourteen-view catalog used for
  Entity-Relationship extraction.
"""
from __future__ import annotations

import random
import sqlite3
from importlib import resources
from pathlib import Path

from .schema_model import connect, ingest_ddl, materialize, split_statements, SchemaSnapshot
from .view_catalog import Catalog, add_view


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("semlayer") / "data" / Path(*parts)))


def _open(path: str | Path) -> sqlite3.Connection:
    return connect(path) if str(path) != ":memory:" else sqlite3.connect(":memory:", isolation_level=None)


# --------------------------------------------------------------------------- orders / staff


def staff_orders_ddl() -> str:
    return data_path("staff_orders", "schema.sql").read_text()


def staff_orders_snapshot() -> SchemaSnapshot:
    return ingest_ddl(staff_orders_ddl())


def staff_orders_database(path: str | Path = ":memory:") -> sqlite3.Connection:
    db = _open(path)
    materialize(staff_orders_snapshot(), db)
    for stmt in split_statements(data_path("staff_orders", "rows.sql").read_text()):
        db.execute(stmt)
    return db


def staff_orders_replay_dir() -> Path:
    return data_path("staff_orders", "replay")


# --------------------------------------------------------------------------- Braze-shaped


def braze_ddl() -> str:
    return data_path("braze", "schema.sql").read_text()


def braze_snapshot() -> SchemaSnapshot:
    return ingest_ddl(braze_ddl())


def _braze_rows(snapshot: SchemaSnapshot, n_users: int, seed: int):
    rng = random.Random(seed)
    users = [f"u{i:03d}" for i in range(n_users)]
    pools = {
        "LANGUAGE": ["en", "de", "fr", "es"], "COUNTRY": ["US", "DE", "FR", "ES", "BR"],
        "CITY": ["Austin", "Berlin", "Lyon", "Madrid"], "GENDER": ["F", "M", "O"],
        "PLATFORM": ["ios", "android"], "CONTENT_TYPE": ["classic", "banner", "captioned"],
        "MESSAGE_TYPE": ["modal", "slideup", "full"], "CONVERSION_BEHAVIOR": ["purchase", "signup", "upgrade"],
    }
    rows: dict[str, list[tuple]] = {}
    for table in snapshot.tables:
        out = []
        count = n_users if table.name == "USERS" else 3 * n_users
        for k in range(count):
            row = []
            for col in table.columns:
                name = col.name.upper()
                if table.name == "USERS" and name == "USER_ID":
                    row.append(users[k])
                elif name == "ID":
                    row.append(f"{table.name.lower()}_{k}")
                elif name == "USER_ID":
                    row.append(rng.choice(users))
                elif name == "CAMPAIGN_ID":
                    row.append(f"c{rng.randrange(6)}")
                elif name == "TIME":
                    row.append(1_690_000_000 + rng.randrange(10_000_000))
                elif name in ("OPEN_RATE", "CLICK_THROUGH_RATE"):
                    row.append(round(rng.random(), 3))
                elif name in pools:
                    row.append(rng.choice(pools[name]))
                elif name == "DOB":
                    row.append(f"{rng.randrange(1960, 2005)}-0{rng.randrange(1, 10)}-1{rng.randrange(10)}")
                else:
                    row.append(f"{name.lower()}_{rng.randrange(20)}")
            out.append(tuple(row))
        rows[table.name] = out
    return rows


def braze_database(path: str | Path = ":memory:", n_users: int = 40, seed: int = 7) -> sqlite3.Connection:
    snapshot = braze_snapshot()
    db = _open(path)
    materialize(snapshot, db)
    for table, rows in _braze_rows(snapshot, n_users, seed).items():
        marks = ", ".join("?" * snapshot.table(table).width)
        db.executemany(f'INSERT INTO "{table}" VALUES ({marks})', rows)
    return db


def braze_replay_dir() -> Path:
    return data_path("braze", "replay")


def braze_er_view_sql() -> list[str]:
    return split_statements(data_path("braze", "views.sql").read_text())


def braze_er_catalog(db: sqlite3.Connection) -> Catalog:
    """Register the bundled ER-fixture views (they must validate against ``db``)."""
    catalog = Catalog(braze_snapshot())
    for sql in braze_er_view_sql():
        add_view(db, catalog, sql, session_id="fixture")
    return catalog


def braze_er_transcript() -> Path:
    return data_path("braze", "er.jsonl")
