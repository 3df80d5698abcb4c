"""Relational schema snapshots: DDL ingestion, introspection, FK inference, prompt wording.

All parsing and introspection goes through SQLite, which is the embedded engine
every view is later validated against.  Column descriptions are taken from
``-- comments`` trailing each column definition.
"""
from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import sqlglot
from sqlglot import exp
from sqlglot.errors import ParseError, TokenError
from sqlglot.tokens import TokenType

from ._util import canonical_json, fold, quote_ident

SNAPSHOT_VERSION = "schema_snapshot.v1"
DEFAULT_SAMPLE_SIZE = 5
EMPTY_SCOPE_TEXT = "(no tables in scope)"


class SchemaError(ValueError):
    """Raised for malformed DDL or inconsistent snapshots."""


class DDLParseError(SchemaError):
    def __init__(self, message: str, statement_index: int | None = None, token: str | None = None):
        super().__init__(message)
        self.statement_index = statement_index
        self.token = token


@dataclass(frozen=True, eq=False)
class ColumnRef:
    """A ``table.column`` pair compared case-insensitively; original case is kept."""

    table: str
    column: str

    def __post_init__(self):
        if not self.table or not self.column:
            raise SchemaError(f"empty identifier in column reference {self.table!r}.{self.column!r}")

    @property
    def key(self) -> tuple[str, str]:
        return fold(self.table), fold(self.column)

    def __eq__(self, other):
        if not isinstance(other, ColumnRef):
            return NotImplemented
        return self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def __lt__(self, other: "ColumnRef"):
        return self.key < other.key

    def __str__(self):
        return f"{self.table}.{self.column}"

    def to_dict(self) -> dict:
        return {"table": self.table, "column": self.column}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ColumnRef":
        return cls(d["table"], d["column"])

    @classmethod
    def parse(cls, text: str) -> "ColumnRef":
        table, _, column = text.rpartition(".")
        return cls(table, column)


@dataclass(frozen=True)
class ColumnDef:
    name: str
    type: str = ""
    description: str = ""
    is_primary_key: bool = False


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[ColumnDef, ...]

    def __post_init__(self):
        if not self.columns:
            raise SchemaError(f"table {self.name!r} has no columns")
        seen = set()
        for col in self.columns:
            if fold(col.name) in seen:
                raise SchemaError(f"duplicate column {col.name!r} in table {self.name!r}")
            seen.add(fold(col.name))

    @property
    def width(self) -> int:
        return len(self.columns)

    @property
    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def primary_key(self) -> list[str]:
        return [c.name for c in self.columns if c.is_primary_key]

    def column(self, name: str) -> ColumnDef | None:
        for c in self.columns:
            if fold(c.name) == fold(name):
                return c
        return None

    def refs(self) -> list[ColumnRef]:
        return [ColumnRef(self.name, c.name) for c in self.columns]


@dataclass(frozen=True)
class ForeignKeyDef:
    source: ColumnRef
    target: ColumnRef
    provenance: str = "declared"
    group: str | None = None

    def __post_init__(self):
        if self.provenance not in ("declared", "inferred"):
            raise SchemaError(f"unknown FK provenance {self.provenance!r}")
        if self.source == self.target:
            raise SchemaError(f"foreign key {self.source} references itself")

    @property
    def pair_key(self):
        return self.source.key, self.target.key

    def describe(self) -> str:
        return f"{self.source} references {self.target}"

    def to_dict(self) -> dict:
        return {
            "from": self.source.to_dict(),
            "to": self.target.to_dict(),
            "provenance": self.provenance,
            "group": self.group,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ForeignKeyDef":
        return cls(ColumnRef.from_dict(d["from"]), ColumnRef.from_dict(d["to"]),
                   d.get("provenance", "declared"), d.get("group"))


@dataclass(frozen=True)
class SchemaSnapshot:
    tables: tuple[TableDef, ...] = ()
    foreign_keys: tuple[ForeignKeyDef, ...] = ()
    samples: Mapping[str, tuple[tuple, ...]] = field(default_factory=dict)

    def __post_init__(self):
        index: dict[str, TableDef] = {}
        for t in self.tables:
            if fold(t.name) in index:
                raise SchemaError(f"duplicate table {t.name!r}")
            index[fold(t.name)] = t
        object.__setattr__(self, "_index", index)
        for fk in self.foreign_keys:
            for ref in (fk.source, fk.target):
                if not self.has_column(ref):
                    raise SchemaError(f"foreign key endpoint {ref} does not exist")
        for name in self.samples:
            if fold(name) not in index:
                raise SchemaError(f"samples given for unknown table {name!r}")

    def table(self, name: str) -> TableDef:
        try:
            return self._index[fold(name)]
        except KeyError:
            raise SchemaError(f"unknown table {name!r}") from None

    def has_table(self, name: str) -> bool:
        return fold(name) in self._index

    def has_column(self, ref: ColumnRef) -> bool:
        t = self._index.get(fold(ref.table))
        return t is not None and t.column(ref.column) is not None

    def canonical_ref(self, table: str, column: str) -> ColumnRef:
        """Return the ColumnRef spelled as declared in the schema."""
        t = self.table(table)
        c = t.column(column)
        if c is None:
            raise SchemaError(f"unknown column {table}.{column}")
        return ColumnRef(t.name, c.name)

    @property
    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]

    @property
    def column_count(self) -> int:
        return sum(t.width for t in self.tables)

    def columns(self) -> list[ColumnRef]:
        return [ref for t in self.tables for ref in t.refs()]

    def with_foreign_keys(self, extra: Iterable[ForeignKeyDef]) -> "SchemaSnapshot":
        return SchemaSnapshot(self.tables, tuple(self.foreign_keys) + tuple(extra), self.samples)

    def with_samples(self, samples: Mapping[str, Sequence[Sequence]]) -> "SchemaSnapshot":
        return SchemaSnapshot(self.tables, self.foreign_keys,
                              {k: tuple(tuple(r) for r in v) for k, v in samples.items()})

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "tables": [
                {
                    "name": t.name,
                    "columns": [
                        {"name": c.name, "type": c.type, "description": c.description,
                         "primary_key": c.is_primary_key}
                        for c in t.columns
                    ],
                }
                for t in self.tables
            ],
            "foreign_keys": [fk.to_dict() for fk in self.foreign_keys],
            "samples": {k: [list(r) for r in v] for k, v in self.samples.items()},
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemaSnapshot":
        if d.get("version") != SNAPSHOT_VERSION:
            raise SchemaError(f"unsupported snapshot version {d.get('version')!r}")
        tables = tuple(
            TableDef(t["name"], tuple(ColumnDef(c["name"], c.get("type", ""), c.get("description", ""),
                                                bool(c.get("primary_key", False)))
                                      for c in t["columns"]))
            for t in d["tables"]
        )
        fks = tuple(ForeignKeyDef.from_dict(f) for f in d.get("foreign_keys", []))
        samples = {k: tuple(tuple(r) for r in v) for k, v in d.get("samples", {}).items()}
        return cls(tables, fks, samples)

    @classmethod
    def from_json(cls, text: str) -> "SchemaSnapshot":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------- DDL


def split_statements(sql: str) -> list[str]:
    """Split a script on top-level semicolons, keeping comments inside statements."""
    try:
        tokens = sqlglot.Dialect.get_or_raise("sqlite").tokenize(sql)
    except TokenError as e:
        raise DDLParseError(f"cannot tokenize script: {e}") from e
    statements, start = [], None
    for tok in tokens:
        if tok.token_type == TokenType.SEMICOLON:
            if start is not None:
                statements.append(sql[start:tok.start])
            start = None
        elif start is None:
            start = tok.start
    if start is not None:
        statements.append(sql[start:])
    return [s.strip() for s in statements if s.strip()]


def _column_descriptions(statement: str) -> dict[str, str]:
    try:
        tree = sqlglot.parse_one(statement, read="sqlite")
    except (ParseError, TokenError):
        return {}
    out = {}
    if isinstance(tree, exp.Create) and isinstance(tree.this, exp.Schema):
        for coldef in tree.this.expressions:
            if isinstance(coldef, exp.ColumnDef) and coldef.comments:
                out[fold(coldef.name)] = " ".join(c.strip() for c in coldef.comments if c.strip())
    return out


def _syntax_token(message: str) -> str | None:
    # sqlite reports: near "FOO": syntax error
    if 'near "' in message:
        return message.split('near "', 1)[1].split('"', 1)[0]
    return None


def ingest_ddl(ddl_text: str) -> SchemaSnapshot:
    """Parse a script of CREATE TABLE statements into a snapshot.

    Statements are executed one by one in a scratch in-memory SQLite database so
    that the engine's own parser decides validity and declared types are kept
    verbatim.
    """
    statements = split_statements(ddl_text)
    con = sqlite3.connect(":memory:")
    try:
        descriptions: dict[str, dict[str, str]] = {}
        order: list[str] = []
        for i, stmt in enumerate(statements):
            head = stmt.lstrip().split(None, 2)
            kind = " ".join(w.upper() for w in head[:2])
            if kind not in ("CREATE TABLE", "CREATE TEMP", "CREATE TEMPORARY") or "TABLE" not in stmt.upper():
                token = head[0] if head else ""
                raise DDLParseError(f"statement {i}: expected CREATE TABLE, got {stmt[:40]!r}", i, token)
            before = {r[0] for r in con.execute("SELECT name FROM sqlite_master WHERE type='table'")}
            try:
                con.execute(stmt)
            except sqlite3.Error as e:
                msg = str(e)
                if "already exists" in msg:
                    raise DDLParseError(f"statement {i}: duplicate table ({msg})", i) from e
                token = _syntax_token(msg)
                raise DDLParseError(f"statement {i}: {msg}", i, token) from e
            created = [r[0] for r in con.execute("SELECT name FROM sqlite_master WHERE type='table'")
                       if r[0] not in before]
            if len(created) != 1:
                raise DDLParseError(f"statement {i}: did not create exactly one table", i)
            order.append(created[0])
            descriptions[fold(created[0])] = _column_descriptions(stmt)
        return _snapshot_from_connection(con, order, descriptions)
    finally:
        con.close()


def _snapshot_from_connection(con: sqlite3.Connection, order: Sequence[str],
                              descriptions: Mapping[str, Mapping[str, str]]) -> SchemaSnapshot:
    tables = []
    for name in order:
        info = con.execute(f"PRAGMA table_info({quote_ident(name)})").fetchall()
        desc = descriptions.get(fold(name), {})
        cols = tuple(ColumnDef(r[1], r[2] or "", desc.get(fold(r[1]), ""), r[5] > 0) for r in info)
        tables.append(TableDef(name, cols))
    by_name = {fold(t.name): t for t in tables}

    fks = []
    for t in tables:
        rows = con.execute(f"PRAGMA foreign_key_list({quote_ident(t.name)})").fetchall()
        groups: dict[int, list] = {}
        for r in rows:
            groups.setdefault(r[0], []).append(r)
        for fk_id in sorted(groups, reverse=True):
            members = sorted(groups[fk_id], key=lambda r: r[1])
            target = by_name.get(fold(members[0][2]))
            if target is None:
                raise DDLParseError(f"table {t.name}: foreign key references unknown table {members[0][2]!r}")
            if any(m[4] is None for m in members):
                to_cols = target.primary_key
                if len(to_cols) != len(members):
                    raise DDLParseError(f"table {t.name}: cannot resolve implicit key of {target.name}")
            else:
                to_cols = [m[4] for m in members]
            group = f"{t.name}#fk{len(fks)}" if len(members) > 1 else None
            for m, to_col in zip(members, to_cols):
                src, dst = t.column(m[3]), target.column(to_col)
                if src is None or dst is None:
                    raise DDLParseError(f"table {t.name}: foreign key column {m[3]}->{to_col} does not exist")
                fks.append(ForeignKeyDef(ColumnRef(t.name, src.name), ColumnRef(target.name, dst.name),
                                         "declared", group))
    return SchemaSnapshot(tuple(tables), tuple(fks))


def render_ddl(snapshot: SchemaSnapshot) -> str:
    """Emit CREATE TABLE statements that ingest back to ``snapshot`` (samples excluded)."""
    out = []
    for t in snapshot.tables:
        lines = []
        pk = t.primary_key
        for c in t.columns:
            lines.append((f"  {quote_ident(c.name)} {c.type}".rstrip(), c.description))
        if pk:
            lines.append((f"  PRIMARY KEY ({', '.join(quote_ident(p) for p in pk)})", ""))
        fk_groups: dict[Any, list[ForeignKeyDef]] = {}
        for fk in snapshot.foreign_keys:
            if fold(fk.source.table) == fold(t.name):
                fk_groups.setdefault(fk.group or id(fk), []).append(fk)
        for members in fk_groups.values():
            src = ", ".join(quote_ident(f.source.column) for f in members)
            dst = ", ".join(quote_ident(f.target.column) for f in members)
            lines.append((f"  FOREIGN KEY ({src}) REFERENCES {quote_ident(members[0].target.table)} ({dst})", ""))
        body = []
        for i, (text, comment) in enumerate(lines):
            sep = "," if i < len(lines) - 1 else ""
            body.append(f"{text}{sep}" + (f" -- {comment}" if comment else ""))
        out.append(f"CREATE TABLE {quote_ident(t.name)} (\n" + "\n".join(body) + "\n);")
    return "\n\n".join(out) + ("\n" if out else "")


def materialize(snapshot: SchemaSnapshot, db: sqlite3.Connection) -> None:
    """Create the snapshot's tables (and sample rows, if any) inside ``db``."""
    for stmt in split_statements(render_ddl(snapshot)):
        db.execute(stmt)
    for table, rows in snapshot.samples.items():
        t = snapshot.table(table)
        marks = ", ".join("?" for _ in t.columns)
        db.executemany(f"INSERT INTO {quote_ident(t.name)} VALUES ({marks})", rows)
    db.commit()


# --------------------------------------------------------------------------- live database


def connect(path: str | Path) -> sqlite3.Connection:
    """Open a database file in autocommit mode (explicit savepoints are used for writes)."""
    con = sqlite3.connect(str(path), isolation_level=None)
    return con


def introspect_database(db: sqlite3.Connection) -> SchemaSnapshot:
    """Snapshot every base table of ``db``; views and internal tables are skipped."""
    rows = db.execute(
        "SELECT name, sql FROM sqlite_master WHERE type='table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
    ).fetchall()
    script = ";\n".join(r[1] for r in rows if r[1])
    try:
        return ingest_ddl(script + (";" if script else ""))
    except DDLParseError:
        pass
    # stored DDL not re-parseable on its own (e.g. virtual tables); read the catalog instead
    return _snapshot_from_connection(db, [r[0] for r in rows], {})


def _order_clause(db: sqlite3.Connection, table: str) -> str:
    info = db.execute(f"PRAGMA table_info({quote_ident(table)})").fetchall()
    pk = [r[1] for r in sorted((r for r in info if r[5] > 0), key=lambda r: r[5])]
    rest = [r[1] for r in info if r[1] not in pk]
    return ", ".join(quote_ident(c) for c in pk + rest)


def sample_rows(db: sqlite3.Connection, table: str, n: int = DEFAULT_SAMPLE_SIZE) -> list[tuple]:
    exists = db.execute("SELECT name FROM sqlite_master WHERE type IN ('table','view') AND name = ? COLLATE NOCASE",
                        (table,)).fetchone()
    if exists is None:
        raise SchemaError(f"unknown table {table!r}")
    order = _order_clause(db, exists[0])
    return [tuple(r) for r in db.execute(
        f"SELECT * FROM {quote_ident(exists[0])} ORDER BY {order} LIMIT ?", (int(n),))]


def attach_samples(snapshot: SchemaSnapshot, db: sqlite3.Connection, n: int = DEFAULT_SAMPLE_SIZE) -> SchemaSnapshot:
    samples = {t.name: [_jsonable_row(r) for r in sample_rows(db, t.name, n)] for t in snapshot.tables}
    return snapshot.with_samples(samples)


def _jsonable_row(row: Sequence) -> tuple:
    return tuple(v.hex() if isinstance(v, (bytes, bytearray)) else v for v in row)


# --------------------------------------------------------------------------- FK inference


@dataclass(frozen=True)
class InferenceConfig:
    """Heuristics used by :func:`infer_foreign_keys`."""

    name_match: bool = True
    pattern_match: bool = True


def _table_name_variants(name: str) -> set[str]:
    n = fold(name)
    out = {n}
    if n.endswith("ies"):
        out.add(n[:-3] + "y")
    if n.endswith("es"):
        out.add(n[:-2])
    if n.endswith("s"):
        out.add(n[:-1])
    return out


def infer_foreign_keys(snapshot: SchemaSnapshot, config: InferenceConfig = InferenceConfig()) -> list[ForeignKeyDef]:
    """Propose undeclared FK edges from column naming conventions.

    Rules: a column whose name equals another table's single-column primary
    key, or a ``<table>_id`` column naming another table (singular or
    plural form).  Declared pairs are never re-emitted.
    """
    declared = {fk.pair_key for fk in snapshot.foreign_keys}
    candidates: dict[tuple, ForeignKeyDef] = {}

    def add(src: ColumnRef, dst: ColumnRef):
        if src == dst or fold(src.table) == fold(dst.table):
            return
        fk = ForeignKeyDef(src, dst, "inferred")
        if fk.pair_key not in declared and fk.pair_key not in candidates:
            candidates[fk.pair_key] = fk

    single_pk = {fold(t.name): t.primary_key[0] for t in snapshot.tables if len(t.primary_key) == 1}

    if config.name_match:
        for target in snapshot.tables:
            pk = single_pk.get(fold(target.name))
            if pk is None:
                continue
            for t in snapshot.tables:
                if t is target:
                    continue
                col = t.column(pk)
                if col is None:
                    continue
                # both sides keyed on the same name: direction is ambiguous, leave it to the pattern rule
                if col.is_primary_key and len(t.primary_key) == 1:
                    continue
                add(ColumnRef(t.name, col.name), ColumnRef(target.name, pk))

    if config.pattern_match:
        by_variant: dict[str, list[TableDef]] = {}
        for t in snapshot.tables:
            for v in _table_name_variants(t.name):
                by_variant.setdefault(v, []).append(t)
        for t in snapshot.tables:
            for col in t.columns:
                name = fold(col.name)
                if not name.endswith("_id") or len(name) <= 3:
                    continue
                stem = name[:-3]
                for target in by_variant.get(stem, []):
                    if target is t:
                        continue
                    pk = single_pk.get(fold(target.name))
                    dst = target.column(pk) if pk else (target.column(col.name) or target.column("id"))
                    if dst is None:
                        continue
                    add(ColumnRef(t.name, col.name), ColumnRef(target.name, dst.name))

    return sorted(candidates.values(), key=lambda fk: fk.pair_key)


# --------------------------------------------------------------------------- prompt wording


def _fmt_value(v: Any) -> str:
    if v is None:
        return "NULL"
    return str(v)


def schema_wording(snapshot: SchemaSnapshot, scope: Iterable[str] | None = None,
                   include_samples: bool = False) -> str:
    """Plain-text description of the tables in ``scope`` for use in prompts.

    ``scope=None`` means every table.  Tables are listed in snapshot order.
    """
    if scope is None:
        wanted = {fold(n) for n in snapshot.table_names}
    else:
        wanted = set()
        for name in scope:
            snapshot.table(name)  # raises for unknown tables
            wanted.add(fold(name))
    if not wanted:
        return EMPTY_SCOPE_TEXT + "\n"

    parts = []
    for t in snapshot.tables:
        if fold(t.name) not in wanted:
            continue
        lines = [f"Table {t.name} ({t.width} columns):"]
        for c in t.columns:
            line = f"  - {c.name}"
            if c.type:
                line += f" {c.type}"
            if c.is_primary_key:
                line += " [primary key]"
            if c.description:
                line += f": {c.description}"
            lines.append(line)
        rows = snapshot.samples.get(t.name) or next(
            (v for k, v in snapshot.samples.items() if fold(k) == fold(t.name)), ())
        if include_samples and rows:
            lines.append(f"  Sample rows ({len(rows)}):")
            lines.append("```")
            lines.append(" | ".join(t.column_names))
            lines.extend(" | ".join(_fmt_value(v) for v in r) for r in rows)
            lines.append("```")
        parts.append("\n".join(lines))

    links = [fk for fk in snapshot.foreign_keys
             if fold(fk.source.table) in wanted and fold(fk.target.table) in wanted]
    if links:
        parts.append("Foreign keys:\n" + "\n".join(f"  - {fk.describe()}" for fk in links))
    return "\n\n".join(parts) + "\n"


def table_wording(snapshot: SchemaSnapshot, table: str) -> str:
    return schema_wording(snapshot, [table], include_samples=False)
