"""View parsing, column lineage, validation by execution, and the persisted catalog.

Lineage maps every output column of a view to the set of *base table* columns
its value is computed from.  References to other catalog views are resolved
through those views' stored lineage, so chains of views collapse onto the
original schema.  Columns read by WHERE / JOIN ... ON / GROUP BY / HAVING are
collected separately as predicate columns.
"""
from __future__ import annotations

import json
import sqlite3
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import sqlglot
from sqlglot import exp
from sqlglot.errors import OptimizeError, ParseError, SqlglotError, TokenError
from sqlglot.optimizer.qualify import qualify
from sqlglot.optimizer.scope import Scope, build_scope

from ._util import atomic_write, canonical_json, digest_text, fold, quote_ident
from .schema_model import ColumnRef, SchemaSnapshot, split_statements

CATALOG_VERSION = "catalog.v1"
SUCCESS_TEXT = "View successfully defined."


class CatalogError(ValueError):
    pass


class ViewParseError(CatalogError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        super().__init__(message)
        self.line = line
        self.col = col


class LineageError(CatalogError):
    pass


class UnknownReferenceError(LineageError):
    pass


class CyclicReferenceError(LineageError):
    pass


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class ViewDefinition:
    name: str
    sql: str
    output_columns: tuple[str, ...]
    referenced_objects: frozenset[str]


@dataclass(frozen=True)
class Lineage:
    columns: tuple[tuple[str, frozenset[ColumnRef]], ...]
    predicate_columns: frozenset[ColumnRef] = frozenset()

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def origins(self, name: str) -> frozenset[ColumnRef]:
        for n, refs in self.columns:
            if fold(n) == fold(name):
                return refs
        raise KeyError(name)

    @property
    def output_origins(self) -> frozenset[ColumnRef]:
        out: set[ColumnRef] = set()
        for _, refs in self.columns:
            out |= refs
        return frozenset(out)

    @property
    def coverage(self) -> frozenset[ColumnRef]:
        return self.output_origins | self.predicate_columns

    @property
    def tables(self) -> frozenset[str]:
        return frozenset(r.table for r in self.coverage)

    def to_dict(self) -> dict:
        return {
            "columns": [{"name": n, "origins": [r.to_dict() for r in sorted(refs)]} for n, refs in self.columns],
            "predicate_columns": [r.to_dict() for r in sorted(self.predicate_columns)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Lineage":
        cols = tuple((c["name"], frozenset(ColumnRef.from_dict(r) for r in c["origins"])) for c in d["columns"])
        return cls(cols, frozenset(ColumnRef.from_dict(r) for r in d.get("predicate_columns", [])))


@dataclass(frozen=True)
class ValidationRecord:
    passed: bool
    probe_rows: int = 0
    error: str = ""
    stage: str = ""  # "create" or "probe" on failure
    sequence: int = 0  # logical validation order; wall-clock time lives in run manifests only


@dataclass(frozen=True)
class CatalogEntry:
    view: ViewDefinition
    lineage: Lineage
    session_id: str
    validation: ValidationRecord

    @property
    def name(self) -> str:
        return self.view.name

    @property
    def width(self) -> int:
        return len(self.lineage.columns)

    def to_dict(self) -> dict:
        return {
            "name": self.view.name,
            "sql": self.view.sql,
            "output_columns": list(self.view.output_columns),
            "referenced_objects": sorted(self.view.referenced_objects, key=fold),
            "lineage": self.lineage.to_dict(),
            "session_id": self.session_id,
            "validation": {"passed": self.validation.passed, "probe_rows": self.validation.probe_rows,
                           "sequence": self.validation.sequence},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CatalogEntry":
        view = ViewDefinition(d["name"], d["sql"], tuple(d["output_columns"]), frozenset(d["referenced_objects"]))
        v = d["validation"]
        return cls(view, Lineage.from_dict(d["lineage"]), d["session_id"],
                   ValidationRecord(v["passed"], v["probe_rows"], sequence=v.get("sequence", 0)))


# --------------------------------------------------------------------------- parsing


def _first_select(query: exp.Expression) -> exp.Select | None:
    while isinstance(query, exp.SetOperation):
        query = query.left
    if isinstance(query, exp.Subquery):
        return _first_select(query.this)
    return query if isinstance(query, exp.Select) else None


def _projection_name(p: exp.Expression) -> str:
    if isinstance(p, exp.Alias):
        return p.alias
    if isinstance(p, exp.Star):
        return "*"
    if isinstance(p, exp.Column):
        if isinstance(p.this, exp.Star):
            return f"{p.table}.*"
        return p.name
    return p.sql(dialect="sqlite")


def _parse_single(sql: str) -> exp.Expression:
    parts = split_statements(sql)
    if len(parts) != 1:
        raise ViewParseError(f"expected exactly one statement, found {len(parts)}")
    try:
        return sqlglot.parse_one(parts[0], read="sqlite")
    except ParseError as e:
        err = e.errors[0] if e.errors else {}
        raise ViewParseError(f"cannot parse view: {err.get('description', e)}", err.get("line"), err.get("col")) from e
    except TokenError as e:
        raise ViewParseError(f"cannot tokenize view: {e}") from e


def statement_kind(sql: str) -> str:
    """Classify a SQL statement as ``view``, ``query`` or ``other``."""
    try:
        tree = _parse_single(sql)
    except ViewParseError:
        return "other"
    if isinstance(tree, exp.Create) and (tree.args.get("kind") or "").upper() == "VIEW":
        return "view"
    if isinstance(tree, exp.Query):
        return "query"
    return "other"


def parse_view(sql: str) -> ViewDefinition:
    """Extract name, output columns and referenced objects from one CREATE VIEW statement."""
    tree = _parse_single(sql)
    if not (isinstance(tree, exp.Create) and (tree.args.get("kind") or "").upper() == "VIEW"):
        raise ViewParseError("not a CREATE VIEW statement")
    target = tree.this
    explicit: list[str] = []
    if isinstance(target, exp.Schema):
        explicit = [e.name for e in target.expressions]
        target = target.this
    name = target.name
    if not name:
        raise ViewParseError("view has no name")
    query = tree.expression
    if not isinstance(query, exp.Query):
        raise ViewParseError("view body is not a query")
    if any(isinstance(w, exp.With) and w.args.get("recursive") for w in query.find_all(exp.With)):
        raise ViewParseError("recursive CTEs are not supported")
    first = _first_select(query)
    if explicit:
        outputs = explicit
    elif first is not None:
        outputs = [_projection_name(p) for p in first.expressions]
    else:
        outputs = []
    if not outputs:
        raise ViewParseError("view has no output columns")
    ctes = {fold(c.alias) for c in query.find_all(exp.CTE)}
    refs = {t.name for t in query.find_all(exp.Table) if t.name and fold(t.name) not in ctes}
    return ViewDefinition(name, split_statements(sql)[0], tuple(outputs), frozenset(refs))


def rename_view(sql: str, new_name: str) -> str:
    """Rewrite a CREATE VIEW statement under a different view name."""
    tree = _parse_single(sql)
    target = tree.this.this if isinstance(tree.this, exp.Schema) else tree.this
    target.set("this", exp.to_identifier(new_name))
    target.set("db", None)
    return tree.sql(dialect="sqlite")


# --------------------------------------------------------------------------- lineage


class _Resolver:
    def __init__(self, root: Scope, snapshot: SchemaSnapshot, views: Mapping[str, "CatalogEntry"]):
        self.root = root
        self.snapshot = snapshot
        self.views = views
        self.scope_of = {id(s.expression): s for s in root.traverse()}
        self.used_views: set[str] = set()
        self._memo: dict[tuple[int, int], frozenset[ColumnRef]] = {}

    def table_column(self, table: str, column: str) -> frozenset[ColumnRef]:
        if self.snapshot.has_table(table):
            try:
                return frozenset({self.snapshot.canonical_ref(table, column)})
            except ValueError as e:
                raise LineageError(str(e)) from None
        entry = self.views.get(fold(table))
        if entry is None:
            raise UnknownReferenceError(f"unknown table or view {table!r}")
        self.used_views.add(fold(table))
        try:
            return entry.lineage.origins(column)
        except KeyError:
            raise LineageError(f"view {entry.name} has no column {column!r}") from None

    def source_column(self, scope: Scope, alias: str, column: str) -> frozenset[ColumnRef]:
        s = scope
        while s is not None:
            if alias in s.sources:
                src = s.sources[alias]
                if isinstance(src, Scope):
                    return self.scope_output(src, column)
                if isinstance(src, exp.Table):
                    return self.table_column(src.name, column)
                return frozenset()  # table-valued function
            s = s.parent
        raise LineageError(f"cannot resolve {alias}.{column}")

    def _projections(self, scope: Scope) -> list[exp.Expression]:
        return list(scope.expression.selects)

    def scope_output_at(self, scope: Scope, index: int) -> frozenset[ColumnRef]:
        key = (id(scope), index)
        if key not in self._memo:
            if isinstance(scope.expression, exp.SetOperation):
                out: set[ColumnRef] = set()
                for branch in scope.set_operation_scopes:
                    out |= self.scope_output_at(branch, index)
                result = frozenset(out)
            else:
                result = self.expr_origins(scope, self._projections(scope)[index])
            self._memo[key] = result
        return self._memo[key]

    def scope_output(self, scope: Scope, column: str) -> frozenset[ColumnRef]:
        names = [p.alias_or_name for p in scope.expression.selects]
        for i, n in enumerate(names):
            if fold(n) == fold(column):
                return self.scope_output_at(scope, i)
        raise LineageError(f"derived table has no column {column!r}")

    def all_outputs(self, scope: Scope) -> frozenset[ColumnRef]:
        out: set[ColumnRef] = set()
        for i in range(len(scope.expression.selects)):
            out |= self.scope_output_at(scope, i)
        return frozenset(out)

    def expr_origins(self, scope: Scope, node: exp.Expression | None) -> frozenset[ColumnRef]:
        if node is None:
            return frozenset()
        out: set[ColumnRef] = set()
        stack = [node]
        while stack:
            n = stack.pop()
            if n is not scope.expression and id(n) in self.scope_of:
                out |= self.all_outputs(self.scope_of[id(n)])
                continue
            if isinstance(n, exp.Column) and not isinstance(n.this, exp.Star):
                if n.table:
                    out |= self.source_column(scope, n.table, n.name)
                else:
                    out |= self._select_alias(scope, n.name)
                continue
            stack.extend(n.iter_expressions())
        return frozenset(out)

    def _select_alias(self, scope: Scope, name: str) -> frozenset[ColumnRef]:
        # unqualified names left after qualification refer to projection aliases (GROUP BY x)
        if isinstance(scope.expression, exp.Select):
            for i, p in enumerate(scope.expression.selects):
                if fold(p.alias_or_name) == fold(name) and isinstance(p, exp.Alias):
                    return self.expr_origins(scope, p.this)
        return frozenset()

    def predicates(self) -> frozenset[ColumnRef]:
        out: set[ColumnRef] = set()
        for s in self.root.traverse():
            sel = s.expression
            if not isinstance(sel, exp.Select):
                continue
            clauses = [sel.args.get("where"), sel.args.get("group"), sel.args.get("having")]
            for j in sel.args.get("joins") or []:
                clauses.append(j.args.get("on"))
            for clause in clauses:
                out |= self.expr_origins(s, clause)
            for source in s.sources.values():
                if isinstance(source, exp.Table) and fold(source.name) in self.views:
                    self.used_views.add(fold(source.name))
        for v in sorted(self.used_views):
            out |= self.views[v].lineage.predicate_columns
        return frozenset(out)


def _schema_mapping(snapshot: SchemaSnapshot, views: Mapping[str, "CatalogEntry"]) -> dict:
    mapping: dict[str, dict[str, str]] = {}
    for t in snapshot.tables:
        mapping[fold(t.name)] = {fold(c.name): "TEXT" for c in t.columns}
    for key, entry in views.items():
        cols: dict[str, str] = {}
        for n in entry.lineage.names:
            cols.setdefault(fold(n), "TEXT")
        mapping[key] = cols
    return mapping


def _case_lookup(tree: exp.Expression, snapshot: SchemaSnapshot, views: Mapping[str, "CatalogEntry"]) -> dict:
    spelled: dict[str, str] = {}
    for t in snapshot.tables:
        for c in t.columns:
            spelled.setdefault(fold(c.name), c.name)
    for entry in views.values():
        for n in entry.lineage.names:
            spelled.setdefault(fold(n), n)
    for ident in tree.find_all(exp.Identifier):
        spelled[fold(ident.name)] = ident.name
    return spelled


def resolve_lineage(view: ViewDefinition, snapshot: SchemaSnapshot,
                    catalog: "Catalog | Mapping[str, CatalogEntry] | None" = None) -> Lineage:
    """Compute per-column origins and predicate columns of ``view``."""
    views = catalog.entries if isinstance(catalog, Catalog) else {fold(k): v for k, v in (catalog or {}).items()}
    for ref in view.referenced_objects:
        if fold(ref) == fold(view.name):
            raise CyclicReferenceError(f"view {view.name} references itself")
        if not snapshot.has_table(ref) and fold(ref) not in views:
            raise UnknownReferenceError(f"view {view.name} references unknown object {ref!r}")

    tree = _parse_single(view.sql)
    target = tree.this
    explicit = [e.name for e in target.expressions] if isinstance(target, exp.Schema) else []
    original = tree.expression
    spelled = _case_lookup(original, snapshot, views)
    try:
        query = qualify(original.copy(), schema=_schema_mapping(snapshot, views), dialect="sqlite",
                        validate_qualify_columns=True, quote_identifiers=False)
    except (OptimizeError, SqlglotError) as e:
        raise LineageError(f"cannot qualify view {view.name}: {e}") from e
    root = build_scope(query)
    if root is None:
        raise LineageError(f"cannot analyse view {view.name}")
    resolver = _Resolver(root, snapshot, views)

    first_q, first_o = _first_select(query), _first_select(original)
    star_free = first_o is not None and not any(
        isinstance(p, exp.Star) or (isinstance(p, exp.Column) and isinstance(p.this, exp.Star))
        for p in first_o.expressions)
    names = []
    for i, p in enumerate(first_q.expressions):
        if explicit and i < len(explicit):
            names.append(explicit[i])
        elif star_free:
            names.append(_projection_name(first_o.expressions[i]))
        else:
            names.append(spelled.get(fold(p.alias_or_name), p.alias_or_name))
    columns = tuple((n, resolver.scope_output_at(root, i)) for i, n in enumerate(names))
    return Lineage(columns, resolver.predicates())


# --------------------------------------------------------------------------- validation


def _strip(sql: str) -> str:
    return sql.strip().rstrip(";").strip()


def validate_view(db: sqlite3.Connection, sql: str, keep: bool = True) -> ValidationRecord:
    """CREATE the view and probe it with ``SELECT * ... LIMIT 1``.

    Failures at either stage roll the view back.  With ``keep=False`` the view
    is dropped even on success.
    """
    sql = _strip(sql)
    try:
        name = parse_view(sql).name
    except ViewParseError as e:
        name = None
        parse_error = str(e)
    db.execute("SAVEPOINT validate_view")
    try:
        try:
            db.execute(sql)
        except sqlite3.Error as e:
            db.execute("ROLLBACK TO validate_view")
            return ValidationRecord(False, error=str(e), stage="create")
        if name is None:
            db.execute("ROLLBACK TO validate_view")
            return ValidationRecord(False, error=parse_error, stage="create")
        try:
            rows = db.execute(f"SELECT * FROM {quote_ident(name)} LIMIT 1").fetchall()
        except sqlite3.Error as e:
            db.execute("ROLLBACK TO validate_view")
            return ValidationRecord(False, error=str(e), stage="probe")
        if not keep:
            db.execute("ROLLBACK TO validate_view")
        return ValidationRecord(True, probe_rows=len(rows))
    finally:
        db.execute("RELEASE validate_view")


def materialize_view_tool(view_definitions: Sequence[str], db: sqlite3.Connection) -> list[str]:
    """Verifier tool: create each view in order; one result text per definition."""
    results = []
    for sql in view_definitions:
        record = validate_view(db, sql)
        results.append(SUCCESS_TEXT if record.passed else record.error)
    return results


def engine_columns(db: sqlite3.Connection, name: str) -> list[str]:
    return [r[1] for r in db.execute(f"PRAGMA table_info({quote_ident(name)})")]


# --------------------------------------------------------------------------- catalog


@dataclass
class Catalog:
    snapshot: SchemaSnapshot
    entries: dict[str, CatalogEntry] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return fold(name) in self.entries

    def __iter__(self) -> Iterator[CatalogEntry]:
        return iter(sorted(self.entries.values(), key=lambda e: fold(e.name)))

    def __getitem__(self, name: str) -> CatalogEntry:
        return self.entries[fold(name)]

    def __eq__(self, other):
        if not isinstance(other, Catalog):
            return NotImplemented
        return self.snapshot == other.snapshot and self.entries == other.entries

    @property
    def names(self) -> list[str]:
        return [e.name for e in self]

    def register(self, entry: CatalogEntry) -> "Catalog":
        key = fold(entry.name)
        if key in self.entries:
            raise CatalogError(f"view {entry.name!r} already registered")
        if self.snapshot.has_table(entry.name):
            raise CatalogError(f"view name {entry.name!r} collides with a base table")
        for ref in entry.view.referenced_objects:
            if fold(ref) == key:
                raise CyclicReferenceError(f"view {entry.name} references itself")
            if not self.snapshot.has_table(ref) and fold(ref) not in self.entries:
                raise UnknownReferenceError(f"view {entry.name} references unknown object {ref!r}")
        if not entry.validation.passed:
            raise CatalogError(f"view {entry.name!r} has not passed validation")
        self.entries[key] = entry
        return self

    def fresh_name(self, name: str, taken: Iterable[str] = ()) -> str:
        """``name`` or the first free ``name_2``, ``name_3``, ..."""
        used = set(self.entries) | {fold(t) for t in taken} | {fold(t) for t in self.snapshot.table_names}
        if fold(name) not in used:
            return name
        k = 2
        while fold(f"{name}_{k}") in used:
            k += 1
        return f"{name}_{k}"

    def topological_order(self) -> list[CatalogEntry]:
        """Entries ordered so each view comes after the views it references."""
        done: set[str] = set()
        out: list[CatalogEntry] = []

        def visit(e: CatalogEntry, stack: frozenset):
            key = fold(e.name)
            if key in done:
                return
            if key in stack:
                raise CyclicReferenceError(f"cycle through {e.name}")
            for ref in sorted(e.view.referenced_objects, key=fold):
                if fold(ref) in self.entries:
                    visit(self.entries[fold(ref)], stack | {key})
            done.add(key)
            out.append(e)

        for e in self:
            visit(e, frozenset())
        return out

    def to_dict(self) -> dict:
        return {
            "version": CATALOG_VERSION,
            "snapshot_digest": digest_text(self.snapshot.to_json()),
            "snapshot": self.snapshot.to_dict(),
            "entries": [e.to_dict() for e in self],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def save(catalog: Catalog, path: str | Path) -> Path:
    return atomic_write(path, catalog.to_json())


def load(path: str | Path) -> Catalog:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return catalog_from_dict(doc)


def catalog_from_dict(doc: Mapping) -> Catalog:
    if doc.get("version") != CATALOG_VERSION:
        raise CatalogError(f"unsupported catalog version {doc.get('version')!r}")
    snapshot = SchemaSnapshot.from_dict(doc["snapshot"])
    cat = Catalog(snapshot)
    for d in doc["entries"]:
        e = CatalogEntry.from_dict(d)
        cat.entries[fold(e.name)] = e
    cat.topological_order()  # rejects cyclic files
    return cat


def build_entry(db: sqlite3.Connection, sql: str, catalog: Catalog, session_id: str,
                record: ValidationRecord) -> CatalogEntry:
    """Analyse an already validated view that exists in ``db``."""
    view = parse_view(_strip(sql))
    lineage = resolve_lineage(view, catalog.snapshot, catalog)
    names = engine_columns(db, view.name)
    if len(names) == len(lineage.columns):
        lineage = replace(lineage, columns=tuple((n, refs) for n, (_, refs) in zip(names, lineage.columns)))
    view = replace(view, output_columns=tuple(lineage.names))
    return CatalogEntry(view, lineage, session_id, record)


def add_view(db: sqlite3.Connection, catalog: Catalog, sql: str, session_id: str = "manual") -> CatalogEntry:
    """Validate, analyse and register one view; raises on any failure (the view is dropped)."""
    record = validate_view(db, sql)
    if not record.passed:
        raise CatalogError(f"validation failed ({record.stage}): {record.error}")
    name = parse_view(_strip(sql)).name
    try:
        entry = build_entry(db, sql, catalog, session_id, replace(record, sequence=len(catalog) + 1))
        catalog.register(entry)
    except CatalogError:
        db.execute(f"DROP VIEW IF EXISTS {quote_ident(name)}")
        raise
    return entry


def revalidate(catalog: Catalog, db: sqlite3.Connection) -> dict[str, ValidationRecord]:
    """Re-create every catalog view (dependency order) in ``db``; returns per-view records."""
    return {e.name: validate_view(db, e.view.sql) for e in catalog.topological_order()}
