"""Synthetic schemas, catalogs and sentinel-valued fixtures.

Every generator records what it built (a manifest or ground-truth lineage),
so tests can compare the pipeline's answers against bookkeeping that never
went through the code under test.
"""
from __future__ import annotations

import math
import random
import re
import sqlite3
from dataclasses import dataclass, field

import numpy as np

from .schema_model import ColumnDef, ColumnRef, ForeignKeyDef, SchemaSnapshot, TableDef, materialize
from .view_catalog import Catalog, CatalogEntry, Lineage, ValidationRecord, ViewDefinition

# --------------------------------------------------------------------------- width marginals


def widths_for_marginals(n_tables: int, total_columns: int, relations: int, median: int,
                         max_width: int | None = None) -> list[int]:
    """Table widths with a given count, column sum, pair count and lower median.

    Pair count is ``sum(w * (w - 1) / 2)``, so the target fixes ``sum(w**2)``.
    Starts from an even split and moves single columns between tables, each
    move chosen to close the remaining gap in ``sum(w**2)`` without overshooting.
    Raises ValueError if the marginals cannot be met.
    """
    target_sq = 2 * relations + total_columns
    k = (n_tables - 1) // 2
    cap = max_width or total_columns
    lo = np.array([1] * k + [median] * (n_tables - k))
    hi = np.array([median] * (k + 1) + [cap] * (n_tables - k - 1))
    hi[k] = median
    fixed = np.zeros(n_tables, dtype=bool)
    fixed[k] = True
    w = lo.copy()
    if max_width is not None and n_tables - k - 1 > 0:
        w[-1] = max_width
        fixed[-1] = True
    spare = total_columns - int(w.sum())
    if spare < 0:
        raise ValueError("marginals infeasible: column total too small")
    free = [i for i in range(n_tables) if not fixed[i]]
    while spare > 0:
        room = [i for i in free if w[i] < hi[i]]
        if not room:
            raise ValueError("marginals infeasible: column total too large")
        i = min(room, key=lambda j: (w[j], j))
        w[i] += 1
        spare -= 1
    movable = np.array([not f for f in fixed])
    for _ in range(200_000):
        gap = target_sq - int((w ** 2).sum())
        if gap == 0:
            return sorted(int(x) for x in w)
        # moving one column from i to j changes sum(w^2) by 2 * (w[j] - w[i] + 1)
        can_give = movable & (w > lo)
        can_take = movable & (w < hi)
        delta = 2 * (w[None, :] - w[:, None] + 1)
        ok = can_give[:, None] & can_take[None, :]
        np.fill_diagonal(ok, False)
        if gap > 0:
            ok &= (delta > 0) & (delta <= gap)
            if not ok.any():
                break
            best = np.where(ok, delta, -1)
            i, j = np.unravel_index(int(np.argmax(best)), best.shape)
        else:
            ok &= (delta < 0) & (delta >= gap)
            if not ok.any():
                break
            best = np.where(ok, delta, 1)
            i, j = np.unravel_index(int(np.argmin(best)), best.shape)
        w[i] -= 1
        w[j] += 1
    raise ValueError("could not match the requested sum of squared widths")


def snapshot_from_widths(widths: list[int], prefix: str = "T") -> SchemaSnapshot:
    """One table per width; the first column of each is an integer primary key."""
    digits = len(str(len(widths)))
    tables = []
    for i, wd in enumerate(widths, 1):
        name = f"{prefix}{i:0{digits}d}"
        cols = [ColumnDef("id", "INTEGER", is_primary_key=True)]
        cols += [ColumnDef(f"c{j:04d}", "TEXT") for j in range(1, wd)]
        tables.append(TableDef(name, tuple(cols)))
    return SchemaSnapshot(tuple(tables))


BRAZE_MARGINALS = dict(n_tables=61, total_columns=1770, relations=27601, median=28)
CMS_MARGINALS = dict(n_tables=113, total_columns=6879, relations=1121976, median=24, max_width=1130)


def braze_marginal_snapshot() -> SchemaSnapshot:
    return snapshot_from_widths(widths_for_marginals(**BRAZE_MARGINALS), prefix="BRAZE_T")


def cms_marginal_snapshot() -> SchemaSnapshot:
    return snapshot_from_widths(widths_for_marginals(**CMS_MARGINALS), prefix="CMS_T")


# --------------------------------------------------------------------------- star schemas and random graphs


@dataclass
class StarManifest:
    fact: str
    dimensions: list[str]
    table_count: int
    column_count: int
    foreign_key_count: int


def star_schema(n_tables: int = 10, dim_width: int = 4, seed: int = 0) -> tuple[str, StarManifest]:
    """DDL for one fact table referencing ``n_tables - 1`` dimension tables."""
    rng = random.Random(seed)
    dims = [f"dim_{i}" for i in range(1, n_tables)]
    stmts = []
    columns = 0
    for d in dims:
        width = dim_width + rng.randrange(3)
        cols = [f"{d}_id INTEGER PRIMARY KEY"] + [f"attr_{j} TEXT" for j in range(1, width)]
        stmts.append(f"CREATE TABLE {d} (\n    " + ",\n    ".join(cols) + "\n);")
        columns += width
    fact_cols = ["fact_id INTEGER PRIMARY KEY"]
    fact_cols += [f"{d}_id INTEGER REFERENCES {d}({d}_id)" for d in dims]
    fact_cols += ["amount REAL", "quantity INTEGER"]
    stmts.append("CREATE TABLE fact_sales (\n    " + ",\n    ".join(fact_cols) + "\n);")
    columns += len(fact_cols)
    return "\n".join(stmts) + "\n", StarManifest("fact_sales", dims, n_tables, columns, len(dims))


def random_graph_snapshot(rng: random.Random, n_tables: int, n_edges: int) -> SchemaSnapshot:
    """Tables ``t0..`` with an ``id`` key plus one referencing column per generated edge."""
    extra: dict[int, list[tuple[str, int]]] = {i: [] for i in range(n_tables)}
    for e in range(n_edges):
        a, b = rng.randrange(n_tables), rng.randrange(n_tables)
        extra[a].append((f"ref_{e}", b))
    tables, fks = [], []
    for i in range(n_tables):
        cols = [ColumnDef("id", "INTEGER", is_primary_key=True)]
        for col, target in extra[i]:
            cols.append(ColumnDef(col, "INTEGER"))
            fks.append(ForeignKeyDef(ColumnRef(f"t{i}", col), ColumnRef(f"t{target}", "id")))
        tables.append(TableDef(f"t{i}", tuple(cols)))
    return SchemaSnapshot(tuple(tables), tuple(fks))


# --------------------------------------------------------------------------- sentinel-valued view fixtures

KEY_BASE = 1_000_000
_TOKEN = re.compile(r"<t(\d+)\.(c\d+)#\d+>", re.IGNORECASE)
_KEY = re.compile(r"(?<!\d)(\d{7,9})(?!\d)")


@dataclass
class GeneratedView:
    sql: str
    name: str
    outputs: list[tuple[str, frozenset]]  # by position
    predicates: frozenset
    references: list[str] = field(default_factory=list)

    @property
    def output_origins(self) -> frozenset:
        out = frozenset()
        for _, o in self.outputs:
            out |= o
        return out


@dataclass
class SentinelFixture:
    """Tables ``t1..tn`` with integer key ``jk`` and text columns ``c1..``.

    Row ``k`` of table ``ti`` stores ``i * 1_000_000 + k`` in ``jk`` and
    ``<ti.cj#k>`` in ``cj``, so any value a view emits names its origin.
    Keys of different tables differ by a per-table offset; joins subtract it.
    """
    snapshot: SchemaSnapshot
    n_rows: int
    views: list[GeneratedView]

    def database(self) -> sqlite3.Connection:
        db = sqlite3.connect(":memory:", isolation_level=None)
        materialize(self.snapshot, db)
        for t in self.snapshot.tables:
            i = int(t.name[1:])
            for k in range(self.n_rows):
                row = [i * KEY_BASE + k] + [f"<t{i}.{c.name}#{k}>" for c in t.columns[1:]]
                db.execute(f"INSERT INTO {t.name} VALUES ({', '.join('?' * len(row))})", row)
        return db


def decode_origins(value) -> set[ColumnRef]:
    """Base columns whose sentinel values appear inside ``value``."""
    out = set()
    if value is None:
        return out
    if isinstance(value, int):
        if value >= KEY_BASE:
            out.add(ColumnRef(f"t{value // KEY_BASE}", "jk"))
        return out
    text = str(value)
    for m in _TOKEN.finditer(text):
        out.add(ColumnRef(f"t{int(m.group(1))}", m.group(2).lower()))
    for m in _KEY.finditer(_TOKEN.sub("", text)):
        v = int(m.group(1))
        out.add(ColumnRef(f"t{v // KEY_BASE}", "jk"))
    return out


class _ViewFactory:
    def __init__(self, rng: random.Random, snapshot: SchemaSnapshot):
        self.rng = rng
        self.snapshot = snapshot
        self.views: list[GeneratedView] = []
        self.alias_n = 0

    def fresh(self) -> str:
        self.alias_n += 1
        return f"o{self.alias_n}"

    # a source is (sql name, alias, {column: origins}, predicates inherited, key column or None, offset)
    def table_source(self, alias: str):
        t = self.rng.choice(self.snapshot.tables)
        cols = {c.name: frozenset({ColumnRef(t.name, c.name)}) for c in t.columns}
        return t.name, alias, cols, frozenset(), "jk", int(t.name[1:]) * KEY_BASE

    def view_source(self, alias: str):
        v = self.rng.choice(self.views)
        cols = dict(v.outputs)
        key = next((n for n, o in v.outputs if len(o) == 1 and next(iter(o)).column == "jk"), None)
        offset = int(next(iter(dict(v.outputs)[key])).table[1:]) * KEY_BASE if key else 0
        return v.name, alias, cols, v.predicates, key, offset

    def source(self, alias: str, allow_view: bool = True):
        if allow_view and self.views and self.rng.random() < 0.35:
            return self.view_source(alias)
        return self.table_source(alias)

    def text_cols(self, src) -> list[str]:
        return [c for c, o in src[2].items() if c != src[4] and o and all(r.column != "jk" for r in o)]

    def make(self, name: str) -> GeneratedView:
        kind = self.rng.choice(["project", "join", "aggregate", "expression", "star", "union", "subquery", "cte"])
        return getattr(self, f"_{kind}")(name)

    def _projection(self, srcs, n: int):
        outs, items = [], []
        pool = [(s, c) for s in srcs for c in s[2]]
        for s, c in self.rng.sample(pool, min(n, len(pool))):
            alias = self.fresh() if self.rng.random() < 0.5 else None
            if alias is None and any(c == x for x, _ in outs):
                alias = self.fresh()
            items.append(f"{s[1]}.{c}" + (f" AS {alias}" if alias else ""))
            outs.append((alias or c, s[2][c]))
        return items, outs

    def _project(self, name):
        s = self.source("a")
        items, outs = self._projection([s], self.rng.randint(1, 3))
        where, preds = "", frozenset(s[3])
        if s[4] and self.rng.random() < 0.5:
            where = f" WHERE a.{s[4]} - {s[5]} >= 1"
            preds |= s[2][s[4]]
        return self._finish(name, f"SELECT {', '.join(items)} FROM {s[0]} AS a{where}", outs, preds, [s[0]])

    def _join_pair(self):
        a = self.source("a")
        b = self.source("b", allow_view=False)
        if a[4] is None:
            a = self.table_source("a")
        on = f"a.{a[4]} - {a[5]} = b.{b[4]} - {b[5]}"
        return a, b, on, a[3] | b[3] | a[2][a[4]] | b[2][b[4]]

    def _join(self, name):
        a, b, on, preds = self._join_pair()
        items, outs = self._projection([a, b], self.rng.randint(2, 4))
        sql = f"SELECT {', '.join(items)} FROM {a[0]} AS a JOIN {b[0]} AS b ON {on}"
        return self._finish(name, sql, outs, preds, [a[0], b[0]])

    def _aggregate(self, name):
        s = self.source("a")
        texts = self.text_cols(s)
        if len(texts) < 2:
            return self._project(name)
        g, m = self.rng.sample(texts, 2)
        fn = self.rng.choice(["MAX", "MIN"])
        ga, ma, na = self.fresh(), self.fresh(), self.fresh()
        sql = (f"SELECT a.{g} AS {ga}, {fn}(a.{m}) AS {ma}, COUNT(*) AS {na} FROM {s[0]} AS a GROUP BY a.{g}")
        outs = [(ga, s[2][g]), (ma, s[2][m]), (na, frozenset())]
        return self._finish(name, sql, outs, s[3] | s[2][g], [s[0]])

    def _expression(self, name):
        a, b, on, preds = self._join_pair()
        ta, tb = self.text_cols(a), self.text_cols(b)
        if not ta or not tb:
            return self._join(name)
        x, y = self.rng.choice(ta), self.rng.choice(tb)
        combo, up = self.fresh(), self.fresh()
        z = self.rng.choice(ta)
        sql = (f"SELECT a.{x} || '|' || b.{y} AS {combo}, UPPER(a.{z}) AS {up} "
               f"FROM {a[0]} AS a JOIN {b[0]} AS b ON {on}")
        outs = [(combo, a[2][x] | b[2][y]), (up, a[2][z])]
        return self._finish(name, sql, outs, preds, [a[0], b[0]])

    def _star(self, name):
        s = self.source("a")
        outs = list(s[2].items())
        extra = ""
        texts = self.text_cols(s)
        if texts and self.rng.random() < 0.5:
            c, al = self.rng.choice(texts), self.fresh()
            extra = f", LOWER(a.{c}) AS {al}"
            outs.append((al, s[2][c]))
        star = "*" if not extra and self.rng.random() < 0.5 else "a.*"
        return self._finish(name, f"SELECT {star}{extra} FROM {s[0]} AS a", outs, s[3], [s[0]])

    def _union(self, name):
        a, b = self.source("a"), self.source("b")
        ta, tb = self.text_cols(a) or list(a[2]), self.text_cols(b) or list(b[2])
        x, y, al = self.rng.choice(ta), self.rng.choice(tb), self.fresh()
        sql = f"SELECT a.{x} AS {al} FROM {a[0]} AS a UNION ALL SELECT b.{y} FROM {b[0]} AS b"
        return self._finish(name, sql, [(al, a[2][x] | b[2][y])], a[3] | b[3], [a[0], b[0]])

    def _subquery(self, name):
        a = self.table_source("a")
        b = self.source("b")
        if b[4] is None:
            b = self.table_source("b")
        items, outs = self._projection([a], self.rng.randint(1, 3))
        sql = (f"SELECT {', '.join(items)} FROM {a[0]} AS a "
               f"WHERE a.jk - {a[5]} IN (SELECT s.{b[4]} - {b[5]} FROM {b[0]} AS s)")
        preds = a[2]["jk"] | b[2][b[4]] | b[3]
        return self._finish(name, sql, outs, preds, [a[0], b[0]])

    def _cte(self, name):
        s = self.source("a")
        texts = self.text_cols(s) or list(s[2])
        picks = self.rng.sample(texts, min(2, len(texts)))
        inner = ", ".join(f"a.{c} AS i{k}" for k, c in enumerate(picks))
        al = self.fresh()
        sql = f"WITH w AS (SELECT {inner} FROM {s[0]} AS a) SELECT w.i0 AS {al}"
        outs = [(al, s[2][picks[0]])]
        if len(picks) > 1:
            sql += ", w.i1"
            outs.append(("i1", s[2][picks[1]]))
        return self._finish(name, sql + " FROM w", outs, s[3], [s[0]])

    def _finish(self, name, select, outs, preds, refs):
        view = GeneratedView(f"CREATE VIEW {name} AS {select}", name, outs, frozenset(preds),
                             sorted(set(refs)))
        self.views.append(view)
        return view


def sentinel_fixture(seed: int, max_tables: int = 10, max_views: int = 30, n_rows: int = 4,
                     min_views: int = 1) -> SentinelFixture:
    """Random tables and views whose lineage is known by construction.

    View kinds: projections with aliases, joins, grouped aggregates, string
    expressions, stars, unions, IN-subqueries and CTEs; about a third read
    from an earlier view, whose lineage is inlined into the ground truth.
    """
    rng = random.Random(seed)
    n_tables = rng.randint(2, max_tables)
    tables = []
    for i in range(1, n_tables + 1):
        cols = [ColumnDef("jk", "INTEGER", is_primary_key=True)]
        cols += [ColumnDef(f"c{j}", "TEXT") for j in range(1, rng.randint(2, 5) + 1)]
        tables.append(TableDef(f"t{i}", tuple(cols)))
    snapshot = SchemaSnapshot(tuple(tables))
    factory = _ViewFactory(rng, snapshot)
    for n in range(1, rng.randint(min_views, max_views) + 1):
        factory.make(f"v{n}")
    return SentinelFixture(snapshot, n_rows, factory.views)


# --------------------------------------------------------------------------- large catalogs without SQL resolution


def synthetic_catalog(snapshot: SchemaSnapshot, n_views: int, seed: int = 0, max_width: int = 6) -> Catalog:
    """Projection views over single tables, registered with lineage taken from construction."""
    rng = random.Random(seed)
    catalog = Catalog(snapshot)
    for n in range(1, n_views + 1):
        t = rng.choice(snapshot.tables)
        cols = rng.sample(list(t.columns), min(len(t.columns), rng.randint(1, max_width)))
        name = f"view_{n:05d}"
        select = ", ".join(c.name for c in cols)
        sql = f"CREATE VIEW {name} AS SELECT {select} FROM {t.name}"
        lineage = Lineage(tuple((c.name, frozenset({ColumnRef(t.name, c.name)})) for c in cols), frozenset())
        view = ViewDefinition(name, sql, tuple(c.name for c in cols), frozenset({t.name}))
        catalog.register(CatalogEntry(view, lineage, "synthetic", ValidationRecord(True, 0, "", "", n)))
    return catalog


def identity_views(snapshot: SchemaSnapshot) -> list[str]:
    """One ``SELECT *`` view per table: a layer that covers every column."""
    return [f'CREATE VIEW "v_{t.name}" AS SELECT * FROM "{t.name}"' for t in snapshot.tables]


def projection_views(snapshot: SchemaSnapshot, n_views: int, seed: int = 0, max_width: int = 6) -> list[str]:
    """Random narrow projections over single tables."""
    rng = random.Random(seed)
    out = []
    for n in range(1, n_views + 1):
        t = rng.choice(snapshot.tables)
        k = min(t.width, max(1, int(rng.expovariate(1 / 3)) + 1, 1), max_width)
        cols = rng.sample(t.column_names, k)
        out.append(f'CREATE VIEW "view_{n:04d}" AS SELECT {", ".join(cols)} FROM "{t.name}"')
    return out


def planted_clusters(n_groups: int, per_group: int, dim: int = 32, spread: float = 0.05,
                     seed: int = 0) -> tuple[dict[str, np.ndarray], list[set[str]]]:
    """Unit-norm vectors scattered tightly around ``n_groups`` orthogonal directions."""
    if n_groups > dim:
        raise ValueError("need dim >= n_groups for orthogonal centres")
    rng = np.random.default_rng(seed)
    vecs, groups = {}, []
    for g in range(n_groups):
        centre = np.zeros(dim)
        centre[g] = 1.0
        members = set()
        for m in range(per_group):
            v = centre + rng.normal(scale=spread, size=dim)
            name = f"g{g}_view{m}"
            vecs[name] = v / np.linalg.norm(v)
            members.add(name)
        groups.append(members)
    return vecs, groups


def relation_total(widths) -> int:
    return sum(math.comb(w, 2) for w in widths)
