import time

import pytest
from hypothesis import given, settings, strategies as st

from oracles import inline_views, traced_origins
from semlayer import fixtures
from semlayer.schema_model import ColumnRef, ingest_ddl, materialize
from semlayer.synth import braze_marginal_snapshot, projection_views, sentinel_fixture, synthetic_catalog
from semlayer.view_catalog import (
    SUCCESS_TEXT,
    Catalog,
    CatalogError,
    CyclicReferenceError,
    LineageError,
    UnknownReferenceError,
    ViewParseError,
    add_view,
    catalog_from_dict,
    load,
    materialize_view_tool,
    parse_view,
    rename_view,
    resolve_lineage,
    revalidate,
    save,
    statement_kind,
    validate_view,
)

INTERN = "CREATE VIEW intern AS SELECT * FROM staff WHERE position='intern'"
REVENUE = ("CREATE VIEW staff_generates_revenue AS SELECT staff_id, SUM(total_price) AS revenue "
           "FROM orders GROUP BY staff_id")


def R(t, c):
    return ColumnRef(t, c)


# -- parsing


def test_parse_intern():
    v = parse_view(INTERN)
    assert v.name == "intern" and v.referenced_objects == {"staff"}


def test_parse_alias():
    assert parse_view("CREATE VIEW v AS SELECT a AS x FROM t").output_columns == ("x",)


def test_parse_email_engagement_metrics():
    v = parse_view("CREATE VIEW email_engagement_metrics AS SELECT USER_ID, OPEN_RATE AS email_open_rate, "
                   "CLICK_THROUGH_RATE AS email_click_through_rate FROM USERS_MESSAGES_EMAIL_SEND_VIEW")
    assert v.output_columns == ("USER_ID", "email_open_rate", "email_click_through_rate")
    assert v.referenced_objects == {"USERS_MESSAGES_EMAIL_SEND_VIEW"}


def test_parse_rejects_multiple_statements_and_non_views():
    with pytest.raises(ViewParseError):
        parse_view("CREATE VIEW a AS SELECT 1; CREATE VIEW b AS SELECT 2")
    with pytest.raises(ViewParseError):
        parse_view("SELECT 1")
    with pytest.raises(ViewParseError, match="recursive"):
        parse_view("CREATE VIEW r AS WITH RECURSIVE n(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM n) SELECT x FROM n")


def test_parse_error_has_position():
    with pytest.raises(ViewParseError) as info:
        parse_view("CREATE VIEW v AS SELECT a FROM t WHERE (")
    assert info.value.line is not None


def test_ctes_are_not_references():
    v = parse_view("CREATE VIEW v AS WITH w AS (SELECT a FROM t) SELECT a FROM w")
    assert v.referenced_objects == {"t"}


def test_statement_kind_and_rename():
    assert statement_kind(INTERN) == "view"
    assert statement_kind("SELECT 1") == "query"
    assert statement_kind("DROP TABLE staff") == "other"
    assert parse_view(rename_view(INTERN, "intern_2")).name == "intern_2"


# -- lineage


def test_revenue_lineage(staff_orders_snapshot):
    lin = resolve_lineage(parse_view(REVENUE), staff_orders_snapshot)
    assert lin.origins("revenue") == {R("orders", "total_price")}
    assert lin.origins("staff_id") == {R("orders", "staff_id")}
    assert lin.predicate_columns == {R("orders", "staff_id")}


def test_star_is_identity(staff_orders_snapshot):
    lin = resolve_lineage(parse_view(INTERN), staff_orders_snapshot)
    staff = staff_orders_snapshot.table("staff")
    assert lin.columns == tuple((c.name, frozenset({R("staff", c.name)})) for c in staff.columns)
    assert lin.predicate_columns == {R("staff", "position")}


def test_join_key_maps_to_named_side(staff_orders_snapshot):
    sql = ("CREATE VIEW j AS SELECT s.staff_id, o.total_price FROM staff s "
           "JOIN orders o ON o.staff_id = s.staff_id")
    lin = resolve_lineage(parse_view(sql), staff_orders_snapshot)
    assert lin.origins("staff_id") == {R("staff", "staff_id")}
    assert lin.predicate_columns == {R("staff", "staff_id"), R("orders", "staff_id")}


def test_literal_has_no_origin_but_counts(staff_orders_snapshot):
    lin = resolve_lineage(parse_view("CREATE VIEW k AS SELECT 1 AS one, name FROM staff"), staff_orders_snapshot)
    assert lin.origins("one") == frozenset() and len(lin.columns) == 2


def test_view_on_view_resolves_to_base(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW v1 AS SELECT name AS who, position FROM staff")
    e = add_view(staff_orders_db, cat, "CREATE VIEW v2 AS SELECT upper(who) AS loud FROM v1 WHERE position = 'intern'")
    assert e.lineage.origins("loud") == {R("staff", "name")}
    assert e.lineage.predicate_columns == {R("staff", "position")}


def test_unknown_and_cyclic_references(staff_orders_snapshot):
    with pytest.raises(UnknownReferenceError):
        resolve_lineage(parse_view("CREATE VIEW v AS SELECT a FROM nowhere"), staff_orders_snapshot)
    with pytest.raises(CyclicReferenceError):
        resolve_lineage(parse_view("CREATE VIEW v AS SELECT a FROM v"), staff_orders_snapshot)
    with pytest.raises(LineageError):
        resolve_lineage(parse_view("CREATE VIEW v AS SELECT no_such FROM staff"), staff_orders_snapshot)


# -- validation


def test_validate_intern(staff_orders_db):
    rec = validate_view(staff_orders_db, INTERN)
    assert rec.passed and rec.probe_rows == 1


def test_validate_empty_result_is_valid(staff_orders_db):
    rec = validate_view(staff_orders_db, "CREATE VIEW nobody AS SELECT * FROM staff WHERE 0")
    assert rec.passed and rec.probe_rows == 0


def test_validate_missing_table(staff_orders_db):
    rec = validate_view(staff_orders_db, "CREATE VIEW v AS SELECT * FROM ghosts")
    assert not rec.passed and rec.stage in ("create", "probe") and "ghosts" in rec.error
    assert not staff_orders_db.execute("SELECT name FROM sqlite_master WHERE name = 'v'").fetchall()


def test_validate_late_failure_at_probe(staff_orders_db):
    # SQLite accepts the definition; the malformed JSON only errors when rows are read
    rec = validate_view(staff_orders_db, "CREATE VIEW js AS SELECT json_extract(name, '$.x') AS x FROM staff")
    assert not rec.passed and rec.stage == "probe" and "JSON" in rec.error
    assert not staff_orders_db.execute("SELECT name FROM sqlite_master WHERE name = 'js'").fetchall()


def test_validate_keep_false(staff_orders_db):
    assert validate_view(staff_orders_db, INTERN, keep=False).passed
    assert not staff_orders_db.execute("SELECT name FROM sqlite_master WHERE type = 'view'").fetchall()


def test_materialize_tool_messages(staff_orders_db):
    out = materialize_view_tool([INTERN, "CREATE VIEW bad AS SELECT nope FROM staff"], staff_orders_db)
    assert out[0] == SUCCESS_TEXT and "nope" in out[1]


# -- catalog


def test_register_round_trip(tmp_path, staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, INTERN, "s1")
    add_view(staff_orders_db, cat, REVENUE, "s1")
    path = save(cat, tmp_path / "catalog.json")
    assert load(path) == cat
    assert '"version": "catalog.v1"' in path.read_text()


def test_register_rejects_duplicates_and_bad_refs(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, INTERN)
    with pytest.raises(CatalogError):
        add_view(staff_orders_db, cat, INTERN)
    with pytest.raises(CatalogError):
        add_view(staff_orders_db, cat, "CREATE VIEW staff AS SELECT 1")
    assert cat.names == ["intern"]


def test_fresh_name(staff_orders_snapshot):
    cat = synthetic_catalog(staff_orders_snapshot, 1)
    assert cat.fresh_name("view_00001") == "view_00001_2"
    assert cat.fresh_name("x", ["x", "X_2"]) == "x_3"
    assert cat.fresh_name("staff") == "staff_2"


def test_load_rejects_version_and_cycles(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW a AS SELECT name FROM staff")
    add_view(staff_orders_db, cat, "CREATE VIEW b AS SELECT name FROM a")
    doc = cat.to_dict()
    with pytest.raises(CatalogError, match="version"):
        catalog_from_dict({**doc, "version": "catalog.v0"})
    doc["entries"][0]["referenced_objects"] = ["b"]  # a -> b -> a
    with pytest.raises(CyclicReferenceError):
        catalog_from_dict(doc)


def test_topological_order_and_revalidate(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW zz AS SELECT name FROM staff")
    add_view(staff_orders_db, cat, "CREATE VIEW aa AS SELECT name FROM zz")
    assert [e.name for e in cat.topological_order()] == ["zz", "aa"]
    fresh = fixtures.staff_orders_database()
    assert all(r.passed for r in revalidate(cat, fresh).values())


def test_large_catalog_round_trip_is_fast(tmp_path):
    cat = synthetic_catalog(braze_marginal_snapshot(), 1146, seed=1)
    start = time.perf_counter()
    path = save(cat, tmp_path / "big.json")
    back = load(path)
    elapsed = time.perf_counter() - start
    assert back == cat and len(back) == 1146
    assert elapsed < 1.0, elapsed


# -- properties


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_lineage_is_identity(seed):
    snap = ingest_ddl("CREATE TABLE a (x INT, y TEXT, z REAL); CREATE TABLE b (p INT, q TEXT);")
    import sqlite3
    db = sqlite3.connect(":memory:", isolation_level=None)
    materialize(snap, db)
    cat = Catalog(snap)
    for sql in projection_views(snap, 4, seed=seed):
        e = add_view(db, cat, sql)
        (table,) = e.view.referenced_objects
        assert all(refs == {R(table, n)} for n, refs in e.lineage.columns)
        assert e.lineage.predicate_columns == frozenset()
    assert cat.topological_order()


def test_sentinel_lineage_oracle():
    """Values read back from each view name only columns in its computed lineage."""
    checked = 0
    for seed in range(8):
        fx = sentinel_fixture(seed, min_views=8)
        db = fx.database()
        cat = Catalog(fx.snapshot)
        for gv in fx.views:
            e = add_view(db, cat, gv.sql, "oracle")
            assert [refs for _, refs in e.lineage.columns] == [o for _, o in gv.outputs], gv.sql
            assert e.lineage.predicate_columns == gv.predicates, gv.sql
            traced, _ = traced_origins(db, gv.name, len(gv.outputs))
            for seen, refs in zip(traced, e.lineage.columns):
                assert seen <= refs[1], gv.sql
            checked += 1
        db.close()
    assert checked >= 50


def test_inlining_oracle():
    """Lineage of a view over views equals lineage of the same view with the inner views inlined."""
    checked = 0
    for seed in range(20):
        fx = sentinel_fixture(seed, min_views=6)
        db = fx.database()
        cat = Catalog(fx.snapshot)
        bodies = {}
        for gv in fx.views:
            e = add_view(db, cat, gv.sql)
            bodies[gv.name] = gv.sql.split(" AS ", 1)[1]
            if any(r.startswith("v") for r in gv.references):
                flat = parse_view(inline_views(gv.sql, bodies))
                lin = resolve_lineage(flat, fx.snapshot)
                assert [refs for _, refs in lin.columns] == [refs for _, refs in e.lineage.columns], gv.sql
                assert lin.predicate_columns == e.lineage.predicate_columns, gv.sql
                checked += 1
        db.close()
    assert checked >= 10
