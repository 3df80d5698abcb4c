import json

import pytest

from semlayer import fixtures
from semlayer.cli import artifact_digests, load_config, main
from semlayer.llm_gateway import ConfigError
from semlayer.schema_model import materialize, render_ddl
from semlayer.synth import braze_marginal_snapshot, identity_views, synthetic_catalog
from semlayer.view_catalog import Catalog, add_view, load, save


def staff_orders_ddl_file(tmp_path):
    p = tmp_path / "schema.sql"
    p.write_text(fixtures.staff_orders_ddl())
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- ingest / graph


def test_ingest_staff_orders(tmp_path, capsys):
    code, out, _ = run(["ingest", "--ddl", staff_orders_ddl_file(tmp_path), "--out", tmp_path / "o"], capsys)
    assert code == 0 and "2 tables" in out
    doc = json.loads((tmp_path / "o" / "snapshot.json").read_text())
    assert doc["version"] == "schema_snapshot.v1"
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["version"] == "run_manifest.v1" and "snapshot" in manifest["artifacts"]


def test_ingest_missing_file(tmp_path, capsys):
    code, _, err = run(["ingest", "--ddl", tmp_path / "nope.sql", "--out", tmp_path / "o"], capsys)
    assert code == 2 and "not found" in err


def test_ingest_ambiguous_input(tmp_path, capsys):
    ddl = staff_orders_ddl_file(tmp_path)
    code, _, err = run(["ingest", "--ddl", ddl, "--database", ddl, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "exactly one" in err
    code, _, _ = run(["ingest", "--out", tmp_path / "o"], capsys)
    assert code == 2


def test_ingest_bad_ddl(tmp_path, capsys):
    p = tmp_path / "bad.sql"
    p.write_text("CREATE TABLE a (x INT,, y INT);")
    code, _, err = run(["ingest", "--ddl", p, "--out", tmp_path / "o"], capsys)
    assert code == 2 and err


def test_ingest_database_untouched(tmp_path, capsys):
    dbfile = tmp_path / "staff_orders.sqlite"
    fixtures.staff_orders_database(dbfile).close()
    before = dbfile.read_bytes()
    code, _, _ = run(["run", "--database", dbfile, "--provider", "replay",
                      "--replay-dir", fixtures.staff_orders_replay_dir(), "--out", tmp_path / "o"], capsys)
    assert code == 0 and dbfile.read_bytes() == before
    assert len(load(tmp_path / "o" / "catalog.json")) == 2


def test_graph_command(tmp_path, capsys):
    code, out, _ = run(["graph", "--ddl", staff_orders_ddl_file(tmp_path), "--out", tmp_path / "o"], capsys)
    assert code == 0 and "2 nodes, 1 edges" in out
    assert (tmp_path / "o" / "graph.dot").read_text().startswith("graph")


# -- config handling


def test_config_file_relative_paths(tmp_path):
    staff_orders_ddl_file(tmp_path)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"version": "runconfig.v1", "ddl": "schema.sql", "sessions": 3,
                               "provider": {"kind": "fallback"}}))
    c = load_config(cfg, {"sessions": 2})
    assert c.ddl == str((tmp_path / "schema.sql").resolve())
    assert c.sessions == 2 and c.provider.kind == "fallback"
    assert c.to_dict()["version"] == "runconfig.v1"


@pytest.mark.parametrize("doc", [
    {"version": "runconfig.v0", "ddl": "x.sql"},
    {"version": "runconfig.v1", "ddl": "x.sql", "colour": "blue"},
    {"version": "runconfig.v1", "ddl": "x.sql", "provider": {"kind": "replay"}},
    {"version": "runconfig.v1", "ddl": "x.sql", "provider": {"kind": "psychic"}},
    {"version": "runconfig.v1", "ddl": "x.sql", "trim_percent": 80},
])
def test_config_errors_exit_3(tmp_path, capsys, doc):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(doc))
    code, _, err = run(["ingest", "--config", cfg], capsys)
    assert code == 3 and err


def test_invalid_json_config(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(cfg, {})


def test_remote_without_key_exit_3(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("SEMLAYER_NO_SUCH_KEY", raising=False)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"version": "runconfig.v1", "ddl": str(staff_orders_ddl_file(tmp_path)),
                               "provider": {"kind": "remote", "endpoint": "http://127.0.0.1:9/v1", "model": "m",
                                            "api_key_env": "SEMLAYER_NO_SUCH_KEY"}}))
    code, _, err = run(["run", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and "SEMLAYER_NO_SUCH_KEY" in err
    assert not (tmp_path / "o" / "catalog.json").exists()


def test_fallback_cannot_run_sessions(tmp_path, capsys):
    code, _, err = run(["run", "--ddl", staff_orders_ddl_file(tmp_path), "--out", tmp_path / "o"], capsys)
    assert code == 3 and "fallback" in err


# -- run / metrics / er / report


def test_staff_orders_fixture_pipeline(tmp_path, capsys):
    out = tmp_path / "o"
    assert run(["run", "--fixture", "staff_orders", "--out", out], capsys)[0] == 0
    assert sorted(load(out / "catalog.json").names) == ["intern", "staff_generates_revenue"]
    assert (out / "sessions" / "session_1.jsonl").exists()
    assert run(["er", "--fixture", "staff_orders", "--out", out], capsys)[0] == 0
    code, _, _ = run(["report", "--fixture", "staff_orders", "--out", out], capsys)
    assert code == 0
    summary = (out / "summary.md").read_text()
    assert "| # views | 2 |" in summary and "Origin Tables" in summary
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("catalog", "report", "er_model", "summary"):
        assert key in manifest["artifacts"]


def test_focus_flag_fixes_session_scope(tmp_path, capsys):
    out = tmp_path / "o"
    focus = "orders: order identifier, total price, order date"
    assert run(["run", "--fixture", "staff_orders", "--out", out, "--budget", 1, "--focus", focus], capsys)[0] == 0
    campaign = json.loads((out / "campaign.json").read_text())
    assert [s["scope"] for s in campaign["sessions"]] == [["orders"]]


def test_metrics_without_catalog_exit_2(tmp_path, capsys):
    code, _, err = run(["metrics", "--ddl", staff_orders_ddl_file(tmp_path), "--out", tmp_path / "o"], capsys)
    assert code == 2 and "run" in err


def test_er_on_empty_catalog_exit_4(tmp_path, capsys):
    out = tmp_path / "o"
    save(Catalog(fixtures.staff_orders_snapshot()), out / "catalog.json")
    code, _, err = run(["er", "--fixture", "staff_orders", "--out", out], capsys)
    assert code == 4 and "empty" in err


def test_identity_layer_full_coverage(tmp_path, capsys, memdb):
    snap = fixtures.staff_orders_snapshot()
    materialize(snap, memdb)
    cat = Catalog(snap)
    for sql in identity_views(snap):
        add_view(memdb, cat, sql)
    out = tmp_path / "o"
    save(cat, out / "catalog.json")
    code, _, _ = run(["metrics", "--ddl", staff_orders_ddl_file(tmp_path), "--out", out], capsys)
    assert code == 0
    assert "coverage: 100.00%" in (out / "refinement_report.md").read_text()


def test_braze_marginal_report_labels(tmp_path, capsys):
    snap = braze_marginal_snapshot()
    ddl = tmp_path / "braze.sql"
    ddl.write_text(render_ddl(snap))
    out = tmp_path / "o"
    save(synthetic_catalog(snap, 200, seed=5), out / "catalog.json")
    code, stdout, _ = run(["metrics", "--ddl", ddl, "--out", out, "--trim-percent", "1"], capsys)
    assert code == 0
    for label in ("# tables", "# median table width", "# median view width", "# max view width",
                  "# original columns", "# relations"):
        assert f"| {label} |" in stdout
    assert "| # relations | 27601 |" in stdout
    csv = (out / "view_widths.csv").read_text().splitlines()
    assert csv[0] == "width,count" and sum(int(l.split(",")[1]) for l in csv[1:]) == 198


def test_provider_failure_exit_5(tmp_path, capsys):
    # a replay directory whose transcript has the wrong speaker makes every session fail
    replay = tmp_path / "replay"
    replay.mkdir()
    (replay / "session_1.jsonl").write_text('{"speaker": "critic", "content": "I go first"}\n')
    code, _, err = run(["run", "--ddl", staff_orders_ddl_file(tmp_path), "--provider", "replay",
                        "--replay-dir", replay, "--out", tmp_path / "o"], capsys)
    assert code == 5 and "provider" in err


def test_replay_check_braze(tmp_path, capsys):
    code, out, _ = run(["replay-check", "--fixture", "braze"], capsys)
    assert code == 0 and "DIFF" not in out and "byte-identical" in out


def test_double_run_identical_digests(tmp_path, capsys):
    for k in (1, 2):
        for cmd in ("run", "er", "report"):
            assert run([cmd, "--fixture", "staff_orders", "--out", tmp_path / f"r{k}"], capsys)[0] == 0
    assert artifact_digests(tmp_path / "r1") == artifact_digests(tmp_path / "r2")
