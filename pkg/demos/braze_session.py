"""Replay the recorded marketing-database session and inspect the resulting views.

Run with:  python3 demos/braze_session.py
"""
from semlayer import fixtures
from semlayer.agent_sim import SessionConfig, SessionMemory, protocol_violations, run_session
from semlayer.llm_gateway import Gateway, ProviderConfig
from semlayer.view_catalog import Catalog


def main():
    db = fixtures.braze_database()
    catalog = Catalog(fixtures.braze_snapshot())
    gateway = Gateway.from_config(ProviderConfig(kind="replay", transcript_path=str(fixtures.braze_replay_dir())))
    out = run_session(SessionConfig(), SessionMemory(), gateway.for_session("session_1"), db, catalog)

    print(f"{len(out.transcript)} turns, ended by {out.termination_reason!r}, "
          f"protocol problems: {protocol_violations(out.transcript) or 'none'}")
    for sql, ok, note in out.query_reports:
        print(f"\nquery ({'ok' if ok else 'error'}): {' '.join(sql.split())[:100]}...\n  -> {note[:100]}")
    print("\ntool responses:", out.tool_results)
    for entry in catalog:
        rows = db.execute(f'SELECT COUNT(*) FROM "{entry.name}"').fetchone()[0]
        tables = ", ".join(sorted(entry.lineage.tables))
        print(f"\n{entry.name}: {entry.width} column(s), {rows} row(s) in the fixture, reads {tables}")


if __name__ == "__main__":
    main()
