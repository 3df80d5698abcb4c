"""Walk through the pipeline on the two-table staff/orders fixture.

Run with:  python3 demos/staff_orders_walkthrough.py
"""
from semlayer import fixtures
from semlayer.agent_sim import SessionConfig, SessionMemory, run_session
from semlayer.er_builder import cluster_views, embed_views, extract_er, render_er
from semlayer.llm_gateway import Gateway, ProviderConfig
from semlayer.metrics import build_report, render_report
from semlayer.schema_graph import attach_features, build_graph
from semlayer.schema_model import schema_wording
from semlayer.view_catalog import Catalog


def main():
    snap = fixtures.staff_orders_snapshot()
    print("== schema as the agents see it\n")
    print(schema_wording(snap, snap.table_names))

    gateway = Gateway.from_config(ProviderConfig(kind="replay",
                                                 transcript_path=str(fixtures.staff_orders_replay_dir())))
    graph = attach_features(build_graph(snap), gateway.embedder, snap)
    print(f"== schema graph: {len(graph.nodes)} tables, {len(graph.edges)} foreign-key link(s)\n")

    db = fixtures.staff_orders_database()
    catalog = Catalog(snap)
    outcome = run_session(SessionConfig(), SessionMemory(), gateway.for_session("session_1"), db, catalog)
    print("== replayed conversation")
    for msg in outcome.transcript:
        text = msg.content or (f"calls {msg.tool_call.name}" if msg.tool_call else "")
        print(f"[{msg.role}] {text.strip()[:160]}")
    print(f"\nended by: {outcome.termination_reason}; validated: {', '.join(catalog.names)}\n")

    for entry in catalog:
        print(f"-- lineage of {entry.name}")
        for name, refs in entry.lineage.columns:
            print(f"   {name:<10} <- {', '.join(str(r) for r in sorted(refs)) or '(constant)'}")
        print(f"   filters/groups on: {', '.join(str(r) for r in sorted(entry.lineage.predicate_columns)) or '-'}")
    print()

    print(render_report(build_report(catalog, trim_top_percent=0)))

    clusters = cluster_views(embed_views(catalog, gateway))
    model = extract_er(clusters, catalog, gateway.for_session("er"))
    print("== entity-relationship model\n")
    print(render_er(model))


if __name__ == "__main__":
    main()
