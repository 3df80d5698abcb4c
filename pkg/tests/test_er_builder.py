import json

import numpy as np
import pydot
import pytest
from hypothesis import given, settings, strategies as st

from conftest import replay_gateway, scripted
from semlayer import fixtures
from semlayer.er_builder import (
    ERModel,
    Entity,
    Relationship,
    check_model,
    cluster_views,
    embed_views,
    extract_er,
    model_from_dict,
    render_er,
    view_descriptor,
)
from semlayer.llm_gateway import ChatMessage, Gateway
from semlayer.synth import planted_clusters
from semlayer.view_catalog import Catalog, add_view


def reply(doc):
    return ChatMessage("analyst", json.dumps(doc))


@pytest.fixture
def braze_views(braze_db):
    return fixtures.braze_er_catalog(braze_db)


def braze_er_model(catalog):
    clusters = cluster_views(embed_views(catalog, Gateway()))
    return clusters, extract_er(clusters, catalog, replay_gateway(fixtures.braze_er_transcript()))


# -- embedding


def test_similar_views_embed_close(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW staff_positions AS SELECT staff_id, position FROM staff")
    add_view(staff_orders_db, cat, "CREATE VIEW staff_position AS SELECT staff_id, position FROM staff")
    vecs = embed_views(cat, Gateway())
    a, b = vecs["staff_positions"], vecs["staff_position"]
    assert not np.array_equal(a, b)
    assert float(a @ b) > 0.9


def test_single_view_and_empty(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    with pytest.raises(ValueError):
        embed_views(cat, Gateway())
    add_view(staff_orders_db, cat, "CREATE VIEW v AS SELECT name FROM staff")
    vecs = embed_views(cat, Gateway())
    assert list(vecs) == ["v"]
    assert np.array_equal(vecs["v"], embed_views(cat, Gateway())["v"])


def test_descriptor_mentions_columns_and_tables(braze_views):
    text = view_descriptor(braze_views["Common_User_Attributes"])
    assert text.startswith("view Common_User_Attributes") and "USERS" in text


# -- clustering


def test_threshold_extremes():
    vecs, _ = planted_clusters(3, 4, seed=1)
    assert len(cluster_views(vecs, 0.0)) == 12
    assert len(cluster_views(vecs, 2.0)) == 1


def test_planted_groups_recovered():
    vecs, groups = planted_clusters(3, 5, seed=2)
    got = {frozenset(c.members) for c in cluster_views(vecs, 0.35)}
    assert got == {frozenset(g) for g in groups}


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 1000), st.floats(0.0, 2.0))
def test_clustering_is_a_partition(n_groups, per_group, seed, threshold):
    vecs, _ = planted_clusters(n_groups, per_group, seed=seed, spread=0.3)
    clusters = cluster_views(vecs, threshold)
    members = [m for c in clusters for m in c.members]
    assert sorted(members) == sorted(vecs) and len(set(members)) == len(members)
    assert clusters == cluster_views(dict(reversed(list(vecs.items()))), threshold)


def test_single_embedding():
    (c,) = cluster_views({"only": np.ones(4)})
    assert c.members == ("only",)
    with pytest.raises(ValueError):
        cluster_views({})


# -- extraction


def test_braze_er_user_entity(braze_views):
    clusters, model = braze_er_model(braze_views)
    user = model.entity("User")
    assert user is not None and "Common_User_Attributes" in user.views
    assert user.origin_tables and all(t.upper().startswith("USERS") for t in user.origin_tables)
    assert model.entity("Users") is None
    assert check_model(model, braze_views) == []


def test_braze_er_drops_hallucinated_view(braze_views):
    _, model = braze_er_model(braze_views)
    assert "User_Churn_Summary" not in model.view_names()
    assert any("User_Churn_Summary" in w for w in model.provenance["warnings"])


def test_braze_er_relationships_reference_entities(braze_views):
    _, model = braze_er_model(braze_views)
    names = {e.name for e in model.entities}
    assert model.relationships
    assert all(set(r.endpoints) <= names for r in model.relationships)


def test_extraction_is_deterministic(braze_db):
    digests = set()
    for _ in range(2):
        db = fixtures.braze_database()
        digests.add(braze_er_model(fixtures.braze_er_catalog(db))[1].digest())
        db.close()
    assert len(digests) == 1


def test_bad_reference_dropped_on_single_view(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW intern AS SELECT * FROM staff WHERE position = 'intern'")
    clusters = cluster_views(embed_views(cat, Gateway()))
    gw = scripted([
        reply({"entities": [{"name": "  Intern ", "attributes": [{"name": "position", "views": ["intern"]}],
                             "views": ["intern", "ghost_view"]},
                            {"name": "Ghost", "views": ["ghost_view"]}],
               "relationships": [{"name": "Intern-Ghost", "endpoints": ["Intern", "Ghost"], "views": ["intern"]}]}),
        reply({"merge": {}}),
    ])
    model = extract_er(clusters, cat, gw)
    assert [e.name for e in model.entities] == ["Intern"]
    assert model.entities[0].views == ["intern"] and model.entities[0].origin_tables == ["staff"]
    assert model.relationships == []
    assert check_model(model, cat) == []


def test_non_json_proposal_is_skipped(staff_orders_db, staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    add_view(staff_orders_db, cat, "CREATE VIEW v AS SELECT name FROM staff")
    model = extract_er(cluster_views(embed_views(cat, Gateway())), cat,
                       scripted([ChatMessage("analyst", "I cannot help with that.")]))
    assert model.entities == [] and model.provenance["warnings"]


def test_check_model_finds_problems(staff_orders_snapshot):
    cat = Catalog(staff_orders_snapshot)
    model = ERModel([Entity("A", [], ["nope"], ["staff"])], [Relationship("A-B", ("A", "B"), [])])
    problems = check_model(model, cat)
    assert any("unknown view" in p for p in problems)
    assert any("not an entity" in p for p in problems)
    assert any("no views" in p for p in problems)


# -- rendering


def test_markdown_layout(braze_views):
    _, model = braze_er_model(braze_views)
    md = render_er(model)
    assert md.splitlines()[0] == "| Entity / Relation | Attributes | Views | Origin Tables |"
    assert "Common_User_Attributes" in md


def test_dot_parses(braze_views):
    _, model = braze_er_model(braze_views)
    (graph,) = pydot.graph_from_dot_data(render_er(model, "dot"))
    nodes = {n.get_name().strip('"') for n in graph.get_nodes()} - {"node"}
    assert {e.name for e in model.entities} <= nodes
    assert len(graph.get_edges()) == len(model.relationships)


def test_empty_model_renders():
    empty = ERModel()
    assert render_er(empty).count("\n") == 2
    (graph,) = pydot.graph_from_dot_data(render_er(empty, "dot"))
    assert graph.get_edges() == []
    with pytest.raises(ValueError):
        render_er(empty, "svg")


def test_json_round_trip(braze_views):
    _, model = braze_er_model(braze_views)
    back = model_from_dict(json.loads(render_er(model, "json")))
    assert back == model and back.digest() == model.digest()


def test_dot_escapes_quotes():
    model = ERModel([Entity('Odd "name"', [("a\\b", ["v"])], ["v"], [])])
    (graph,) = pydot.graph_from_dot_data(render_er(model, "dot"))
    assert len(graph.get_nodes()) >= 1
