import random

import pytest

from oracles import traced_origins
from semlayer.metrics import lower_median
from semlayer.schema_model import ColumnRef
from semlayer.synth import (
    BRAZE_MARGINALS,
    CMS_MARGINALS,
    decode_origins,
    planted_clusters,
    random_graph_snapshot,
    relation_total,
    sentinel_fixture,
    star_schema,
    widths_for_marginals,
)


@pytest.mark.parametrize("marginals", [BRAZE_MARGINALS, CMS_MARGINALS])
def test_marginal_widths_exact(marginals):
    w = widths_for_marginals(**marginals)
    assert len(w) == marginals["n_tables"]
    assert sum(w) == marginals["total_columns"]
    assert relation_total(w) == marginals["relations"]
    assert lower_median(w) == marginals["median"]
    if "max_width" in marginals:
        assert max(w) == marginals["max_width"]


def test_small_marginals():
    w = widths_for_marginals(3, 9, 9, 3)
    assert sum(w) == 9 and relation_total(w) == 9 and lower_median(w) == 3


def test_infeasible_marginals():
    with pytest.raises(ValueError):
        widths_for_marginals(3, 2, 0, 5)


def test_decode_origins():
    assert decode_origins("<t3.c2#0>") == {ColumnRef("t3", "c2")}
    assert decode_origins("<t1.c1#0>|<t2.c4#3>") == {ColumnRef("t1", "c1"), ColumnRef("t2", "c4")}
    assert decode_origins(None) == set()


def test_sentinel_ground_truth_traces():
    """Values the engine emits for each generated view only name columns in the recorded origins."""
    fx = sentinel_fixture(5, min_views=10)
    db = fx.database()
    for gv in fx.views:
        db.execute(gv.sql)
        traced, _ = traced_origins(db, gv.name, len(gv.outputs))
        for seen, (_, origins) in zip(traced, gv.outputs):
            assert seen <= origins, gv.sql


def test_sentinel_fixture_is_seeded():
    a, b = sentinel_fixture(9), sentinel_fixture(9)
    assert [v.sql for v in a.views] == [v.sql for v in b.views]
    assert a.snapshot == b.snapshot


def test_star_schema_shape():
    ddl, m = star_schema(5, seed=1)
    assert ddl.count("CREATE TABLE") == 5 and m.foreign_key_count == 4


def test_random_graph_snapshot_is_valid():
    snap = random_graph_snapshot(random.Random(1), 10, 15)
    assert len(snap.tables) == 10 and len(snap.foreign_keys) == 15


def test_planted_clusters_guard():
    with pytest.raises(ValueError):
        planted_clusters(5, 2, dim=3)
