"""Schema graph: tables as nodes, FK links as edges, plus focused subgraph retrieval.

Subgraph retrieval is a simplified take on prize-collecting Steiner tree
retrieval: the top scoring tables (cosine similarity to a focus vector) are used
as seeds and joined through shortest paths inside the best seed's connected
component, then trimmed to the table budget by dropping the weakest seeds.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

import networkx as nx
import numpy as np

from ._util import canonical_json, fold
from .schema_model import ColumnRef, ForeignKeyDef, SchemaSnapshot, table_wording

GRAPH_VERSION = "schema_graph.v1"
DEFAULT_BUDGET = 8
DEFAULT_SEED_COUNT = 4


class GraphError(ValueError):
    pass


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _edge_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if fold(a) <= fold(b) else (b, a)


@dataclass(frozen=True)
class SchemaGraph:
    nodes: tuple[str, ...]
    edges: Mapping[tuple[str, str], tuple[ForeignKeyDef, ...]]
    node_features: Mapping[str, np.ndarray] = field(default_factory=dict)
    edge_features: Mapping[tuple[str, str], np.ndarray] = field(default_factory=dict)
    snapshot: SchemaSnapshot | None = field(default=None, compare=False)

    @property
    def has_features(self) -> bool:
        return bool(self.nodes) and all(n in self.node_features for n in self.nodes)

    @property
    def dimension(self) -> int | None:
        for v in self.node_features.values():
            return int(v.shape[0])
        return None

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(sorted(self.nodes, key=fold))
        g.add_edges_from(sorted(self.edges, key=lambda e: (fold(e[0]), fold(e[1]))))
        return g

    def neighbors(self, node: str) -> list[str]:
        out = [b if a == node else a for a, b in self.edges if node in (a, b)]
        return sorted(out, key=fold)

    def is_connected_subset(self, tables: Iterable[str]) -> bool:
        tables = list(tables)
        if len(tables) <= 1:
            return True
        return nx.is_connected(self.to_networkx().subgraph(tables))

    def to_dict(self) -> dict:
        return {
            "version": GRAPH_VERSION,
            "nodes": list(self.nodes),
            "edges": [
                {"tables": list(k), "foreign_keys": [fk.to_dict() for fk in v]}
                for k, v in sorted(self.edges.items(), key=lambda kv: (fold(kv[0][0]), fold(kv[0][1])))
            ],
            "feature_dimension": self.dimension,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def to_dot(self) -> str:
        lines = ["graph schema {"]
        for n in self.nodes:
            lines.append(f'  "{n}";')
        for (a, b), fks in sorted(self.edges.items(), key=lambda kv: (fold(kv[0][0]), fold(kv[0][1]))):
            label = "\\n".join(f"{fk.source.column}->{fk.target.column}" for fk in fks)
            lines.append(f'  "{a}" -- "{b}" [label="{label}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FocusQuery:
    text: str
    embedding: np.ndarray


@dataclass(frozen=True)
class SubgraphSample:
    tables: frozenset[str]
    focus: str
    seed_scores: Mapping[str, float]

    @property
    def sorted_tables(self) -> list[str]:
        return sorted(self.tables, key=fold)


def build_graph(snapshot: SchemaSnapshot) -> SchemaGraph:
    edges: dict[tuple[str, str], list[ForeignKeyDef]] = {}
    for fk in snapshot.foreign_keys:
        a = snapshot.table(fk.source.table).name
        b = snapshot.table(fk.target.table).name
        if fold(a) == fold(b):
            continue
        edges.setdefault(_edge_key(a, b), []).append(fk)
    return SchemaGraph(tuple(snapshot.table_names), {k: tuple(v) for k, v in edges.items()}, snapshot=snapshot)


def edge_text(graph: SchemaGraph, edge: tuple[str, str]) -> str:
    return "\n".join(fk.describe() for fk in graph.edges[edge])


def attach_features(graph: SchemaGraph, embedder: Embedder, snapshot: SchemaSnapshot | None = None) -> SchemaGraph:
    """Embed each table's wording (node features) and FK descriptions (edge features)."""
    snapshot = snapshot or graph.snapshot
    if snapshot is None:
        raise GraphError("attach_features needs the snapshot the graph was built from")
    node_vecs = {}
    if graph.nodes:
        texts = [table_wording(snapshot, n) for n in graph.nodes]
        try:
            vecs = embedder.embed(texts)
        except Exception as e:
            raise GraphError(f"embedding node features failed: {e}") from e
        for n, v in zip(graph.nodes, vecs):
            node_vecs[n] = np.asarray(v, dtype=float)
    edge_keys = sorted(graph.edges, key=lambda e: (fold(e[0]), fold(e[1])))
    edge_vecs = {}
    if edge_keys:
        try:
            vecs = embedder.embed([edge_text(graph, e) for e in edge_keys])
        except Exception as e:
            raise GraphError(f"embedding edge features failed: {e}") from e
        edge_vecs = {e: np.asarray(v, dtype=float) for e, v in zip(edge_keys, vecs)}
    dims = {v.shape[0] for v in list(node_vecs.values()) + list(edge_vecs.values())}
    if len(dims) > 1:
        raise GraphError(f"embedder returned mixed dimensions {sorted(dims)}")
    return replace(graph, node_features=node_vecs, edge_features=edge_vecs, snapshot=snapshot)


def connected_components(graph: SchemaGraph) -> list[frozenset[str]]:
    comps = [frozenset(c) for c in nx.connected_components(graph.to_networkx())]
    return sorted(comps, key=lambda c: min(fold(n) for n in c))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def similarity_scores(graph: SchemaGraph, embedding: np.ndarray) -> dict[str, float]:
    if not graph.nodes:
        raise GraphError("empty graph")
    if not graph.has_features:
        raise GraphError("graph has no node features; call attach_features first")
    q = _unit(np.asarray(embedding, dtype=float))
    if q.shape[0] != graph.dimension:
        raise GraphError(f"focus dimension {q.shape[0]} != graph dimension {graph.dimension}")
    return {n: float(_unit(graph.node_features[n]) @ q) for n in graph.nodes}


def _connect(g: nx.Graph, current: list[str], target: str) -> list[str]:
    """Nodes of a shortest path from the ``current`` set to ``target`` (excluding the set)."""
    if target in current:
        return []
    paths = nx.multi_source_dijkstra_path(g, set(current))
    return [n for n in paths[target] if n not in current]


def retrieve_subgraph(graph: SchemaGraph, focus: FocusQuery, budget: int = DEFAULT_BUDGET,
                      seed_count: int = DEFAULT_SEED_COUNT) -> SubgraphSample:
    """Pick a connected table set of at most ``budget`` tables relevant to ``focus``."""
    if budget < 1:
        raise GraphError("budget must be >= 1")
    scores = similarity_scores(graph, focus.embedding)
    ranked = sorted(graph.nodes, key=lambda n: (-scores[n], fold(n)))
    k = min(budget, seed_count, len(ranked))
    seeds = ranked[:k]

    g = graph.to_networkx()
    home = nx.node_connected_component(g, seeds[0])
    seeds = [s for s in seeds if s in home]

    # grow seed prefixes; the largest prefix whose connection fits the budget wins,
    # i.e. lowest-scoring seeds are dropped first
    chosen: list[str] = [seeds[0]]
    grown = list(chosen)
    for s in seeds[1:]:
        grown = grown + _connect(g, grown, s)
        if len(grown) > budget:
            break
        chosen = list(grown)
    kept = {s: scores[s] for s in seeds if s in chosen}
    return SubgraphSample(frozenset(chosen), focus.text, kept)


def _table_coverage(snapshot: SchemaSnapshot, table: str, covered: set[ColumnRef]) -> float:
    t = snapshot.table(table)
    return sum(1 for r in t.refs() if r in covered) / t.width


def sample_session_scope(graph: SchemaGraph, memory, budget: int = DEFAULT_BUDGET,
                         seed_count: int = DEFAULT_SEED_COUNT) -> SubgraphSample:
    """Choose the next session's tables, steering toward the least explored part of the schema.

    ``memory`` needs ``covered_columns``, ``session_count`` and ``scope_counts``
    (see :class:`semlayer.agent_sim.SessionMemory`).  Each component is weighted
    by the uncovered fraction of its tables, discounted by how often those
    tables were already in scope.  The focus vector is the mean feature of the
    least covered tables in the chosen component.
    """
    if not graph.nodes:
        raise GraphError("empty graph")
    snapshot = graph.snapshot
    covered = set(getattr(memory, "covered_columns", ()))
    visits = {fold(k): v for k, v in getattr(memory, "scope_counts", {}).items()}
    coverage = {n: _table_coverage(snapshot, n, covered) for n in graph.nodes}

    comps = connected_components(graph)
    weights = [sum((1.0 - coverage[n]) / (1 + visits.get(fold(n), 0)) for n in c) for c in comps]
    if max(weights) <= 0:
        comp = comps[getattr(memory, "session_count", 0) % len(comps)]
    else:
        best = max(weights)
        comp = comps[next(i for i, w in enumerate(weights) if w == best)]

    least = sorted(comp, key=lambda n: (coverage[n], visits.get(fold(n), 0), fold(n)))[:max(1, seed_count)]
    focus_vec = np.mean([_unit(graph.node_features[n]) for n in least], axis=0)
    focus = FocusQuery("Explore: " + ", ".join(least), _unit(focus_vec))

    sub = SchemaGraph(tuple(n for n in graph.nodes if n in comp),
                      {k: v for k, v in graph.edges.items() if k[0] in comp},
                      {n: graph.node_features[n] for n in comp}, {}, snapshot)
    return retrieve_subgraph(sub, focus, budget, seed_count)
