"""Group catalog views by embedding similarity and distill an Entity-Relationship model.

The language model only names things: entities, attributes and relationships,
each pointing at member views.  Which views exist and which base tables they
draw from is always recomputed from the catalog, so hallucinated view names
are dropped and origin tables come from lineage.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from ._util import canonical_json, digest_text, fold
from .llm_gateway import ChatMessage, Gateway, dump_transcript
from .view_catalog import Catalog, CatalogEntry

log = logging.getLogger(__name__)

ER_VERSION = "er_model.v1"
DEFAULT_THRESHOLD = 0.35

EXTRACT_PROMPT = (
    "You organise database views into an Entity-Relationship model. For the group of views "
    "below, identify the entities, their attributes (properties) and the relationships between "
    "entities. Map every entity, attribute and relationship to the views that support it, using "
    "the exact view names given. Answer with a single JSON object:\n"
    '{"entities": [{"name": ..., "attributes": [{"name": ..., "views": [...]}], "views": [...]}],\n'
    ' "relationships": [{"name": "A-B", "endpoints": ["A", "B"], "views": [...]}]}'
)
MERGE_PROMPT = (
    "Entities were extracted separately from several groups of views. Combine entities that "
    "denote the same real-world concept. Answer with a single JSON object mapping each kept "
    'entity name to the list of names merged into it, e.g. {"merge": {"User": ["Users", "Customer"]}}. '
    "Entities not mentioned are kept as they are."
)


def _norm(name: str) -> str:
    return " ".join(str(name).split())


@dataclass(frozen=True)
class ViewCluster:
    members: tuple[str, ...]
    centroid: np.ndarray
    label: str

    def __eq__(self, other):
        if not isinstance(other, ViewCluster):
            return NotImplemented
        return self.members == other.members and self.label == other.label and np.array_equal(
            self.centroid, other.centroid)


@dataclass
class Entity:
    name: str
    attributes: list[tuple[str, list[str]]] = field(default_factory=list)
    views: list[str] = field(default_factory=list)
    origin_tables: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name,
                "attributes": [{"name": a, "views": list(v)} for a, v in self.attributes],
                "views": list(self.views), "origin_tables": list(self.origin_tables)}


@dataclass
class Relationship:
    name: str
    endpoints: tuple[str, str]
    views: list[str] = field(default_factory=list)
    origin_tables: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "endpoints": list(self.endpoints),
                "views": list(self.views), "origin_tables": list(self.origin_tables)}


@dataclass
class ERModel:
    entities: list[Entity] = field(default_factory=list)
    relationships: list[Relationship] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    # the exchanges that produced the model; kept for session logs, not serialised
    transcript: list[ChatMessage] = field(default_factory=list, repr=False, compare=False)

    def entity(self, name: str) -> Entity | None:
        return next((e for e in self.entities if fold(e.name) == fold(name)), None)

    def to_dict(self) -> dict:
        return {
            "version": ER_VERSION,
            "entities": [e.to_dict() for e in self.entities],
            "relationships": [r.to_dict() for r in self.relationships],
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return digest_text(self.to_json())

    def view_names(self) -> set[str]:
        out = set()
        for e in self.entities:
            out |= set(e.views)
            for _, vs in e.attributes:
                out |= set(vs)
        for r in self.relationships:
            out |= set(r.views)
        return out


# --------------------------------------------------------------------------- embedding + clustering


def view_descriptor(entry: CatalogEntry) -> str:
    cols = ", ".join(entry.lineage.names)
    tables = ", ".join(sorted(entry.lineage.tables, key=fold))
    return f"view {entry.name}\ncolumns: {cols}\norigin tables: {tables}"


def embed_views(catalog: Catalog, gateway: Gateway) -> dict[str, np.ndarray]:
    entries = list(catalog)
    if not entries:
        raise ValueError("catalog is empty")
    vecs = gateway.embed([view_descriptor(e) for e in entries])
    return {e.name: np.asarray(v, dtype=float) for e, v in zip(entries, vecs)}


_STOP = {"view", "views", "the", "and", "for", "with", "data", "by", "of"}


def _theme(members: Sequence[str]) -> str:
    words = Counter()
    for m in members:
        for w in set(re.split(r"[^a-z0-9]+", m.lower())):
            if len(w) > 2 and w not in _STOP:
                words[w] += 1
    if not words:
        return members[0]
    return sorted(words.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def cluster_views(embeddings: Mapping[str, np.ndarray], threshold: float = DEFAULT_THRESHOLD) -> list[ViewCluster]:
    """Average-linkage agglomerative clustering on cosine distance, cut at ``threshold``."""
    if not embeddings:
        raise ValueError("nothing to cluster")
    names = sorted(embeddings, key=lambda n: (fold(n), n))
    X = np.vstack([embeddings[n] for n in names])
    if len(names) == 1:
        labels = [1]
    else:
        Z = linkage(X, method="average", metric="cosine")
        labels = list(fcluster(Z, t=threshold, criterion="distance"))
    groups: dict[int, list[str]] = {}
    for n, lab in zip(names, labels):
        groups.setdefault(int(lab), []).append(n)
    out = []
    for members in sorted(groups.values(), key=lambda m: (fold(m[0]), m[0])):
        centroid = np.mean([embeddings[m] for m in members], axis=0)
        out.append(ViewCluster(tuple(members), centroid, _theme(members)))
    return out


# --------------------------------------------------------------------------- extraction


def _parse_json_object(text: str) -> dict | None:
    text = re.sub(r"```(?:json)?", "", text or "")
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        doc = json.loads(text[start:end + 1])
    except json.JSONDecodeError:
        return None
    return doc if isinstance(doc, dict) else None


def _cluster_request(cluster: ViewCluster, catalog: Catalog) -> str:
    lines = [f"Group '{cluster.label}' ({len(cluster.members)} views):"]
    for name in cluster.members:
        e = catalog[name]
        lines.append(f"- {e.name}({', '.join(e.lineage.names)}) from {', '.join(sorted(e.lineage.tables, key=fold))}")
    return "\n".join(lines)


class _Sanitizer:
    def __init__(self, catalog: Catalog, warnings: list[str]):
        self.catalog = catalog
        self.warnings = warnings

    def views(self, names, context: str) -> list[str]:
        out = []
        for n in names or []:
            n = _norm(n)
            if n in self.catalog:
                canon = self.catalog[n].name
                if canon not in out:
                    out.append(canon)
            else:
                self.warnings.append(f"{context}: dropped unknown view {n!r}")
        return out


def _origin_tables(catalog: Catalog, views: Sequence[str]) -> list[str]:
    tables: set[str] = set()
    for v in views:
        if v in catalog:
            tables |= set(catalog[v].lineage.tables)
    return sorted(tables, key=fold)


def _merge_attributes(into: list[tuple[str, list[str]]], extra: Sequence[tuple[str, list[str]]]):
    for name, views in extra:
        for i, (existing, ev) in enumerate(into):
            if fold(existing) == fold(name):
                into[i] = (existing, ev + [v for v in views if v not in ev])
                break
        else:
            into.append((name, list(views)))


def extract_er(clusters: Sequence[ViewCluster], catalog: Catalog, gateway: Gateway) -> ERModel:
    """One proposal exchange per cluster, then a merge exchange across clusters."""
    warnings: list[str] = []
    clean = _Sanitizer(catalog, warnings)
    transcript: list[ChatMessage] = []
    entities: list[Entity] = []
    relationships: list[Relationship] = []

    for idx, cluster in enumerate(clusters):
        request = ChatMessage("system", _cluster_request(cluster, catalog))
        reply = gateway.chat([request], "analyst", system_prompt=EXTRACT_PROMPT)
        transcript += [request, reply]
        doc = _parse_json_object(reply.content)
        if doc is None:
            warnings.append(f"cluster {idx}: proposal is not JSON; skipped")
            continue
        found = 0
        for raw in doc.get("entities") or []:
            if not isinstance(raw, dict) or not raw.get("name"):
                continue
            name = _norm(raw["name"])
            views = clean.views(raw.get("views"), f"entity {name}")
            attrs = []
            for a in raw.get("attributes") or []:
                if isinstance(a, str):
                    attrs.append((_norm(a), []))
                elif isinstance(a, dict) and a.get("name"):
                    attrs.append((_norm(a["name"]), clean.views(a.get("views"), f"attribute {name}.{a['name']}")))
            for _, av in attrs:
                views += [v for v in av if v not in views]
            if not views:
                warnings.append(f"entity {name}: no valid views; dropped")
                continue
            found += 1
            existing = next((e for e in entities if fold(e.name) == fold(name)), None)
            if existing is None:
                entities.append(Entity(name, attrs, views))
            else:
                existing.views += [v for v in views if v not in existing.views]
                _merge_attributes(existing.attributes, attrs)
        for raw in doc.get("relationships") or []:
            if not isinstance(raw, dict):
                continue
            ends = [_norm(x) for x in (raw.get("endpoints") or [])]
            if len(ends) != 2:
                warnings.append(f"relationship {raw.get('name')!r}: needs two endpoints; dropped")
                continue
            views = clean.views(raw.get("views"), f"relationship {raw.get('name')}")
            if not views:
                warnings.append(f"relationship {raw.get('name')!r}: no valid views; dropped")
                continue
            found += 1
            relationships.append(Relationship(_norm(raw.get("name") or f"{ends[0]}-{ends[1]}"),
                                              (ends[0], ends[1]), views))
        if not found:
            log.info("cluster %d (%s) produced no model elements", idx, cluster.label)

    aliases: dict[str, str] = {}
    if entities:
        listing = "\n".join(f"- {e.name}: {', '.join(a for a, _ in e.attributes) or '-'}" for e in entities)
        request = ChatMessage("system", "Entities:\n" + listing)
        reply = gateway.chat([request], "analyst", system_prompt=MERGE_PROMPT)
        transcript += [request, reply]
        doc = _parse_json_object(reply.content)
        merge = (doc or {}).get("merge")
        if isinstance(merge, dict):
            for keep, others in merge.items():
                for o in others or []:
                    if fold(_norm(o)) != fold(_norm(keep)):
                        aliases[fold(_norm(o))] = _norm(keep)
        elif doc is None:
            warnings.append("merge reply is not JSON; entities kept separate")

    merged: list[Entity] = []
    for e in entities:
        target = aliases.get(fold(e.name), e.name)
        into = next((m for m in merged if fold(m.name) == fold(target)), None)
        if into is None:
            merged.append(Entity(target, list(e.attributes), list(e.views)))
        else:
            into.views += [v for v in e.views if v not in into.views]
            _merge_attributes(into.attributes, e.attributes)
    for e in merged:
        e.views.sort(key=fold)
        e.origin_tables = _origin_tables(catalog, e.views)

    names = {fold(e.name): e.name for e in merged}
    rels: list[Relationship] = []
    for r in relationships:
        a, b = (names.get(fold(aliases.get(fold(x), x))) for x in r.endpoints)
        if a is None or b is None:
            warnings.append(f"relationship {r.name}: endpoint is not an entity; dropped")
            continue
        same = next((x for x in rels if x.endpoints == (a, b) and fold(x.name) == fold(r.name)), None)
        if same is None:
            rels.append(Relationship(r.name, (a, b), list(r.views)))
        else:
            same.views += [v for v in r.views if v not in same.views]
    for r in rels:
        r.views.sort(key=fold)
        r.origin_tables = _origin_tables(catalog, r.views)

    for w in warnings:
        log.warning(w)
    provenance = {
        "clusters": [{"label": c.label, "members": list(c.members)} for c in clusters],
        "transcript_digest": digest_text(dump_transcript(transcript)),
        "warnings": warnings,
    }
    return ERModel(merged, rels, provenance, transcript)


def check_model(model: ERModel, catalog: Catalog) -> list[str]:
    """Referential-integrity problems (empty list when the model is sound)."""
    problems = []
    for v in model.view_names():
        if v not in catalog:
            problems.append(f"unknown view {v}")
    names = {fold(e.name) for e in model.entities}
    for r in model.relationships:
        for x in r.endpoints:
            if fold(x) not in names:
                problems.append(f"relationship {r.name} endpoint {x} is not an entity")
    for el in list(model.entities) + list(model.relationships):
        if not el.views:
            problems.append(f"{el.name} has no views")
        if el.origin_tables != _origin_tables(catalog, el.views):
            problems.append(f"{el.name} origin tables disagree with lineage")
    return problems


# --------------------------------------------------------------------------- rendering


def _cell(items: Sequence[str]) -> str:
    return "<br>".join(items) if items else "-"


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_er(model: ERModel, format: str = "markdown") -> str:
    if format == "json":
        return model.to_json()
    if format == "markdown":
        lines = ["| Entity / Relation | Attributes | Views | Origin Tables |", "|---|---|---|---|"]
        for e in model.entities:
            lines.append(f"| **{e.name}** | {_cell([a for a, _ in e.attributes])} | {_cell(e.views)} "
                         f"| {_cell(e.origin_tables)} |")
        for r in model.relationships:
            lines.append(f"| **{r.name}** | - | {_cell(r.views)} | {_cell(r.origin_tables)} |")
        return "\n".join(lines) + "\n"
    if format == "dot":
        lines = ["digraph er {", "  node [shape=box];"]
        for e in model.entities:
            label = "\\n".join(_dot_id(x)[1:-1] for x in [e.name] + [a for a, _ in e.attributes])
            lines.append(f'  {_dot_id(e.name)} [label="{label}"];')
        for r in model.relationships:
            lines.append(f"  {_dot_id(r.endpoints[0])} -> {_dot_id(r.endpoints[1])} "
                         f"[label={_dot_id(r.name)}, dir=none];")
        lines.append("}")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown ER format {format!r}")


def model_from_dict(doc: Mapping) -> ERModel:
    if doc.get("version") != ER_VERSION:
        raise ValueError(f"unsupported ER model version {doc.get('version')!r}")
    ents = [Entity(e["name"], [(a["name"], list(a["views"])) for a in e["attributes"]], list(e["views"]),
                   list(e["origin_tables"])) for e in doc["entities"]]
    rels = [Relationship(r["name"], tuple(r["endpoints"]), list(r["views"]), list(r["origin_tables"]))
            for r in doc["relationships"]]
    return ERModel(ents, rels, dict(doc.get("provenance", {})))
