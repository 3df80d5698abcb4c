"""Schema-refinement statistics: widths, coverage, preserved and new column relations.

A *relation* is an unordered pair of base columns.  The original schema
relates every pair of columns sharing a table; the semantic layer relates
every pair of origin columns feeding the same view's output.  Layer pairs are
counted once globally, so ``preserved + new`` equals the layer relation count.
"""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from ._util import canonical_json, format_percent
from .schema_model import ColumnRef, SchemaSnapshot
from .view_catalog import Catalog, CatalogEntry, CatalogError

REPORT_VERSION = "refinement_report.v1"


def lower_median(values: Sequence[int]) -> int:
    """Element ``floor((n-1)/2)`` of the sorted values; 0 for an empty list."""
    if not values:
        return 0
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass(frozen=True)
class SchemaStats:
    table_count: int
    median_table_width: int
    max_table_width: int
    column_count: int
    relation_count: int


@dataclass(frozen=True)
class LayerStats:
    view_count: int = 0
    median_view_width: int = 0
    max_view_width: int = 0
    original_columns_used: int = 0
    coverage_fraction: float = 0.0
    preserved_relations: int = 0
    new_relations: int = 0
    layer_relation_count: int = 0
    # coverage counting output lineage only (predicate-only columns excluded)
    output_columns_used: int = 0
    output_coverage_fraction: float = 0.0


def schema_stats(snapshot: SchemaSnapshot) -> SchemaStats:
    widths = [t.width for t in snapshot.tables]
    return SchemaStats(
        table_count=len(widths),
        median_table_width=lower_median(widths),
        max_table_width=max(widths, default=0),
        column_count=sum(widths),
        relation_count=sum(math.comb(w, 2) for w in widths),
    )


def _pair(a: ColumnRef, b: ColumnRef) -> tuple[ColumnRef, ColumnRef]:
    return (a, b) if a < b else (b, a)


def view_pairs(entry: CatalogEntry) -> set[tuple[ColumnRef, ColumnRef]]:
    cols = sorted(entry.lineage.output_origins)
    return {(cols[i], cols[j]) for i in range(len(cols)) for j in range(i + 1, len(cols))}


def layer_pairs(entries: Iterable[CatalogEntry]) -> set[tuple[ColumnRef, ColumnRef]]:
    out: set[tuple[ColumnRef, ColumnRef]] = set()
    for e in entries:
        out |= view_pairs(e)
    return out


def layer_stats(catalog: Catalog, snapshot: SchemaSnapshot | None = None) -> LayerStats:
    snapshot = snapshot or catalog.snapshot
    entries = list(catalog)
    if not entries:
        return LayerStats()
    covered: set[ColumnRef] = set()
    output_covered: set[ColumnRef] = set()
    for e in entries:
        for ref in e.lineage.coverage:
            if not snapshot.has_column(ref):
                raise CatalogError(f"view {e.name} lineage mentions {ref}, which is not in the snapshot")
        covered |= e.lineage.coverage
        output_covered |= e.lineage.output_origins
    pairs = layer_pairs(entries)
    preserved = sum(1 for a, b in pairs if a.key[0] == b.key[0])
    widths = [e.width for e in entries]
    total = snapshot.column_count
    return LayerStats(
        view_count=len(entries),
        median_view_width=lower_median(widths),
        max_view_width=max(widths),
        original_columns_used=len(covered),
        coverage_fraction=len(covered) / total if total else 0.0,
        preserved_relations=preserved,
        new_relations=len(pairs) - preserved,
        layer_relation_count=len(pairs),
        output_columns_used=len(output_covered),
        output_coverage_fraction=len(output_covered) / total if total else 0.0,
    )


def width_histogram(catalog: Catalog | Iterable[CatalogEntry] | Mapping[str, int],
                    trim_top_percent: float = 0.01) -> dict[int, int]:
    """Bucket views by width after dropping the ``ceil(trim * n)`` widest views.

    Ties among the widest are broken by view name, so exactly that many views go.
    Accepts a catalog, catalog entries, or a ``{name: width}`` mapping.
    """
    if not 0 <= trim_top_percent <= 0.5:
        raise ValueError("trim fraction must be within [0, 0.5]")
    if isinstance(catalog, Mapping):
        widths = dict(catalog)
    else:
        widths = {e.name: e.width for e in catalog}
    ranked = sorted(widths.items(), key=lambda kv: (-kv[1], kv[0]))
    drop = math.ceil(round(trim_top_percent * len(ranked), 9))
    kept = ranked[drop:]
    return dict(sorted(Counter(w for _, w in kept).items()))


def table_width_histogram(snapshot: SchemaSnapshot) -> dict[int, int]:
    return dict(sorted(Counter(t.width for t in snapshot.tables).items()))


@dataclass(frozen=True)
class RefinementReport:
    schema: SchemaStats
    layer: LayerStats
    width_histogram: Mapping[int, int] = field(default_factory=dict)
    table_width_histogram: Mapping[int, int] = field(default_factory=dict)
    trim_top_percent: float = 0.01
    generated_at: str = ""
    config: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "schema": asdict(self.schema),
            "layer": asdict(self.layer),
            "width_histogram": {str(k): v for k, v in self.width_histogram.items()},
            "table_width_histogram": {str(k): v for k, v in self.table_width_histogram.items()},
            "trim_top_percent": self.trim_top_percent,
            "generated_at": self.generated_at,
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RefinementReport":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(SchemaStats(**d["schema"]), LayerStats(**d["layer"]),
                   {int(k): v for k, v in d.get("width_histogram", {}).items()},
                   {int(k): v for k, v in d.get("table_width_histogram", {}).items()},
                   d.get("trim_top_percent", 0.01), d.get("generated_at", ""), d.get("config", {}))


def build_report(catalog: Catalog, trim_top_percent: float = 0.01, config: Mapping | None = None) -> RefinementReport:
    return RefinementReport(
        schema_stats(catalog.snapshot),
        layer_stats(catalog),
        width_histogram(catalog, trim_top_percent),
        table_width_histogram(catalog.snapshot),
        trim_top_percent,
        config=dict(config or {}),
    )


STATS_ROWS = (
    ("# tables", "table_count", "# views", "view_count"),
    ("# median table width", "median_table_width", "# median view width", "median_view_width"),
    ("# max table width", "max_table_width", "# max view width", "max_view_width"),
    ("# columns", "column_count", "# original columns", "original_columns_used"),
    ("# relations", "relation_count", "# relations", "layer_relation_count"),
)


def stats_table(report: RefinementReport) -> str:
    s, l = asdict(report.schema), asdict(report.layer)
    lines = ["| Original Schema | | Semantic Layer | |", "|---|---:|---|---:|"]
    for left, lkey, right, rkey in STATS_ROWS:
        lines.append(f"| {left} | {s[lkey]} | {right} | {l[rkey]} |")
    return "\n".join(lines)


def render_report(report: RefinementReport, format: str = "markdown") -> str:
    if format == "json":
        return canonical_json(report.to_dict())
    if format != "markdown":
        raise ValueError(f"unknown report format {format!r}")
    s, l = report.schema, report.layer
    out = ["## Schema refinement", "", stats_table(report), ""]
    out.append(f"- coverage: {format_percent(l.original_columns_used, s.column_count)} "
               f"({l.original_columns_used} of {s.column_count} columns)")
    out.append(f"- coverage (output columns only): {format_percent(l.output_columns_used, s.column_count)} "
               f"({l.output_columns_used} of {s.column_count} columns)")
    out.append(f"- preserved relations: {l.preserved_relations} "
               f"({format_percent(l.preserved_relations, s.relation_count)} of {s.relation_count})")
    out.append(f"- new relations: {l.new_relations}")
    out.append("")
    widths = sorted(set(report.width_histogram) | set(report.table_width_histogram))
    pct = f"{report.trim_top_percent * 100:g}%"
    out.append(f"### Width distribution (widest {pct} of views ignored)")
    out.append("")
    out.append("| width | tables | views |")
    out.append("|---:|---:|---:|")
    for w in widths:
        out.append(f"| {w} | {report.table_width_histogram.get(w, 0)} | {report.width_histogram.get(w, 0)} |")
    return "\n".join(out) + "\n"


def parse_stats_table(markdown: str) -> dict[str, dict[str, int]]:
    """Read the two-column stats table back from rendered Markdown."""
    left, right = {}, {}
    for line in markdown.splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) == 4 and cells[0].startswith("#") and cells[2].startswith("#"):
            left[cells[0]] = int(cells[1])
            right[cells[2]] = int(cells[3])
    return {"schema": left, "layer": right}


def histogram_csv(histogram: Mapping[int, int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["width", "count"])
    for k, v in sorted(histogram.items()):
        w.writerow([k, v])
    return buf.getvalue()
