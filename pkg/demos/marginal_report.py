"""Refinement statistics on a synthetic schema with the published marginals of the marketing database.

Table widths are solved so the schema has 61 tables, 1770 columns, 27601
intra-table column pairs and a median width of 28.  A random projection layer
is then scored, and the reported arithmetic (preserved share, coverage) is
recomputed from the published counts.

Run with:  python3 demos/marginal_report.py
"""
from semlayer._util import format_percent
from semlayer.metrics import build_report, render_report
from semlayer.synth import braze_marginal_snapshot, synthetic_catalog


def main():
    snap = braze_marginal_snapshot()
    catalog = synthetic_catalog(snap, 1146, seed=0, max_width=8)
    print(render_report(build_report(catalog, trim_top_percent=0.01)))

    print("published counts, recomputed:")
    print(f"  preserved = 22365 - 7229 = {22365 - 7229} -> {format_percent(22365 - 7229, 27601)} of 27601")
    print(f"  coverage 1430 / 1770 -> {format_percent(1430, 1770)}")
    print(f"  coverage 1298 / 6879 -> {format_percent(1298, 6879)} (larger clinical schema)")


if __name__ == "__main__":
    main()
