"""Command-line driver: ingest -> graph -> run -> metrics -> er -> report.

Every artifact lands in the output directory through atomic writes.  In
replay mode the pipeline touches no network and no clock, so two runs give
byte-identical artifacts; only ``manifest.json`` carries a timestamp.

Exit codes: 0 ok, 2 input error, 3 config error, 4 nothing to work on,
5 provider failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sqlite3
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__, fixtures
from ._util import atomic_write, canonical_json, digest_file
from .agent_sim import CampaignConfig, SessionConfig, campaign_manifest_json, run_campaign
from .er_builder import DEFAULT_THRESHOLD, ERModel, cluster_views, embed_views, extract_er, model_from_dict, render_er
from .llm_gateway import ConfigError, Gateway, ProviderConfig, ProviderError, save_transcript
from .metrics import build_report, histogram_csv, render_report, stats_table
from .schema_graph import attach_features, build_graph
from .schema_model import (
    InferenceConfig,
    SchemaError,
    SchemaSnapshot,
    attach_samples,
    connect,
    infer_foreign_keys,
    ingest_ddl,
    introspect_database,
    materialize,
    split_statements,
)
from .view_catalog import Catalog, CatalogError, load as load_catalog, save as save_catalog

log = logging.getLogger("semlayer")

CONFIG_VERSION = "runconfig.v1"
MANIFEST_VERSION = "run_manifest.v1"

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_EMPTY, EXIT_PROVIDER = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


class EmptyInput(Exception):
    pass


@dataclass
class RunConfig:
    database: str | None = None
    ddl: str | None = None
    rows_sql: str | None = None  # optional INSERTs applied after materialising the DDL
    provider: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="fallback"))
    sessions: int = 1
    budget: int = 8
    seed_count: int = 4
    max_turns: int = 12
    cluster_threshold: float = DEFAULT_THRESHOLD
    trim_percent: float = 1.0
    infer_foreign_keys: bool = False
    include_samples: bool = False
    replay_dir: str | None = None
    focus: str = ""
    out: str = "semlayer_out"

    def check(self) -> None:
        if bool(self.database) == bool(self.ddl):
            raise InputError("give exactly one of a database or a DDL file")
        if self.provider.kind == "replay" and not self.replay_dir:
            raise ConfigError("the replay provider needs replay_dir")
        if self.sessions < 1:
            raise ConfigError("sessions must be >= 1")
        if not 0 <= self.trim_percent <= 50:
            raise ConfigError("trim_percent must be within [0, 50]")

    def provider_config(self) -> ProviderConfig:
        if self.provider.kind == "replay":
            return replace(self.provider, transcript_path=self.replay_dir)
        return self.provider

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "provider"}
        d["provider"] = self.provider.to_dict()
        d["version"] = CONFIG_VERSION
        return d


_PATH_KEYS = ("database", "ddl", "rows_sql", "replay_dir", "out")


def load_config(path: str | Path | None, overrides: dict) -> RunConfig:
    """Read a runconfig.v1 JSON file (paths relative to it), then apply flag overrides."""
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise InputError(f"config file not found: {p}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e.msg} at line {e.lineno})")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"{p}: expected version {CONFIG_VERSION!r}, found {doc.get('version')!r}")
        base = p.parent
    doc = {k: v for k, v in doc.items() if k != "version"}
    prov = dict(doc.pop("provider", {}) or {})
    for key in _PATH_KEYS:
        if doc.get(key):
            doc[key] = str((base / doc[key]).resolve()) if not Path(doc[key]).is_absolute() else doc[key]
    if prov.get("transcript_path"):
        prov["transcript_path"] = str((base / prov["transcript_path"]).resolve())
    for key, value in overrides.items():
        if value is None:
            continue
        if key == "provider":
            prov["kind"] = value
        else:
            doc[key] = value
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    prov.setdefault("kind", "fallback")
    if doc.get("replay_dir"):
        prov["transcript_path"] = doc["replay_dir"]
    elif prov.get("transcript_path"):
        doc["replay_dir"] = prov["transcript_path"]
    if prov["kind"] == "replay" and not doc.get("replay_dir"):
        raise ConfigError("the replay provider needs replay_dir")
    try:
        provider = ProviderConfig(**prov)
    except TypeError as e:
        raise ConfigError(f"provider section: {e}")
    cfg = RunConfig(provider=provider, **doc)
    cfg.check()
    return cfg


def fixture_config(name: str, out: str) -> dict:
    """Config overrides for the bundled replay fixtures."""
    if name == "staff_orders":
        return {"ddl": str(fixtures.data_path("staff_orders", "schema.sql")),
                "rows_sql": str(fixtures.data_path("staff_orders", "rows.sql")),
                "replay_dir": str(fixtures.staff_orders_replay_dir()), "provider": "replay", "out": out}
    if name == "braze":
        return {"ddl": str(fixtures.data_path("braze", "schema.sql")),
                "replay_dir": str(fixtures.braze_replay_dir()), "provider": "replay", "out": out}
    raise InputError(f"unknown fixture {name!r}")


# --------------------------------------------------------------------------- pipeline steps


class Pipeline:
    ARTIFACTS = {
        "snapshot": "snapshot.json",
        "graph": "graph.json",
        "catalog": "catalog.json",
        "campaign": "campaign.json",
        "report": "refinement_report.json",
        "report_md": "refinement_report.md",
        "widths": "view_widths.csv",
        "er_model": "er_model.json",
        "er_md": "er_model.md",
        "er_dot": "er_model.dot",
        "summary": "summary.md",
    }

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self._gateway: Gateway | None = None

    def path(self, key: str) -> Path:
        return self.out / self.ARTIFACTS[key]

    @property
    def gateway(self) -> Gateway:
        if self._gateway is None:
            self._gateway = Gateway.from_config(self.config.provider_config())
        return self._gateway

    def write(self, key: str, text: str) -> Path:
        return atomic_write(self.path(key), text)

    # -- ingest
    def snapshot(self) -> SchemaSnapshot:
        cfg = self.config
        try:
            if cfg.ddl:
                snap = ingest_ddl(Path(cfg.ddl).read_text())
            else:
                if not Path(cfg.database).exists():
                    raise InputError(f"database not found: {cfg.database}")
                db = connect(cfg.database)
                try:
                    snap = introspect_database(db)
                    if cfg.include_samples:
                        snap = attach_samples(snap, db)
                finally:
                    db.close()
        except FileNotFoundError as e:
            raise InputError(f"file not found: {e.filename}")
        except SchemaError as e:
            raise InputError(str(e))
        if cfg.infer_foreign_keys:
            snap = snap.with_foreign_keys(infer_foreign_keys(snap, InferenceConfig()))
        return snap

    def ingest(self) -> SchemaSnapshot:
        snap = self.snapshot()
        self.write("snapshot", snap.to_json())
        return snap

    def load_snapshot(self) -> SchemaSnapshot:
        p = self.path("snapshot")
        return SchemaSnapshot.from_json(p.read_text()) if p.exists() else self.ingest()

    # -- graph
    def graph(self, snap: SchemaSnapshot):
        g = attach_features(build_graph(snap), self.gateway.embedder, snap)
        self.write("graph", g.to_json())
        atomic_write(self.out / "graph.dot", g.to_dot())
        return g

    # -- working database (views are created here, never in the user's file)
    def work_db(self, snap: SchemaSnapshot) -> sqlite3.Connection:
        path = self.out / "work.sqlite"
        self.out.mkdir(parents=True, exist_ok=True)
        if path.exists():
            path.unlink()
        db = connect(path)
        if self.config.database:
            src = sqlite3.connect(self.config.database)
            try:
                src.backup(db)
            finally:
                src.close()
        else:
            materialize(snap, db)
            if self.config.rows_sql:
                try:
                    for stmt in split_statements(Path(self.config.rows_sql).read_text()):
                        db.execute(stmt)
                except (FileNotFoundError, sqlite3.Error) as e:
                    raise InputError(f"rows_sql: {e}")
        return db

    # -- campaign
    def run(self) -> tuple[Catalog, list]:
        cfg = self.config
        if cfg.provider.kind == "fallback":
            raise ConfigError("the fallback provider cannot chat; use replay or remote to run sessions")
        gateway = self.gateway
        snap = self.ingest()
        g = self.graph(snap)
        db = self.work_db(snap)
        try:
            campaign = CampaignConfig(cfg.budget, cfg.seed_count,
                                      SessionConfig(max_turns=cfg.max_turns, include_samples=cfg.include_samples),
                                      cfg.focus)
            catalog, memory, outcomes = run_campaign(snap, g, cfg.sessions, gateway, db, campaign)
        finally:
            db.close()
        for o in outcomes:
            save_transcript(o.transcript, self.out / "sessions" / f"{o.session_id}.jsonl")
        save_catalog(catalog, self.path("catalog"))
        self.write("campaign", campaign_manifest_json(outcomes, catalog, memory))
        return catalog, outcomes

    def load_catalog(self) -> Catalog:
        p = self.path("catalog")
        if not p.exists():
            raise InputError(f"no catalog at {p}; run the 'run' command first")
        try:
            return load_catalog(p)
        except (CatalogError, ValueError, KeyError) as e:
            raise InputError(f"{p}: {e}")

    # -- metrics
    def metrics(self):
        catalog = self.load_catalog()
        report = build_report(catalog, self.config.trim_percent / 100, config={"trim_percent": self.config.trim_percent})
        self.write("report", render_report(report, "json"))
        self.write("report_md", render_report(report, "markdown"))
        self.write("widths", histogram_csv(report.width_histogram))
        return report

    # -- ER
    def er(self) -> ERModel:
        catalog = self.load_catalog()
        if len(catalog) == 0:
            raise EmptyInput("the catalog is empty; nothing to model")
        if self.config.provider.kind == "fallback":
            raise ConfigError("the fallback provider cannot chat; use replay or remote for ER extraction")
        gateway = self.gateway
        clusters = cluster_views(embed_views(catalog, gateway), self.config.cluster_threshold)
        model = extract_er(clusters, catalog, gateway.for_session("er"))
        save_transcript(model.transcript, self.out / "sessions" / "er.jsonl")
        self.write("er_model", model.to_json())
        self.write("er_md", render_er(model, "markdown"))
        self.write("er_dot", render_er(model, "dot"))
        return model

    # -- combined report
    def report(self) -> str:
        report = self.metrics()
        parts = ["# Semantic layer report", "", render_report(report, "markdown").strip(), ""]
        p = self.path("er_model")
        if p.exists():
            model = model_from_dict(json.loads(p.read_text()))
            parts += ["## Entities and relationships", "", render_er(model, "markdown").strip(), ""]
        else:
            parts += ["## Entities and relationships", "", "(no ER model; run the 'er' command)", ""]
        text = "\n".join(parts)
        self.write("summary", text)
        return text

    # -- manifest
    def manifest(self) -> dict:
        artifacts = {}
        for key, name in self.ARTIFACTS.items():
            p = self.out / name
            if p.exists():
                artifacts[key] = {"path": name, "sha256": digest_file(p)}
        sessions = self.out / "sessions"
        if sessions.is_dir():
            for p in sorted(sessions.glob("*.jsonl")):
                artifacts[f"session:{p.stem}"] = {"path": f"sessions/{p.name}", "sha256": digest_file(p)}
        doc = {
            "version": MANIFEST_VERSION,
            "tool_version": __version__,
            "config": self.config.to_dict(),
            "artifacts": artifacts,
            "created_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        atomic_write(self.out / "manifest.json", canonical_json(doc))
        return doc


def artifact_digests(out: str | Path) -> dict[str, str]:
    """sha256 of every artifact listed in a run manifest."""
    doc = json.loads((Path(out) / "manifest.json").read_text())
    return {k: v["sha256"] for k, v in doc["artifacts"].items()}


def full_pipeline(config: RunConfig) -> dict:
    pipe = Pipeline(config)
    pipe.run()
    pipe.metrics()
    pipe.er()
    pipe.report()
    return pipe.manifest()


# --------------------------------------------------------------------------- commands


def cmd_ingest(config: RunConfig) -> int:
    """Introspect the database or DDL into a schema snapshot."""
    pipe = Pipeline(config)
    snap = pipe.ingest()
    pipe.manifest()
    print(f"snapshot: {len(snap.tables)} tables, {snap.column_count} columns -> {pipe.path('snapshot')}")
    return EXIT_OK


def cmd_graph(config: RunConfig) -> int:
    """Build the foreign-key schema graph with table embeddings."""
    pipe = Pipeline(config)
    g = pipe.graph(pipe.load_snapshot())
    pipe.manifest()
    print(f"graph: {len(g.nodes)} nodes, {len(g.edges)} edges -> {pipe.path('graph')}")
    return EXIT_OK


def cmd_run(config: RunConfig) -> int:
    """Run the agent sessions and validate proposed views into the catalog."""
    pipe = Pipeline(config)
    catalog, outcomes = pipe.run()
    pipe.manifest()
    for o in outcomes:
        print(f"{o.session_id}: {o.termination_reason}, {len(o.validated_views)} view(s) validated")
    print(f"catalog: {len(catalog)} view(s) -> {pipe.path('catalog')}")
    if outcomes and all(o.termination_reason == "provider-error" for o in outcomes):
        print("error: every session failed at the provider: " + outcomes[0].error, file=sys.stderr)
        return EXIT_PROVIDER
    return EXIT_OK


def cmd_metrics(config: RunConfig) -> int:
    """Score the view catalog against the schema."""
    pipe = Pipeline(config)
    report = pipe.metrics()
    pipe.manifest()
    print(stats_table(report))
    return EXIT_OK


def cmd_er(config: RunConfig) -> int:
    """Cluster views and extract an entity-relationship model."""
    pipe = Pipeline(config)
    model = pipe.er()
    pipe.manifest()
    print(render_er(model, "markdown"), end="")
    return EXIT_OK


def cmd_report(config: RunConfig) -> int:
    """Write the summary report from the stored artifacts."""
    pipe = Pipeline(config)
    pipe.report()
    pipe.manifest()
    print(f"report -> {pipe.path('summary')}")
    return EXIT_OK


def cmd_replay_check(config: RunConfig) -> int:
    """Run the whole pipeline twice in scratch directories and compare artifact digests."""
    if config.provider.kind != "replay":
        raise ConfigError("replay-check needs the replay provider")
    digests = []
    with tempfile.TemporaryDirectory() as tmp:
        for k in (1, 2):
            full_pipeline(replace(config, out=str(Path(tmp) / f"run{k}")))
            digests.append(artifact_digests(Path(tmp) / f"run{k}"))
    differ = sorted(k for k in set(digests[0]) | set(digests[1]) if digests[0].get(k) != digests[1].get(k))
    for key in sorted(digests[0]):
        print(f"{'DIFF' if key in differ else 'same'}  {key}  {digests[0][key][:16]}")
    if differ:
        print(f"replay is not deterministic: {', '.join(differ)}", file=sys.stderr)
        return 1
    print("replay deterministic: all artifacts byte-identical")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "graph": cmd_graph,
    "run": cmd_run,
    "metrics": cmd_metrics,
    "er": cmd_er,
    "report": cmd_report,
    "replay-check": cmd_replay_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semlayer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="runconfig.v1 JSON file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--provider", choices=["remote", "replay", "fallback"])
    common.add_argument("--database", help="SQLite database file (introspected, never modified)")
    common.add_argument("--ddl", help="file of CREATE TABLE statements")
    common.add_argument("--replay-dir", dest="replay_dir", help="directory of <session>.jsonl transcripts")
    common.add_argument("--sessions", type=int, help="number of agent sessions")
    common.add_argument("--budget", type=int, help="max tables per session scope")
    common.add_argument("--trim-percent", dest="trim_percent", type=float, help="widest views dropped from histograms")
    common.add_argument("--focus", help="theme text that fixes every session's table scope")
    common.add_argument("--fixture", choices=["staff_orders", "braze"], help="use a bundled replay fixture")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in
                 ("out", "provider", "database", "ddl", "replay_dir", "sessions", "budget", "trim_percent", "focus")}
    try:
        if args.fixture:
            fx = fixture_config(args.fixture, args.out or "semlayer_out")
            overrides = {**fx, **{k: v for k, v in overrides.items() if v is not None}}
        config = load_config(args.config, overrides)
        return COMMANDS[args.command](config)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptyInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except ProviderError as e:
        print(f"provider error: {e}", file=sys.stderr)
        return EXIT_PROVIDER


if __name__ == "__main__":
    sys.exit(main())
