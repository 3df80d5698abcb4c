"""Analyst / Critic / Verifier sessions that discover and validate views.

Turn protocol (also enforced on replayed transcripts):

1. the Analyst opens, sharing the scoped schema and asking the Critic for a task;
2. Analyst and Critic alternate; ``CREATE VIEW`` statements in the Analyst's
   ```sql fenced blocks become pending views, other statements are run
   read-only and their outcome is shown to the Critic;
3. once a termination phrase appears (or ``max_turns`` is hit) the Verifier
   calls ``materialize_view_tool`` on the pending views, which creates and
   probes each one in the database.

Sessions run one after another in a campaign and share a :class:`SessionMemory`
so later sessions can reuse earlier views and avoid repeating them.
"""
from __future__ import annotations

import json
import logging
import re
import sqlite3
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from sqlglot.errors import TokenError
import sqlglot
from sqlglot.tokens import TokenType

from ._util import canonical_json, digest_text, fold, quote_ident
from .llm_gateway import (
    MATERIALIZE_TOOL,
    MATERIALIZE_TOOL_SCHEMA,
    ChatMessage,
    Gateway,
    ProviderError,
    ReplayExhausted,
    dump_transcript,
)
from .schema_graph import (
    DEFAULT_BUDGET,
    DEFAULT_SEED_COUNT,
    FocusQuery,
    SchemaGraph,
    SubgraphSample,
    retrieve_subgraph,
    sample_session_scope,
)
from .schema_model import ColumnRef, SchemaSnapshot, schema_wording
from .view_catalog import (
    SUCCESS_TEXT,
    Catalog,
    CatalogEntry,
    CatalogError,
    ViewParseError,
    build_entry,
    parse_view,
    rename_view,
    statement_kind,
    validate_view,
)

log = logging.getLogger(__name__)

CAMPAIGN_VERSION = "campaign.v1"
DEFAULT_MAX_TURNS = 12
DEFAULT_PHRASES = ("goodbye", "terminate")


@dataclass(frozen=True)
class SessionConfig:
    max_turns: int = DEFAULT_MAX_TURNS
    scope: SubgraphSample | None = None
    termination_phrases: tuple[str, ...] = DEFAULT_PHRASES
    verifier_mode: str = "tool"
    session_id: str = "session_1"
    include_samples: bool = False

    def __post_init__(self):
        if self.max_turns < 3:
            raise ValueError("max_turns must allow one turn per role (>= 3)")
        if self.verifier_mode not in ("tool", "inline"):
            raise ValueError(f"unknown verifier mode {self.verifier_mode!r}")


@dataclass
class SessionMemory:
    defined_view_names: list[str] = field(default_factory=list)
    task_summaries: list[str] = field(default_factory=list)
    covered_columns: set[ColumnRef] = field(default_factory=set)
    session_count: int = 0
    scope_counts: dict[str, int] = field(default_factory=dict)

    def knows(self, name: str) -> bool:
        return fold(name) in {fold(n) for n in self.defined_view_names}

    def record(self, outcome: "SessionOutcome") -> None:
        for e in outcome.validated_views:
            if not self.knows(e.name):
                self.defined_view_names.append(e.name)
            self.covered_columns |= set(e.lineage.coverage)
        if outcome.task_summary:
            self.task_summaries.append(outcome.task_summary)
        for t in outcome.scope_tables:
            self.scope_counts[t] = self.scope_counts.get(t, 0) + 1
        self.session_count += 1

    def to_dict(self) -> dict:
        return {
            "defined_view_names": list(self.defined_view_names),
            "task_summaries": list(self.task_summaries),
            "covered_columns": [r.to_dict() for r in sorted(self.covered_columns)],
            "session_count": self.session_count,
            "scope_counts": dict(sorted(self.scope_counts.items())),
        }


@dataclass
class SessionOutcome:
    session_id: str
    transcript: list[ChatMessage] = field(default_factory=list)
    proposed_views: list[str] = field(default_factory=list)
    validated_views: list[CatalogEntry] = field(default_factory=list)
    rejected_views: list[tuple[str, str]] = field(default_factory=list)
    termination_reason: str = ""
    tool_results: list[str] = field(default_factory=list)
    query_reports: list[tuple[str, bool, str]] = field(default_factory=list)
    advisories: list[str] = field(default_factory=list)
    scope_tables: list[str] = field(default_factory=list)
    task_summary: str = ""
    error: str = ""

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "scope": list(self.scope_tables),
            "termination_reason": self.termination_reason,
            "proposed": len(self.proposed_views),
            "validated": [e.name for e in self.validated_views],
            "rejected": [{"sql": s, "error": err} for s, err in self.rejected_views],
            "advisories": list(self.advisories),
            "error": self.error,
            "transcript_digest": digest_text(dump_transcript(self.transcript)),
        }


# --------------------------------------------------------------------------- message handling


_FENCE = re.compile(r"```[ \t]*sql[^\n]*\n(.*?)```", re.IGNORECASE | re.DOTALL)


def _split_keep_comments(block: str) -> list[str]:
    try:
        tokens = sqlglot.Dialect.get_or_raise("sqlite").tokenize(block)
    except TokenError:
        return [p.strip() for p in block.split(";") if p.strip()]
    out, start, has_code = [], 0, False
    for tok in tokens:
        if tok.token_type == TokenType.SEMICOLON:
            if has_code:
                out.append(block[start:tok.start].strip())
            start, has_code = tok.end + 1, False
        else:
            has_code = True
    if has_code:
        out.append(block[start:].strip())
    return out


def extract_sql_blocks(message: ChatMessage | str) -> list[str]:
    """Statements inside ```sql fenced blocks, split on top-level semicolons."""
    text = message.content if isinstance(message, ChatMessage) else message
    out = []
    for block in _FENCE.findall(text or ""):
        out.extend(_split_keep_comments(block))
    return out


def detect_termination(message: ChatMessage | str, phrases: Iterable[str] = DEFAULT_PHRASES) -> bool:
    text = message.content if isinstance(message, ChatMessage) else message
    if not text:
        return False
    return any(re.search(rf"\b{re.escape(p)}\b", text, re.IGNORECASE) for p in phrases if p)


ROLE_DUTIES = {
    "analyst": (
        "You are the Analyst. You implement analytics tasks by writing SQL queries over the "
        "database and then define intermediate database views that refine these queries. "
        "Start complex queries, then express them more simply by moving distinct parts of the "
        "query logic (entities, derived properties, relationships) into views. "
        "Write every SQL statement inside a ```sql fenced block and define views with CREATE VIEW."
    ),
    "critic": (
        "You are the Critic. You review the Analyst's queries and views to make sure they are "
        "optimized with respect to query refinement. Offer suggestions for improvement, propose "
        "alternative formulations, and suggest how a query can be decomposed into smaller, reusable "
        "views with descriptive column names. When the views are satisfactory, reply with "
        "'Great job. Goodbye.'"
    ),
    "verifier": (
        "You are the Verifier. You validate the views by execution within the database engine. "
        f"Call the {MATERIALIZE_TOOL} tool with a JSON argument {{\"view_definitions\": [...]}} "
        "listing every CREATE VIEW statement the Analyst defined in this conversation, one per item."
    ),
}


def render_prompt(role: str, scope_wording: str, memory: SessionMemory | None = None) -> str:
    """System prompt for one role."""
    if role not in ROLE_DUTIES:
        raise ValueError(f"no prompt for role {role!r}")
    parts = [ROLE_DUTIES[role]]
    if role == "analyst":
        parts.append("Open the conversation by sharing the schema below with the Critic and asking "
                     "for an analysis task.")
    if role in ("analyst", "critic"):
        parts.append("Database schema:\n" + scope_wording.rstrip())
    if memory is not None and memory.defined_view_names:
        parts.append(
            "Views defined in earlier sessions (reuse them in new queries; do not define the same "
            "views again):\n" + "\n".join(f"  - {n}" for n in memory.defined_view_names))
    if memory is not None and memory.task_summaries and role != "verifier":
        parts.append("Tasks already explored (pick something different):\n"
                     + "\n".join(f"  - {t}" for t in memory.task_summaries))
    return "\n\n".join(parts) + "\n"


def _first_sentence(text: str, limit: int = 200) -> str:
    text = " ".join(text.split())
    m = re.match(r"(.+?[.!?])(\s|$)", text)
    s = m.group(1) if m else text
    return s[:limit]


def protocol_violations(messages: Sequence[ChatMessage]) -> list[str]:
    """Deviations from: analyst, then alternating critic/analyst, then verifier + tool result."""
    problems = []
    roles = [m.role for m in messages]
    i = 0
    expected = "analyst"
    while i < len(roles) and roles[i] in ("analyst", "critic"):
        if roles[i] != expected:
            problems.append(f"turn {i}: expected {expected}, got {roles[i]}")
        expected = "critic" if roles[i] == "analyst" else "analyst"
        i += 1
    if i < len(roles):
        if roles[i] != "verifier":
            problems.append(f"turn {i}: expected verifier, got {roles[i]}")
        i += 1
        if i < len(roles) and roles[i] == "tool":
            i += 1
        if i < len(roles):
            problems.append(f"turn {i}: unexpected {roles[i]} after the verifier phase")
    return problems


def _run_query(db: sqlite3.Connection, sql: str, limit: int = 5, pending: Sequence[str] = ()) -> tuple[bool, str]:
    """Run a read-only query; views proposed earlier in the session are visible but rolled back."""
    db.execute("SAVEPOINT analyst_query")
    for view_sql in pending:
        try:
            db.execute(view_sql)
        except sqlite3.Error:
            pass
    db.execute("PRAGMA query_only = 1")
    try:
        rows = db.execute(sql).fetchmany(limit)
        return True, f"{len(rows)} row(s): {rows}"
    except sqlite3.Error as e:
        return False, str(e)
    finally:
        db.execute("PRAGMA query_only = 0")
        db.execute("ROLLBACK TO analyst_query")
        db.execute("RELEASE analyst_query")


def _query_note(reports: Sequence[tuple[str, bool, str]]) -> ChatMessage:
    lines = ["Execution results of the Analyst's queries:"]
    for sql, ok, msg in reports:
        lines.append(f"- {'ok' if ok else 'error'}: {msg} <- {' '.join(sql.split())[:120]}")
    return ChatMessage("system", "\n".join(lines))


# --------------------------------------------------------------------------- sessions


def _materialize(definitions: Sequence[str], db: sqlite3.Connection, catalog: Catalog, memory: SessionMemory,
                 outcome: SessionOutcome, session_id: str) -> list[str]:
    results = []
    taken: list[str] = list(memory.defined_view_names)
    for raw in definitions:
        sql = raw.strip().rstrip(";").strip()
        try:
            name = parse_view(sql).name
        except ViewParseError:
            name = None
        if name is not None:
            fresh = catalog.fresh_name(name, taken)
            if fresh != name:
                sql = rename_view(sql, fresh)
                outcome.advisories.append(f"view {name} already exists; defined as {fresh}")
                name = fresh
            taken.append(name)
        outcome.proposed_views.append(sql)
        record = validate_view(db, sql)
        if not record.passed:
            outcome.rejected_views.append((sql, record.error))
            results.append(record.error)
            continue
        try:
            entry = build_entry(db, sql, catalog, session_id, replace(record, sequence=len(catalog) + 1))
            catalog.register(entry)
        except CatalogError as e:
            db.execute(f"DROP VIEW IF EXISTS {quote_ident(name)}")
            outcome.rejected_views.append((sql, f"lineage: {e}"))
            results.append(f"lineage: {e}")
            continue
        outcome.validated_views.append(entry)
        results.append(SUCCESS_TEXT)
    return results


def run_session(config: SessionConfig, memory: SessionMemory, gateway: Gateway, db: sqlite3.Connection,
                catalog: Catalog) -> SessionOutcome:
    """Run one conversation and register every view that validates.

    ``memory`` is updated in place.  Provider failures end the conversation
    early; the outcome records why.
    """
    snapshot = catalog.snapshot
    scope = config.scope.sorted_tables if config.scope is not None else snapshot.table_names
    wording = schema_wording(snapshot, scope, include_samples=config.include_samples)
    prompts = {r: render_prompt(r, wording, memory) for r in ROLE_DUTIES}
    outcome = SessionOutcome(config.session_id, scope_tables=list(scope))

    pending: dict[str, str] = {}
    unnamed: list[str] = []
    reports: list[tuple[str, bool, str]] = []
    speaker = "analyst"
    reason = "turn-limit"
    turns = 0
    while turns < config.max_turns:
        history = list(outcome.transcript)
        if speaker == "critic" and reports:
            history.append(_query_note(reports))
            reports = []
        try:
            msg = gateway.chat(history, speaker, system_prompt=prompts[speaker])
        except ReplayExhausted:
            reason = "exhausted"
            break
        except ProviderError as e:
            outcome.error = str(e)
            reason = "provider-error"
            break
        outcome.transcript.append(msg)
        turns += 1
        if speaker == "analyst":
            for stmt in extract_sql_blocks(msg):
                kind = statement_kind(stmt)
                if kind == "view":
                    pending[fold(parse_view(stmt).name)] = stmt
                elif kind == "query":
                    ok, text = _run_query(db, stmt, pending=list(pending.values()))
                    reports.append((stmt, ok, text))
                    outcome.query_reports.append((stmt, ok, text))
                elif re.match(r"\s*(--[^\n]*\n\s*)*create\s+view", stmt, re.IGNORECASE):
                    unnamed.append(stmt)  # unparseable view: let the engine reject it
        elif speaker == "critic" and not outcome.task_summary:
            outcome.task_summary = _first_sentence(msg.content)
        if detect_termination(msg, config.termination_phrases):
            reason = "phrase"
            break
        speaker = "critic" if speaker == "analyst" else "analyst"

    outcome.termination_reason = reason
    if reason == "provider-error":
        memory.record(outcome)
        return outcome

    definitions = list(pending.values()) + unnamed
    if config.verifier_mode == "tool" and reason != "exhausted":
        try:
            vmsg = gateway.chat(outcome.transcript, "verifier", system_prompt=prompts["verifier"],
                                tools=[MATERIALIZE_TOOL_SCHEMA])
        except ReplayExhausted:
            vmsg = None
        except ProviderError as e:
            outcome.error = str(e)
            outcome.termination_reason = "provider-error"
            memory.record(outcome)
            return outcome
        if vmsg is not None:
            outcome.transcript.append(vmsg)
            call = vmsg.tool_call
            if call is not None and call.name == MATERIALIZE_TOOL:
                definitions = [str(d) for d in call.arguments.get("view_definitions", [])]
            elif call is not None:
                outcome.advisories.append(f"verifier called unknown tool {call.name!r}; validated pending views")

    results = _materialize(definitions, db, catalog, memory, outcome, config.session_id)
    outcome.tool_results = results
    if outcome.transcript and outcome.transcript[-1].role == "verifier":
        recorded = gateway.take_tool_result()
        if recorded is not None and list(recorded.tool_result or ()) != results:
            outcome.advisories.append("recorded tool response differs from this run's results")
        outcome.transcript.append(ChatMessage("tool", json.dumps(results), tool_result=tuple(results)))
    memory.record(outcome)
    return outcome


# --------------------------------------------------------------------------- campaigns


@dataclass(frozen=True)
class CampaignConfig:
    budget: int = DEFAULT_BUDGET
    seed_count: int = DEFAULT_SEED_COUNT
    session: SessionConfig = SessionConfig()
    focus: str = ""  # fixed theme for every session instead of the coverage-gap default


def run_campaign(snapshot: SchemaSnapshot, graph: SchemaGraph, n_sessions: int, gateway: Gateway,
                 db: sqlite3.Connection, config: CampaignConfig = CampaignConfig(),
                 catalog: Catalog | None = None, memory: SessionMemory | None = None
                 ) -> tuple[Catalog, SessionMemory, list[SessionOutcome]]:
    """Run ``n_sessions`` sessions in order, threading memory and the catalog through them."""
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    catalog = catalog if catalog is not None else Catalog(snapshot)
    memory = memory if memory is not None else SessionMemory()
    outcomes = []
    for k in range(1, n_sessions + 1):
        session_id = f"session_{k}"
        if config.focus:
            query = FocusQuery(config.focus, gateway.embedder.embed([config.focus])[0])
            scope = retrieve_subgraph(graph, query, config.budget, config.seed_count)
        else:
            scope = sample_session_scope(graph, memory, config.budget, config.seed_count)
        cfg = replace(config.session, scope=scope, session_id=session_id)
        try:
            outcome = run_session(cfg, memory, gateway.for_session(session_id), db, catalog)
        except Exception as e:  # a broken session must not end the campaign
            log.exception("session %s failed", session_id)
            outcome = SessionOutcome(session_id, termination_reason="provider-error", error=str(e),
                                     scope_tables=scope.sorted_tables)
            memory.record(outcome)
        outcomes.append(outcome)
    return catalog, memory, outcomes


def campaign_manifest(outcomes: Sequence[SessionOutcome], catalog: Catalog, memory: SessionMemory) -> dict:
    return {
        "version": CAMPAIGN_VERSION,
        "sessions": [o.summary() for o in outcomes],
        "catalog_digest": digest_text(catalog.to_json()),
        "memory": memory.to_dict(),
    }


def campaign_manifest_json(outcomes: Sequence[SessionOutcome], catalog: Catalog, memory: SessionMemory) -> str:
    return canonical_json(campaign_manifest(outcomes, catalog, memory))
