"""Chat and embedding providers.

Three interchangeable backends:

* ``remote``   -- any OpenAI-compatible ``/chat/completions`` + ``/embeddings`` endpoint
* ``replay``   -- serves a recorded transcript turn by turn (hermetic runs and tests)
* ``fallback`` -- embeddings only; character 3-gram hashing, fully deterministic
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import httpx
import numpy as np

from ._util import atomic_write

log = logging.getLogger(__name__)

ROLES = ("system", "analyst", "critic", "verifier", "tool")
TRANSCRIPT_VERSION = "transcript.v1"
MATERIALIZE_TOOL = "materialize_view_tool"
FALLBACK_DIM = 256
FALLBACK_SEED = 0x5EED

MATERIALIZE_TOOL_SCHEMA = {
    "type": "function",
    "function": {
        "name": MATERIALIZE_TOOL,
        "description": "Create the given views in the database and report, per view, "
                       "whether it was defined successfully.",
        "parameters": {
            "type": "object",
            "properties": {
                "view_definitions": {
                    "type": "array",
                    "items": {"type": "string"},
                    "description": "CREATE VIEW statements, one per item.",
                }
            },
            "required": ["view_definitions"],
        },
    },
}


class ProviderError(RuntimeError):
    """A provider could not produce a response."""


class ConfigError(ValueError):
    pass


class ReplayExhausted(ProviderError):
    pass


class ReplaySpeakerMismatch(ProviderError):
    pass


class TranscriptError(ValueError):
    pass


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict
    call_id: str = ""

    def to_dict(self) -> dict:
        d = {"name": self.name, "arguments": self.arguments}
        if self.call_id:
            d["id"] = self.call_id
        return d


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    tool_call: ToolCall | None = None
    tool_result: tuple | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "tool" and self.tool_result is None:
            raise ValueError("tool messages must carry a tool_result payload")

    def to_record(self) -> dict:
        rec: dict[str, Any] = {"speaker": self.role, "content": self.content}
        if self.tool_call is not None:
            rec["tool_call"] = self.tool_call.to_dict()
        if self.tool_result is not None:
            rec["tool_result"] = list(self.tool_result)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ChatMessage":
        tc = rec.get("tool_call")
        tool_call = None
        if tc is not None:
            tool_call = ToolCall(tc["name"], dict(tc.get("arguments") or {}), tc.get("id", ""))
        result = rec.get("tool_result")
        return cls(rec["speaker"], rec.get("content", ""), tool_call,
                   tuple(result) if result is not None else None)


# --------------------------------------------------------------------------- transcripts


@dataclass
class ScriptedTranscript:
    turns: list[ChatMessage] = field(default_factory=list)
    cursor: int = 0

    def __len__(self):
        return len(self.turns)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.turns)

    def peek(self) -> ChatMessage | None:
        return None if self.exhausted else self.turns[self.cursor]


def load_transcript(path: str | os.PathLike) -> ScriptedTranscript:
    turns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise TranscriptError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(rec, dict) or "speaker" not in rec:
                raise TranscriptError(f"{path}:{lineno}: missing 'speaker'")
            if rec["speaker"] not in ROLES:
                raise TranscriptError(f"{path}:{lineno}: unknown role {rec['speaker']!r}")
            try:
                turns.append(ChatMessage.from_record(rec))
            except (KeyError, TypeError, ValueError) as e:
                raise TranscriptError(f"{path}:{lineno}: {e}") from e
    return ScriptedTranscript(turns)


def dump_transcript(messages: Iterable[ChatMessage]) -> str:
    return "".join(json.dumps(m.to_record(), ensure_ascii=False, sort_keys=True) + "\n" for m in messages)


def save_transcript(messages: Iterable[ChatMessage], path: str | os.PathLike) -> Path:
    return atomic_write(path, dump_transcript(messages))


# --------------------------------------------------------------------------- config


@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "replay"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0
    backoff: float = 1.0
    transcript_path: str = ""
    embedding: str = "auto"
    embedding_model: str = ""
    embedding_dim: int = FALLBACK_DIM

    def __post_init__(self):
        if self.kind not in ("remote", "replay", "fallback"):
            raise ConfigError(f"unknown provider kind {self.kind!r}")
        if self.kind == "remote" and not (self.endpoint and self.model):
            raise ConfigError("remote provider needs endpoint and model")
        if self.kind == "replay" and not self.transcript_path:
            raise ConfigError("replay provider needs a transcript path")

    @property
    def embedding_kind(self) -> str:
        if self.embedding == "auto":
            return "remote" if self.kind == "remote" else "fallback"
        return self.embedding

    def to_dict(self) -> dict:
        # the key itself is never part of a config, only the variable's name
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# --------------------------------------------------------------------------- providers


class HashingEmbedder:
    """Deterministic bag of hashed character 3-grams, unit-normalised."""

    def __init__(self, dim: int = FALLBACK_DIM, seed: int = FALLBACK_SEED):
        self.dim = dim
        self._key = seed.to_bytes(8, "little")

    def _vector(self, text: str) -> np.ndarray:
        text = text.lower()
        grams = [text[i:i + 3] for i in range(len(text) - 2)] or [text]
        v = np.zeros(self.dim)
        for g in grams:
            h = hashlib.blake2b(g.encode("utf-8"), digest_size=8, key=self._key).digest()
            v[int.from_bytes(h, "little") % self.dim] += 1.0
        return v / np.linalg.norm(v)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        return [self._vector(t) for t in texts]


class ReplayProvider:
    """Serves scripted turns; the requested speaker must match the script."""

    def __init__(self, transcript: ScriptedTranscript):
        self.transcript = transcript

    def chat(self, history: Sequence[ChatMessage], speaker: str, **_) -> ChatMessage:
        turn = self.transcript.peek()
        if turn is None:
            raise ReplayExhausted(f"transcript exhausted after {len(self.transcript)} turns")
        if turn.role != speaker:
            raise ReplaySpeakerMismatch(
                f"turn {self.transcript.cursor}: script has {turn.role!r}, protocol asked for {speaker!r}")
        self.transcript.cursor += 1
        return turn

    def take_tool_result(self) -> ChatMessage | None:
        turn = self.transcript.peek()
        if turn is not None and turn.role == "tool":
            self.transcript.cursor += 1
            return turn
        return None


class RemoteProvider:
    """OpenAI-compatible HTTP client with bounded retries."""

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        key = os.environ.get(config.api_key_env, "")
        if not key:
            raise ConfigError(f"environment variable {config.api_key_env} is not set")
        self.config = config
        self._client = httpx.Client(
            base_url=config.endpoint.rstrip("/"),
            headers={"Authorization": f"Bearer {key}"},
            timeout=config.timeout,
            transport=transport,
        )
        self.attempts = 0

    def _post(self, path: str, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            self.attempts += 1
            try:
                resp = self._client.post(path, json=body)
            except httpx.HTTPError as e:
                last = e
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError as e:
                        last = e
                else:
                    last = ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    if resp.status_code < 500 and resp.status_code != 429:
                        break  # client errors are not retried
            log.warning("request to %s failed (attempt %d): %s", path, attempt + 1, last)
        raise ProviderError(f"{path} failed after {self.attempts} attempt(s): {last}") from last

    @staticmethod
    def _wire_messages(history: Sequence[ChatMessage], speaker: str, system_prompt: str) -> list[dict]:
        msgs = [{"role": "system", "content": system_prompt}] if system_prompt else []
        for m in history:
            if m.role == speaker:
                msgs.append({"role": "assistant", "content": m.content or json.dumps(m.to_record())})
            elif m.role == "tool":
                msgs.append({"role": "user", "content": f"Tool response: {json.dumps(list(m.tool_result))}"})
            else:
                msgs.append({"role": "user", "content": f"{m.role.capitalize()}: {m.content}"})
        if not msgs or msgs[-1]["role"] != "user":
            msgs.append({"role": "user", "content": "Please continue."})
        return msgs

    def chat(self, history: Sequence[ChatMessage], speaker: str, system_prompt: str = "",
             tools: Sequence[dict] | None = None) -> ChatMessage:
        body: dict[str, Any] = {
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": self._wire_messages(history, speaker, system_prompt),
        }
        if tools:
            body["tools"] = list(tools)
        data = self._post("/chat/completions", body)
        try:
            msg = data["choices"][0]["message"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(f"malformed chat response: {str(data)[:200]}") from e
        tool_call = None
        calls = msg.get("tool_calls") or []
        if calls:
            fn = calls[0].get("function", {})
            try:
                args = json.loads(fn.get("arguments") or "{}")
            except json.JSONDecodeError as e:
                raise ProviderError(f"tool call arguments are not JSON: {e}") from e
            tool_call = ToolCall(fn.get("name", ""), args, calls[0].get("id", ""))
        return ChatMessage(speaker, msg.get("content") or "", tool_call)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        if not texts:
            raise ValueError("embed needs at least one text")
        data = self._post("/embeddings", {"model": self.config.embedding_model or self.config.model,
                                          "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            return [np.asarray(d["embedding"], dtype=float) for d in items]
        except (KeyError, TypeError) as e:
            raise ProviderError(f"malformed embedding response: {str(data)[:200]}") from e


class Gateway:
    """Bundles one chat provider and one embedder behind a single object."""

    def __init__(self, chat_provider=None, embedder=None, config: ProviderConfig | None = None):
        self.chat_provider = chat_provider
        self.embedder = embedder or HashingEmbedder()
        self.config = config

    @classmethod
    def from_config(cls, config: ProviderConfig, transport: httpx.BaseTransport | None = None) -> "Gateway":
        remote = RemoteProvider(config, transport) if "remote" in (config.kind, config.embedding_kind) else None
        chat = None
        if config.kind == "remote":
            chat = remote
        elif config.kind == "replay":
            path = Path(config.transcript_path)
            chat = None if path.is_dir() else ReplayProvider(load_transcript(path))
        embedder = remote if config.embedding_kind == "remote" else HashingEmbedder(config.embedding_dim)
        return cls(chat, embedder, config)

    def for_session(self, name: str) -> "Gateway":
        """Gateway for one conversation; replay directories hold one ``<name>.jsonl`` per session."""
        if self.config is not None and self.config.kind == "replay":
            path = Path(self.config.transcript_path)
            if path.is_dir():
                f = path / f"{name}.jsonl"
                transcript = load_transcript(f) if f.exists() else ScriptedTranscript()
                return Gateway(ReplayProvider(transcript), self.embedder, self.config)
        return self

    def chat(self, history: Sequence[ChatMessage], speaker: str, system_prompt: str = "",
             tools: Sequence[dict] | None = None) -> ChatMessage:
        if self.chat_provider is None:
            raise ProviderError("no chat provider configured (the fallback provider only embeds)")
        return self.chat_provider.chat(history, speaker, system_prompt=system_prompt, tools=tools)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self.embedder.embed(texts)

    def take_tool_result(self) -> ChatMessage | None:
        take = getattr(self.chat_provider, "take_tool_result", None)
        return take() if take else None
