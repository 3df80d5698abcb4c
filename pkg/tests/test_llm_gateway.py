import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semlayer.fixtures import braze_replay_dir, staff_orders_replay_dir
from semlayer.llm_gateway import (
    ChatMessage,
    ConfigError,
    Gateway,
    HashingEmbedder,
    ProviderConfig,
    ProviderError,
    RemoteProvider,
    ReplayExhausted,
    ReplayProvider,
    ReplaySpeakerMismatch,
    ScriptedTranscript,
    ToolCall,
    TranscriptError,
    dump_transcript,
    load_transcript,
    save_transcript,
)


class StubServer:
    """Local HTTP server replaying a list of (status, body) answers."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((self.path, dict(self.headers), body))
                status, payload = stub.answers.pop(0) if stub.answers else (500, {"error": "none left"})
                data = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def chat_answer(content="", tool_call=None):
    msg = {"role": "assistant", "content": content}
    if tool_call:
        msg["tool_calls"] = [{"id": "c1", "type": "function", "function": tool_call}]
    return 200, {"choices": [{"message": msg}]}


def remote_config(url, **kw):
    return ProviderConfig(kind="remote", endpoint=url, model="m", api_key_env="SEMLAYER_TEST_KEY",
                          backoff=0.01, **kw)


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("SEMLAYER_TEST_KEY", "secret-key")


# -- transcripts


def test_braze_transcript_loads():
    t = load_transcript(braze_replay_dir() / "session_1.jsonl")
    roles = [m.role for m in t.turns]
    assert roles[0] == "analyst" and roles[-1] == "tool"
    call = t.turns[-2].tool_call
    assert call.name == "materialize_view_tool"
    assert call.call_id == "call_4dz4c1irNRJiOdrijI2qkmB7"
    assert [d.startswith("CREATE VIEW") for d in call.arguments["view_definitions"]] == [True] * 3


def test_transcript_round_trip(tmp_path):
    t = load_transcript(staff_orders_replay_dir() / "session_1.jsonl")
    out = save_transcript(t.turns, tmp_path / "x.jsonl")
    assert load_transcript(out).turns == t.turns
    assert out.read_text() == dump_transcript(t.turns)


def test_transcript_errors_name_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"speaker": "analyst", "content": "hi"}\n{"speaker": "robot", "content": "x"}\n')
    with pytest.raises(TranscriptError, match=":2:.*robot"):
        load_transcript(p)
    p.write_text("{not json\n")
    with pytest.raises(TranscriptError, match=":1:"):
        load_transcript(p)


def test_tool_message_needs_payload():
    with pytest.raises(ValueError):
        ChatMessage("tool", "x")


@settings(max_examples=50)
@given(st.lists(st.tuples(st.sampled_from(["analyst", "critic", "verifier", "system"]), st.text()), max_size=8))
def test_dump_load_identity(tmp_path_factory, turns):
    msgs = [ChatMessage(r, c) for r, c in turns]
    msgs.append(ChatMessage("verifier", "", ToolCall("materialize_view_tool", {"view_definitions": "x"}, "id")))
    msgs.append(ChatMessage("tool", "", tool_result=("ok",)))
    p = tmp_path_factory.mktemp("t") / "t.jsonl"
    save_transcript(msgs, p)
    assert load_transcript(p).turns == msgs


# -- replay


def test_replay_serves_in_order():
    t = ScriptedTranscript([ChatMessage("analyst", "a"), ChatMessage("critic", "b")])
    p = ReplayProvider(t)
    assert p.chat([], "analyst").content == "a"
    with pytest.raises(ReplaySpeakerMismatch, match="critic"):
        p.chat([], "verifier")
    assert p.chat([], "critic").content == "b"
    with pytest.raises(ReplayExhausted):
        p.chat([], "analyst")


def test_replay_tool_result():
    p = ReplayProvider(ScriptedTranscript([ChatMessage("tool", "", tool_result=("ok",))]))
    assert p.take_tool_result().tool_result == ("ok",)
    assert p.take_tool_result() is None


def test_replay_config_needs_path():
    with pytest.raises(ConfigError):
        ProviderConfig(kind="replay")


def test_session_gateways_read_directory():
    g = Gateway.from_config(ProviderConfig(kind="replay", transcript_path=str(braze_replay_dir())))
    s = g.for_session("session_1")
    assert s.chat([], "analyst").content
    empty = g.for_session("session_99")
    with pytest.raises(ReplayExhausted):
        empty.chat([], "analyst")


def test_fallback_gateway_cannot_chat():
    g = Gateway.from_config(ProviderConfig(kind="fallback"))
    with pytest.raises(ProviderError):
        g.chat([], "analyst")
    assert g.embed(["x"])[0].shape == (256,)


# -- fallback embeddings


def test_fallback_is_deterministic_and_normalised():
    a, b = HashingEmbedder().embed(["customer orders", "customer orders"])
    assert np.array_equal(a, b)
    assert np.isclose(np.linalg.norm(a), 1.0)


def test_fallback_dimension_and_empty_batch():
    assert HashingEmbedder(dim=32).embed(["ab"])[0].shape == (32,)
    with pytest.raises(ValueError):
        HashingEmbedder().embed([])


def test_fallback_similarity_tracks_overlap():
    e = HashingEmbedder()
    base, near, far = e.embed(["users_messages_email_send", "users_messages_email_open", "zq9 kx7 vw"])
    assert base @ near > base @ far


@settings(max_examples=100)
@given(st.text(max_size=40))
def test_fallback_unit_norm_property(text):
    v = HashingEmbedder(dim=64).embed([text])[0]
    assert np.isfinite(v).all() and np.isclose(np.linalg.norm(v), 1.0)


# -- remote over a local stub server


def test_remote_without_key_is_config_error(monkeypatch):
    monkeypatch.delenv("SEMLAYER_TEST_KEY", raising=False)
    with pytest.raises(ConfigError, match="SEMLAYER_TEST_KEY"):
        RemoteProvider(remote_config("http://127.0.0.1:9"))


def test_remote_config_requires_endpoint():
    with pytest.raises(ConfigError):
        ProviderConfig(kind="remote")


def test_remote_chat_and_wire_format(api_key):
    with StubServer([chat_answer("hello")]) as srv:
        p = RemoteProvider(remote_config(srv.url))
        hist = [ChatMessage("critic", "task"), ChatMessage("analyst", "earlier")]
        msg = p.chat(hist, "analyst", system_prompt="be useful")
    assert msg == ChatMessage("analyst", "hello")
    path, headers, body = srv.requests[0]
    assert path == "/v1/chat/completions"
    assert headers["Authorization"] == "Bearer secret-key"
    assert [m["role"] for m in body["messages"]] == ["system", "user", "assistant", "user"]
    assert body["temperature"] == 0.0


def test_remote_tool_call(api_key):
    fn = {"name": "materialize_view_tool", "arguments": json.dumps({"view_definitions": "CREATE VIEW v AS SELECT 1"})}
    with StubServer([chat_answer(tool_call=fn)]) as srv:
        msg = RemoteProvider(remote_config(srv.url)).chat([], "verifier", tools=[{"type": "function"}])
    assert msg.tool_call == ToolCall("materialize_view_tool", {"view_definitions": "CREATE VIEW v AS SELECT 1"}, "c1")
    assert srv.requests[0][2]["tools"] == [{"type": "function"}]


def test_remote_retries_server_errors(api_key):
    with StubServer([(500, {}), (503, {}), chat_answer("third time")]) as srv:
        p = RemoteProvider(remote_config(srv.url, max_retries=3))
        assert p.chat([], "critic").content == "third time"
    assert p.attempts == 3


def test_remote_gives_up_after_bounded_retries(api_key):
    with StubServer([(500, {})] * 10) as srv:
        p = RemoteProvider(remote_config(srv.url, max_retries=2))
        with pytest.raises(ProviderError, match="3 attempt"):
            p.chat([], "critic")
    assert len(srv.requests) == 3


def test_remote_client_error_not_retried(api_key):
    with StubServer([(401, {"error": "bad key"}), chat_answer("never")]) as srv:
        p = RemoteProvider(remote_config(srv.url))
        with pytest.raises(ProviderError, match="401"):
            p.chat([], "critic")
    assert len(srv.requests) == 1


def test_remote_malformed_answer(api_key):
    with StubServer([(200, {"nothing": True})]) as srv:
        with pytest.raises(ProviderError, match="malformed"):
            RemoteProvider(remote_config(srv.url)).chat([], "critic")


def test_remote_embeddings_sorted_by_index(api_key):
    data = {"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]}
    with StubServer([(200, data)]) as srv:
        vecs = RemoteProvider(remote_config(srv.url, embedding_model="e")).embed(["a", "b"])
    assert [v.tolist() for v in vecs] == [[1.0, 0.0], [0.0, 1.0]]
    assert srv.requests[0][2] == {"model": "e", "input": ["a", "b"]}


def test_config_dict_never_holds_key(api_key):
    d = remote_config("http://x").to_dict()
    assert "secret-key" not in json.dumps(d)
    assert d["api_key_env"] == "SEMLAYER_TEST_KEY"
