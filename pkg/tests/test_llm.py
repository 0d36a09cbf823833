import json
import threading

import httpx
import pytest

from coalneg.llm import (AuthenticationFailed, BackendError, ChatRequest, HttpBackend, HttpProfile,
                         Message, RequestTooLarge, RetriesExhausted, ScriptedBackend, ScriptMiss,
                         TokenBucket, backend_from_spec, complete, prompt_digest)

MSGS = (Message("system", "You are a test."), Message("user", "Say hi."))


def _profile(**kw):
    base = dict(base_url="https://llm.test/v1", api_key="k", model="m-1", max_retries=4,
                backoff_base=0.01, requests_per_second=1e6)
    base.update(kw)
    return HttpProfile(**base)


def _ok(content="hello"):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def _http(handler, **kw):
    sleeps = []
    backend = HttpBackend(_profile(**kw), client=httpx.Client(transport=httpx.MockTransport(handler)),
                          sleep=sleeps.append)
    return backend, sleeps


# -- requests ---------------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest(())
    with pytest.raises(ValueError):
        ChatRequest(MSGS, temperature=2.5)
    with pytest.raises(ValueError):
        ChatRequest(MSGS, max_output_tokens=0)
    with pytest.raises(ValueError):
        Message("tool", "x")


def test_request_defaults():
    r = ChatRequest(MSGS)
    assert (r.temperature, r.seed) == (0.5, 111)


def test_digest_normalizes_whitespace_and_nfc():
    a = prompt_digest([("user", "Café  \r\nline two  ")])
    b = prompt_digest([("user", "Café\nline two")])
    assert a == b
    assert prompt_digest([("user", "x")]) != prompt_digest([("system", "x")])


# -- scripted ----------------------------------------------------------------

def test_scripted_digest_lookup():
    req = ChatRequest(MSGS)
    backend = ScriptedBackend([(req.digest, "pinned"), ("*next*", "queued")])
    assert complete(req, backend).content == "pinned"
    other = ChatRequest((Message("user", "other"),))
    assert backend.complete(other).content == "queued"


def test_scripted_strict_miss_names_digest():
    req = ChatRequest(MSGS)
    backend = ScriptedBackend([("*next*", "never used")], strict=True)
    with pytest.raises(ScriptMiss) as err:
        backend.complete(req)
    assert req.digest in str(err.value)
    assert not backend.sequential


def test_scripted_queue_exhaustion():
    backend = ScriptedBackend.queue(["one"])
    assert backend.sequential and backend.remaining == 1
    assert backend.complete(ChatRequest(MSGS)).content == "one"
    with pytest.raises(ScriptMiss):
        backend.complete(ChatRequest(MSGS))


def test_scripted_bit_determinism(tmp_path):
    req = ChatRequest(MSGS)
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps({"key": req.digest, "response": "exacté text "}) + "\n",
                    encoding="utf-8")
    outs = {ScriptedBackend.from_file(path, strict=True).complete(req).content for _ in range(5)}
    assert outs == {"exacté text "}


def test_script_file_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"key": "*next*"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        ScriptedBackend.from_file(path)


def test_backend_from_spec(tmp_path):
    path = tmp_path / "script.jsonl"
    path.write_text(json.dumps({"key": "*next*", "response": "x"}) + "\n")
    b = backend_from_spec(f"scripted:{path}")
    assert b.backend_id == "scripted:script"
    assert backend_from_spec(f"scripted-strict:{path}").strict
    env = {"COALNEG_LOCAL_BASE_URL": "http://h/v1", "COALNEG_LOCAL_MODEL": "llama"}
    http = backend_from_spec("http:local", env=env)
    assert http.profile.model == "llama" and http.backend_id == "http:local"
    with pytest.raises(ValueError):
        backend_from_spec("carrier-pigeon:x")
    with pytest.raises(ValueError):
        backend_from_spec("scripted")
    with pytest.raises(AuthenticationFailed, match="COALNEG_NOPE_BASE_URL"):
        backend_from_spec("http:nope", env={})


# -- http --------------------------------------------------------------------

def test_http_two_transient_failures_then_success():
    calls = []

    def handler(request):
        calls.append(json.loads(request.content))
        if len(calls) <= 2:
            return httpx.Response(503 if len(calls) == 1 else 429)
        return _ok("third time")

    backend, sleeps = _http(handler)
    resp = backend.complete(ChatRequest(MSGS))
    assert resp.attempt == 3 and resp.content == "third time"
    assert sleeps == [0.01, 0.02]  # exponential backoff
    assert calls[0]["temperature"] == 0.5 and calls[0]["seed"] == 111
    assert calls[0]["model"] == "m-1"
    assert calls[0]["messages"][1] == {"role": "user", "content": "Say hi."}


def test_http_transport_error_is_retried():
    n = {"i": 0}

    def handler(request):
        n["i"] += 1
        if n["i"] == 1:
            raise httpx.ConnectError("refused", request=request)
        return _ok()

    backend, _ = _http(handler)
    assert backend.complete(ChatRequest(MSGS)).attempt == 2


def test_http_retries_exhausted():
    backend, sleeps = _http(lambda r: httpx.Response(500), max_retries=2)
    with pytest.raises(RetriesExhausted, match="3 attempts"):
        backend.complete(ChatRequest(MSGS))
    assert len(sleeps) == 2


@pytest.mark.parametrize("status", [401, 403])
def test_http_auth_failure_not_retried(status):
    calls = []
    backend, _ = _http(lambda r: calls.append(1) or httpx.Response(status))
    with pytest.raises(AuthenticationFailed):
        backend.complete(ChatRequest(MSGS))
    assert len(calls) == 1


def test_http_request_too_large():
    backend, _ = _http(lambda r: httpx.Response(413))
    with pytest.raises(RequestTooLarge):
        backend.complete(ChatRequest(MSGS))
    backend, _ = _http(lambda r: httpx.Response(400, text="maximum context length exceeded"))
    with pytest.raises(RequestTooLarge):
        backend.complete(ChatRequest(MSGS))
    backend, _ = _http(lambda r: httpx.Response(400, text="bad"))
    with pytest.raises(BackendError):
        backend.complete(ChatRequest(MSGS))


def test_http_sends_bearer_token():
    seen = {}

    def handler(request):
        seen.update(request.headers)
        return _ok()

    backend, _ = _http(handler)
    backend.complete(ChatRequest(MSGS))
    assert seen["authorization"] == "Bearer k"


def test_http_concurrency_cap():
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()
    gate = threading.Event()

    def handler(request):
        with lock:
            active["now"] += 1
            active["peak"] = max(active["peak"], active["now"])
        gate.wait(0.05)
        with lock:
            active["now"] -= 1
        return _ok()

    backend, _ = _http(handler, max_concurrency=2)
    threads = [threading.Thread(target=backend.complete, args=(ChatRequest(MSGS),)) for _ in range(6)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert active["peak"] <= 2


def test_token_bucket_waits_when_empty():
    now = {"t": 0.0}
    slept = []

    def sleep(s):
        slept.append(s)
        now["t"] += s

    bucket = TokenBucket(rate=2.0, capacity=2.0, clock=lambda: now["t"], sleep=sleep)
    for _ in range(4):
        bucket.acquire()
    assert slept == [0.5, 0.5]
