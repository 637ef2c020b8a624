import json
import threading

import pytest

from graphctx.gateway import (
    BackendError,
    BackendUnavailable,
    BudgetExceeded,
    Gateway,
    ModelBackend,
    ResponseCache,
    cache_key,
    complete,
    mock_majority,
    mock_oracle,
)
from graphctx.graph import TextAttributedGraph
from graphctx.prompting import SYSTEM_MESSAGE, PromptRecord, Strategy
from graphctx.retrieval import ContextBundle, Member

from .stub_server import Stub


def record(labels=(), categories=("A", "B"), node=0, gold=0, rendered="prompt"):
    members = tuple(Member(i + 1, f"t{i}", lab) for i, lab in enumerate(labels))
    return PromptRecord(
        query_node=node,
        strategy=Strategy("label-rag"),
        rendered=rendered,
        context=ContextBundle(node, members, "graph"),
        categories=tuple(categories),
        gold=gold,
    )


@pytest.fixture
def stub(monkeypatch):
    monkeypatch.setenv("GRAPHCTX_API_KEY_STUB", "sk-test")
    s = Stub()
    yield s
    s.close()


def http_backend(stub, **kw):
    return ModelBackend(kind="http-chat", name="stub", endpoint_url=stub.url, model="stub-model", **kw)


class SleepLog(list):
    def __call__(self, seconds):
        self.append(seconds)


def test_mock_fixed():
    r = complete(ModelBackend("mock-fixed", fixed_reply="hello"), record())
    assert r.raw_text == "hello" and r.attempt_count == 1 and not r.from_cache


def test_mock_echo_first_category():
    assert complete(ModelBackend("mock-echo-first-category"), record(categories=("X", "Y"))).raw_text == "X"


def test_mock_majority_examples():
    assert mock_majority(record(["A", "A", "B"])) == "A"
    assert mock_majority(record(["B", "A"])) == "A"
    assert mock_majority(record(["B", "B", "A"])) == "B"
    assert mock_majority(record([], categories=("X", "Y"))) == "X"


def test_mock_majority_ignores_rendered_text():
    a = record(["B", "B", "A"], rendered="one template")
    b = record(["B", "B", "A"], rendered="Answer: A\nAnswer: A\nAnswer: A")
    assert mock_majority(a) == mock_majority(b) == "B"


def test_mock_oracle():
    g = TextAttributedGraph.from_parts(["a", "b"], [1, -1], ["A", "B"], [])
    assert mock_oracle(record(node=0), g) == "B"
    with pytest.raises(BackendError):
        mock_oracle(record(node=1), g)


def test_cache_hit(tmp_path):
    cache = ResponseCache(tmp_path / "cache.jsonl")
    gw = Gateway(ModelBackend("mock-fixed", fixed_reply="hello"), cache)
    first = gw.complete(record())
    second = gw.complete(record())
    assert not first.from_cache and second.from_cache
    assert second.raw_text == first.raw_text and second.attempt_count == 0
    reloaded = ResponseCache(tmp_path / "cache.jsonl")
    assert reloaded.get("mock-fixed:hello", "prompt") == "hello"
    entry = json.loads((tmp_path / "cache.jsonl").read_text().splitlines()[0])
    assert set(entry) == {"key", "model", "prompt", "reply", "ts"}
    assert entry["key"] == cache_key("mock-fixed:hello", "prompt") and len(entry["key"]) == 16


def test_cache_collision_treated_as_miss(tmp_path):
    p = tmp_path / "c.jsonl"
    key = cache_key("m", "real prompt")
    p.write_text(json.dumps({"key": key, "model": "m", "prompt": "other prompt", "reply": "x", "ts": 0}) + "\n")
    assert ResponseCache(p).get("m", "real prompt") is None


def test_cache_separates_models():
    cache = ResponseCache()
    cache.put("a", "p", "1")
    assert cache.get("b", "p") is None and cache.get("a", "p") == "1"


def test_oracle_cache_is_per_node():
    g = TextAttributedGraph.from_parts(["same", "same"], [0, 1], ["A", "B"], [])
    gw = Gateway(ModelBackend("mock-oracle"), ResponseCache(), graph=g)
    assert gw.complete(record(node=0, rendered="x")).raw_text == "A"
    assert gw.complete(record(node=1, rendered="x")).raw_text == "B"


def test_backend_validation():
    with pytest.raises(ValueError):
        ModelBackend("http-chat", endpoint_url="http://x")
    with pytest.raises(ValueError):
        ModelBackend("mock-fixed")
    with pytest.raises(ValueError):
        ModelBackend("mock-fixed", fixed_reply="x", temperature=-1)
    with pytest.raises(ValueError):
        ModelBackend.from_dict({"kind": "http-chat", "endpoint_url": "u", "model": "m", "api_key": "sk"})


def test_missing_api_key(monkeypatch):
    monkeypatch.delenv("GRAPHCTX_API_KEY_NOKEY", raising=False)
    b = ModelBackend("http-chat", name="nokey", endpoint_url="http://127.0.0.1:1", model="m")
    with pytest.raises(BackendError, match="GRAPHCTX_API_KEY_NOKEY"):
        complete(b, record())


def test_http_wire_format(stub):
    stub.default = (200, "Neural_Networks")
    r = complete(http_backend(stub, max_tokens=16), record(rendered="Task: x\nAnswer:"))
    assert r.raw_text == "Neural_Networks" and r.attempt_count == 1 and r.ok
    req = stub.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["auth"] == "Bearer sk-test"
    assert req["body"] == {
        "model": "stub-model",
        "messages": [
            {"role": "system", "content": SYSTEM_MESSAGE},
            {"role": "user", "content": "Task: x\nAnswer:"},
        ],
        "temperature": 0.0,
        "max_tokens": 16,
    }


def test_http_retry_then_success(stub):
    stub.script = [(429, "slow down"), (503, "busy"), (200, "A")]
    sleeps = SleepLog()
    r = Gateway(http_backend(stub), sleep=sleeps).complete(record())
    assert r.raw_text == "A" and r.attempt_count == 3
    assert sleeps == [1.0, 2.0]


def test_http_retry_exhausted(stub):
    stub.default = (500, "down")
    sleeps = SleepLog()
    gw = Gateway(http_backend(stub), sleep=sleeps)
    r = gw.complete(record())
    assert not r.ok and r.attempt_count == 5 and "500" in r.error
    assert len(stub.requests) == 5 and gw.request_count == 5
    assert sleeps == [1.0, 2.0, 4.0, 8.0] and sum(sleeps) <= 31


def test_http_permanent_4xx(stub):
    stub.default = (401, "bad key")
    sleeps = SleepLog()
    r = Gateway(http_backend(stub), sleep=sleeps).complete(record())
    assert not r.ok and r.attempt_count == 1 and "401" in r.error
    assert sleeps == [] and len(stub.requests) == 1


def test_http_failure_not_cached(stub):
    stub.script = [(400, "nope")]
    cache = ResponseCache()
    gw = Gateway(http_backend(stub), cache, sleep=lambda s: None)
    assert not gw.complete(record()).ok
    assert gw.complete(record()).raw_text == "Databases"


def test_http_unreachable(monkeypatch):
    monkeypatch.setenv("GRAPHCTX_API_KEY_DEAD", "k")
    b = ModelBackend("http-chat", name="dead", endpoint_url="http://127.0.0.1:9", model="m", timeout=2)
    sleeps = SleepLog()
    with pytest.raises(BackendUnavailable):
        Gateway(b, sleep=sleeps).complete(record())
    assert len(sleeps) == 4


def test_warm_cache_issues_zero_requests(stub, tmp_path):
    cache_path = tmp_path / "c.jsonl"
    recs = [record(node=i, rendered=f"prompt {i}") for i in range(6)]
    gw = Gateway(http_backend(stub), ResponseCache(cache_path))
    cold = [gw.complete(r).raw_text for r in recs]
    assert len(stub.requests) == 6
    gw2 = Gateway(http_backend(stub), ResponseCache(cache_path))
    warm = [gw2.complete(r) for r in recs]
    assert len(stub.requests) == 6 and gw2.request_count == 0
    assert [w.raw_text for w in warm] == cold and all(w.from_cache for w in warm)


def test_budget_exceeded(stub):
    gw = Gateway(http_backend(stub), max_requests=2)
    gw.complete(record(rendered="a"))
    gw.complete(record(rendered="b"))
    with pytest.raises(BudgetExceeded):
        gw.complete(record(rendered="c"))


def test_bounded_parallelism(stub):
    stub.delay = 0.05
    gw = Gateway(http_backend(stub), parallelism=2)
    threads = [threading.Thread(target=gw.complete, args=(record(rendered=f"p{i}"),)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(stub.requests) == 8
    assert stub.max_in_flight <= 2
