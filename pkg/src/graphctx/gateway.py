"""Generation backends: an OpenAI-compatible chat endpoint and deterministic mocks, behind a shared response cache."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import httpx

from .graph import TextAttributedGraph
from .prompting import SYSTEM_MESSAGE, PromptRecord

log = logging.getLogger(__name__)

BACKEND_KINDS = ("http-chat", "mock-majority", "mock-echo-first-category", "mock-oracle", "mock-fixed")
API_KEY_PREFIX = "GRAPHCTX_API_KEY_"


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    """The endpoint could not be reached at all, even after retrying."""


class BudgetExceeded(BackendError):
    pass


@dataclass(frozen=True)
class ModelBackend:
    kind: str
    name: str = ""
    endpoint_url: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = None
    temperature: float = 0.0
    max_tokens: int = 32
    fixed_reply: Optional[str] = None
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.kind == "http-chat" and not (self.endpoint_url and self.model):
            raise ValueError("http-chat backend needs endpoint_url and model")
        if self.kind == "mock-fixed" and self.fixed_reply is None:
            raise ValueError("mock-fixed backend needs fixed_reply")
        if not 1 <= self.max_attempts <= 5:
            raise ValueError("max_attempts must be in [1, 5]")
        if not self.name:
            object.__setattr__(self, "name", self.model if self.kind == "http-chat" else self.kind)

    @classmethod
    def from_dict(cls, d: dict, name: str = "") -> "ModelBackend":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backend fields: {sorted(unknown)}")
        if "api_key" in d:
            raise ValueError("API keys are read from the environment, not config")
        return cls(**{"name": name, **d})

    @property
    def cache_tag(self) -> str:
        if self.kind == "http-chat":
            return f"http:{self.model}"
        if self.kind == "mock-fixed":
            return f"mock-fixed:{self.fixed_reply}"
        return self.kind

    def api_key(self) -> str:
        env = self.api_key_env or API_KEY_PREFIX + _env_suffix(self.name)
        key = os.environ.get(env)
        if not key:
            raise BackendError(f"API key not found in environment variable {env}")
        return key


def _env_suffix(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).upper()


@dataclass(frozen=True)
class GenerationResult:
    raw_text: str
    latency: float
    attempt_count: int
    from_cache: bool = False
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def cache_key(tag: str, prompt: str) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt.encode("utf-8"))
    return h.hexdigest()


class ResponseCache:
    """Append-only JSONL cache of replies keyed by a 64-bit hash of (model, prompt).

    The full prompt is stored next to each key; a key whose stored prompt differs is
    treated as a miss.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, tuple[str, str, str]] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._entries[rec["key"]] = (rec["model"], rec["prompt"], rec["reply"])

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, tag: str, prompt: str) -> Optional[str]:
        hit = self._entries.get(cache_key(tag, prompt))
        if hit is None:
            return None
        model, stored_prompt, reply = hit
        if model != tag or stored_prompt != prompt:
            log.warning("cache key collision for %s; ignoring cached entry", tag)
            return None
        return reply

    def put(self, tag: str, prompt: str, reply: str) -> None:
        key = cache_key(tag, prompt)
        with self._lock:
            self._entries[key] = (tag, prompt, reply)
            if self.path is not None:
                rec = {"key": key, "model": tag, "prompt": prompt, "reply": reply, "ts": time.time()}
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def mock_majority(record: PromptRecord) -> str:
    """Most frequent context label; ties and the empty context go to the earliest category."""
    counts = Counter(m.label for m in record.context.members if m.label is not None)
    if not counts:
        return record.categories[0]
    rank = {c: i for i, c in enumerate(record.categories)}
    # unknown strings (pseudo labels that are not category names) rank after every category
    order = {lab: rank.get(lab, len(rank) + i) for i, lab in enumerate(counts)}
    return min(counts, key=lambda lab: (-counts[lab], order[lab]))


def mock_oracle(record: PromptRecord, g: Optional[TextAttributedGraph] = None) -> str:
    gold = g.label_of(record.query_node) if g is not None else record.gold
    if gold is None:
        raise BackendError(f"mock-oracle: node {record.query_node} is unlabeled")
    return record.categories[gold]


class Gateway:
    """Executes prompt records against one backend.

    At most ``parallelism`` HTTP requests are in flight at once; ``max_requests`` caps
    the total number of HTTP attempts made through this gateway.
    """

    def __init__(
        self,
        backend: ModelBackend,
        cache: Optional[ResponseCache] = None,
        *,
        graph: Optional[TextAttributedGraph] = None,
        parallelism: int = 4,
        max_requests: int = 10_000,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache = cache
        self.graph = graph
        self.max_requests = max_requests
        self.request_count = 0
        self._slots = threading.BoundedSemaphore(max(1, parallelism))
        self._count_lock = threading.Lock()
        self._sleep = sleep
        self._client = client
        self._owns_client = client is None

    def close(self) -> None:
        if self._client is not None and self._owns_client:
            self._client.close()
            self._client = None

    def __enter__(self) -> "Gateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _tag(self, record: PromptRecord) -> str:
        # the oracle answers per node, so identical prompts for different nodes must not share a reply
        if self.backend.kind == "mock-oracle":
            return f"mock-oracle#{record.query_node}"
        return self.backend.cache_tag

    def complete(self, record: PromptRecord) -> GenerationResult:
        tag = self._tag(record)
        if self.cache is not None:
            hit = self.cache.get(tag, record.rendered)
            if hit is not None:
                return GenerationResult(hit, 0.0, 0, from_cache=True)

        start = time.perf_counter()
        kind = self.backend.kind
        if kind == "http-chat":
            text, attempts, error = self._complete_http(record.rendered)
        else:
            attempts, error = 1, None
            if kind == "mock-fixed":
                text = self.backend.fixed_reply or ""
            elif kind == "mock-echo-first-category":
                text = record.categories[0]
            elif kind == "mock-majority":
                text = mock_majority(record)
            else:
                text = mock_oracle(record, self.graph)
        latency = time.perf_counter() - start

        if error is None and self.cache is not None:
            self.cache.put(tag, record.rendered, text)
        return GenerationResult(text, latency, attempts, from_cache=False, error=error)

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.backend.timeout)
        return self._client

    def _complete_http(self, prompt: str) -> tuple[str, int, Optional[str]]:
        b = self.backend
        url = b.endpoint_url.rstrip("/") + "/chat/completions"  # type: ignore[union-attr]
        body = {
            "model": b.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": prompt},
            ],
            "temperature": b.temperature,
            "max_tokens": b.max_tokens,
        }
        headers = {"Authorization": f"Bearer {b.api_key()}"}

        last_error = ""
        unreachable = True
        for attempt in range(1, b.max_attempts + 1):
            with self._count_lock:
                if self.request_count >= self.max_requests:
                    raise BudgetExceeded(f"request budget of {self.max_requests} exhausted")
                self.request_count += 1
            try:
                with self._slots:
                    resp = self._http().post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                unreachable = False
                last_error = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last_error = f"transport: {exc}"
            else:
                unreachable = False
                if resp.status_code == 200:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        return "", attempt, f"malformed response: {exc}"
                    return content or "", attempt, None
                if resp.status_code != 429 and resp.status_code < 500:
                    return "", attempt, f"HTTP {resp.status_code}: {resp.text[:200]}"
                last_error = f"HTTP {resp.status_code}"
            if attempt < b.max_attempts:
                self._sleep(b.backoff_base * b.backoff_factor ** (attempt - 1))

        if unreachable:
            raise BackendUnavailable(f"{url} unreachable after {b.max_attempts} attempts: {last_error}")
        return "", b.max_attempts, last_error


def complete(
    backend: ModelBackend,
    record: PromptRecord,
    *,
    cache: Optional[ResponseCache] = None,
    graph: Optional[TextAttributedGraph] = None,
) -> GenerationResult:
    """One-off completion; use :class:`Gateway` to share a connection pool and budget."""
    with Gateway(backend, cache, graph=graph) as gw:
        return gw.complete(record)
