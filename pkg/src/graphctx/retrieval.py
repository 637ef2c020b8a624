"""Context retrieval for a query node: graph neighborhoods, text similarity, random draws."""

from __future__ import annotations

import hashlib
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .graph import TextAttributedGraph, neighbors

log = logging.getLogger(__name__)

RETRIEVERS = ("graph", "text", "random")
GRAPH_ORDERS = ("id", "degree", "similarity")

EMBED_MAGIC = b"GCEM"
EMBED_VERSION = 1
_HASH_KEY = b"graphctx-embed-v1"
_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Member:
    node: int
    text: str
    label: Optional[str] = None
    score: Optional[float] = None


@dataclass(frozen=True)
class ContextBundle:
    """Retrieved context for one query node, in presentation order."""

    query_node: int
    members: tuple[Member, ...]
    retriever: str
    k_requested: Optional[int] = None
    dropped: int = 0  # members removed by label-visibility filtering

    def __post_init__(self) -> None:
        if any(m.node == self.query_node for m in self.members):
            raise ValueError("context bundle must not contain the query node")
        if self.k_requested is not None and len(self.members) > self.k_requested:
            raise ValueError("bundle holds more members than requested")

    @property
    def ids(self) -> list[int]:
        return [m.node for m in self.members]

    @property
    def labels(self) -> list[Optional[str]]:
        return [m.label for m in self.members]

    def __len__(self) -> int:
        return len(self.members)

    def with_members(self, members: Sequence[Member], dropped: int = 0) -> "ContextBundle":
        return replace(self, members=tuple(members), dropped=self.dropped + dropped)


def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=_HASH_KEY).digest(), "little")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def embed_text(text: str, dim: int = 1024) -> np.ndarray:
    """Signed hashed bag-of-words, L2-normalized. Empty/token-free text gives the zero vector."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim, dtype=np.float64)
    for tok, count in Counter(tokenize(text)).items():
        h = _token_hash(tok)
        sign = -1.0 if h >> 63 else 1.0
        vec[h % dim] += sign * count
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    vectors: np.ndarray  # (N, dim), unit rows or zero rows
    source: str = "hashed-bow"

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def zero_rows(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1) == 0

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def build_index(
    g: TextAttributedGraph, dim: int = 1024, external: str | Path | None = None
) -> EmbeddingIndex:
    """Embed every node's text, or load precomputed vectors from a GCEM file."""
    if external is not None:
        vecs = read_embeddings(external)
        if vecs.shape[0] != g.node_count:
            raise ValueError(f"external embeddings have {vecs.shape[0]} rows, graph has {g.node_count} nodes")
        return EmbeddingIndex(_normalize_rows(vecs.astype(np.float64)), source="external-file")
    vecs = np.zeros((g.node_count, dim), dtype=np.float64)
    for i, text in enumerate(g.texts):
        vecs[i] = embed_text(text, dim)
    n_zero = int((np.linalg.norm(vecs, axis=1) == 0).sum())
    if n_zero:
        log.warning("%d nodes have no tokens and embed to the zero vector", n_zero)
    return EmbeddingIndex(vecs, source="hashed-bow")


def write_embeddings(path: str | Path, vectors: np.ndarray) -> None:
    """Write ``GCEM`` v1: magic, u32 version, u32 N, u32 dim, then little-endian f32 rows."""
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    n, dim = arr.shape
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC + struct.pack("<III", EMBED_VERSION, n, dim))
        fh.write(arr.tobytes())


def read_embeddings(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != EMBED_MAGIC:
        raise ValueError(f"{path}: not a GCEM embeddings file")
    version, n, dim = struct.unpack("<III", data[4:16])
    if version != EMBED_VERSION:
        raise ValueError(f"{path}: unsupported GCEM version {version}")
    expected = 16 + 4 * n * dim
    if len(data) != expected:
        raise ValueError(f"{path}: header says {n}x{dim} but payload has {len(data) - 16} bytes")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, dim).astype(np.float64)


def retrieve_graph(
    g: TextAttributedGraph,
    v: int,
    k_max: Optional[int] = None,
    hops: int = 1,
    *,
    order: str = "id",
    index: Optional[EmbeddingIndex] = None,
) -> ContextBundle:
    """Neighbors of ``v`` within ``hops``, truncated to ``k_max``.

    ``order`` picks which neighbors survive truncation: ascending id (default), descending
    degree, or descending cosine similarity (needs ``index``); ties fall back to id.
    """
    ids = neighbors(g, v, hops)
    scores: dict[int, float] = {}
    if order == "degree":
        deg = g.degrees
        ids.sort(key=lambda u: (-deg[u], u))
    elif order == "similarity":
        if index is None:
            raise ValueError("similarity ordering needs an embedding index")
        sims = index.vectors[ids] @ index.vectors[v] if ids else np.zeros(0)
        scores = {u: float(s) for u, s in zip(ids, sims)}
        ids.sort(key=lambda u: (-scores[u], u))
    elif order != "id":
        raise ValueError(f"unknown graph ordering {order!r}")
    if k_max is not None:
        ids = ids[:k_max]
    members = tuple(Member(u, g.texts[u], score=scores.get(u)) for u in ids)
    return ContextBundle(v, members, "graph", k_max)


def top_k_cosine(vectors: np.ndarray, query: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k rows by cosine to row ``query`` (unit rows assumed), ties by ascending id."""
    q = vectors[query]
    sims = vectors @ q
    valid = np.linalg.norm(vectors, axis=1) > 0
    valid[query] = False
    cand = np.flatnonzero(valid)
    # lexsort: last key is primary
    order = np.lexsort((cand, -sims[cand]))[:k]
    return cand[order], sims[cand[order]]


def retrieve_text(index: EmbeddingIndex, g: TextAttributedGraph, v: int, k: int) -> ContextBundle:
    if k < 1:
        raise ValueError("k must be >= 1")
    g._check_node(v)
    if not np.any(index.vectors[v]):
        log.warning("node %d has a zero embedding; text retrieval returns nothing", v)
        return ContextBundle(v, (), "text", k)
    ids, sims = top_k_cosine(index.vectors, v, k)
    members = tuple(Member(int(u), g.texts[u], score=float(s)) for u, s in zip(ids, sims))
    return ContextBundle(v, members, "text", k)


def retrieve_random(g: TextAttributedGraph, v: int, k: int, seed: int = 0) -> ContextBundle:
    g._check_node(v)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > g.node_count - 1:
        raise ValueError(f"cannot draw {k} distinct nodes besides {v} from {g.node_count}")
    rng = np.random.default_rng([seed, v])
    picks = rng.choice(g.node_count - 1, size=k, replace=False)
    picks = np.where(picks >= v, picks + 1, picks)  # skip v
    members = tuple(Member(int(u), g.texts[u]) for u in picks)
    return ContextBundle(v, members, "random", k)


def sample_demonstrations(
    g: TextAttributedGraph, pool: Sequence[int], v: int, k: int, seed: int = 0
) -> ContextBundle:
    """Random labeled demonstrations from ``pool`` (typically the training set), excluding ``v``."""
    candidates = np.array(sorted(u for u in pool if u != v and g.labels[u] >= 0), dtype=np.int64)
    k = min(k, len(candidates))
    rng = np.random.default_rng([seed, v, 1])
    picks = rng.choice(candidates, size=k, replace=False) if k else candidates[:0]
    members = tuple(Member(int(u), g.texts[u], label=g.label_name(int(u))) for u in picks)
    return ContextBundle(v, members, "random", k)


def retrieve(
    g: TextAttributedGraph,
    v: int,
    retriever: str,
    k: Optional[int] = None,
    *,
    hops: int = 1,
    match_degree: bool = False,
    index: Optional[EmbeddingIndex] = None,
    seed: int = 0,
    order: str = "id",
) -> ContextBundle:
    """Dispatch to one retriever.

    With ``match_degree`` the text and random retrievers return as many members as ``v``
    has one-hop graph neighbors, which is the control used when comparing retrievers.
    """
    if match_degree:
        if k is not None:
            raise ValueError("k and match_degree are mutually exclusive")
        k = int(g.degrees[v])
    if retriever == "graph":
        return retrieve_graph(g, v, k, hops, order=order, index=index)
    if k is None:
        raise ValueError(f"{retriever} retriever needs k or match_degree")
    if retriever == "random":
        return retrieve_random(g, v, k, seed)
    if retriever == "text":
        if index is None:
            raise ValueError("text retriever needs an embedding index")
        if k == 0:
            return ContextBundle(v, (), "text", 0)
        return retrieve_text(index, g, v, k)
    raise ValueError(f"unknown retriever {retriever!r}")
