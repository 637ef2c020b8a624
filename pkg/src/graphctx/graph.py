"""Text-attributed graphs: loading, validation, neighborhood queries, splits and statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

NODES_FILE = "nodes.jsonl"
EDGES_FILE = "edges.tsv"
CATEGORIES_FILE = "categories.json"
SPLITS_FILE = "splits.json"


class GraphFormatError(ValueError):
    """Raised when a dataset directory is missing files or contains malformed records."""


@dataclass(frozen=True, eq=False)
class TextAttributedGraph:
    """Immutable graph whose nodes carry text and (optionally) a category label.

    ``labels`` holds category indices with ``-1`` for unlabeled nodes.  ``edges`` is an
    ``(E, 2)`` array of undirected pairs with ``u < v``, sorted lexicographically.
    """

    texts: tuple[str, ...]
    labels: np.ndarray
    categories: tuple[str, ...]
    edges: np.ndarray
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)
    dropped_self_loops: int = 0
    dropped_duplicates: int = 0
    name: str = ""

    @classmethod
    def from_parts(
        cls,
        texts: Sequence[str],
        labels: Sequence[Optional[int]],
        categories: Sequence[str],
        edges: Iterable[tuple[int, int]],
        name: str = "",
    ) -> "TextAttributedGraph":
        n = len(texts)
        if len(labels) != n:
            raise GraphFormatError(f"{len(labels)} labels for {n} nodes")
        lab = np.array([-1 if y is None else int(y) for y in labels], dtype=np.int64)
        if lab.size and (lab.max() >= len(categories) or lab.min() < -1):
            raise GraphFormatError("label index out of range of categories")
        if len(set(categories)) != len(categories):
            raise GraphFormatError("duplicate category names")

        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            bad = pairs[(pairs < 0).any(axis=1) | (pairs >= n).any(axis=1)][0]
            raise GraphFormatError(f"dangling edge endpoint in ({bad[0]}, {bad[1]}) for {n} nodes")
        loops = pairs[:, 0] == pairs[:, 1]
        n_loops = int(loops.sum())
        pairs = np.sort(pairs[~loops], axis=1)
        uniq = np.unique(pairs, axis=0) if pairs.size else pairs.reshape(0, 2)
        n_dups = len(pairs) - len(uniq)
        if n_loops or n_dups:
            log.warning("dropped %d self-loops and %d duplicate edges", n_loops, n_dups)

        indptr, indices = _build_adjacency(n, uniq)
        return cls(
            texts=tuple(texts),
            labels=lab,
            categories=tuple(categories),
            edges=uniq,
            indptr=indptr,
            indices=indices,
            dropped_self_loops=n_loops,
            dropped_duplicates=n_dups,
            name=name,
        )

    @property
    def node_count(self) -> int:
        return len(self.texts)

    @property
    def edge_count(self) -> int:
        """Undirected pairs, each counted once."""
        return len(self.edges)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def adjacency(self, v: int) -> np.ndarray:
        """Sorted one-hop neighbor ids of ``v``."""
        self._check_node(v)
        return self.indices[self.indptr[v] : self.indptr[v + 1]]

    def label_of(self, v: int) -> Optional[int]:
        y = int(self.labels[v])
        return None if y < 0 else y

    def label_name(self, v: int) -> Optional[str]:
        y = self.label_of(v)
        return None if y is None else self.categories[y]

    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def content_hash(self) -> str:
        """Stable digest of texts, labels, categories and edges."""
        h = hashlib.sha256()
        h.update(json.dumps(self.categories).encode())
        for t in self.texts:
            h.update(t.encode("utf-8"))
            h.update(b"\x00")
        h.update(self.labels.astype("<i8").tobytes())
        h.update(self.edges.astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def _check_node(self, v: int) -> None:
        if not 0 <= v < self.node_count:
            raise IndexError(f"node id {v} out of range [0, {self.node_count})")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TextAttributedGraph):
            return NotImplemented
        return (
            self.texts == other.texts
            and self.categories == other.categories
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.edges, other.edges)
        )

    __hash__ = None  # type: ignore[assignment]


def _build_adjacency(n: int, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(pairs) == 0:
        return np.zeros(n + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, dst


def load_graph(path: str | Path) -> TextAttributedGraph:
    """Read a dataset directory (``nodes.jsonl``, ``edges.tsv``, ``categories.json``)."""
    root = Path(path)
    for fname in (NODES_FILE, EDGES_FILE, CATEGORIES_FILE):
        if not (root / fname).is_file():
            raise GraphFormatError(f"missing file: {root / fname}")

    try:
        categories = json.loads((root / CATEGORIES_FILE).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{CATEGORIES_FILE}: {exc}") from exc
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise GraphFormatError(f"{CATEGORIES_FILE} must be an array of strings")
    cat_index = {c: i for i, c in enumerate(categories)}

    texts: list[str] = []
    labels: list[Optional[int]] = []
    with open(root / NODES_FILE, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                node_id, text, label = rec["id"], rec["text"], rec.get("label")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"{NODES_FILE} line {lineno}: malformed record ({exc})") from exc
            if node_id != len(texts):
                raise GraphFormatError(
                    f"{NODES_FILE} line {lineno}: expected id {len(texts)}, got {node_id!r} (ids must be dense 0..N-1)"
                )
            if not isinstance(text, str):
                raise GraphFormatError(f"{NODES_FILE} line {lineno}: text must be a string")
            if label is None:
                labels.append(None)
            elif label in cat_index:
                labels.append(cat_index[label])
            else:
                raise GraphFormatError(f"{NODES_FILE} line {lineno}: unknown category {label!r}")
            texts.append(text)

    edges: list[tuple[int, int]] = []
    with open(root / EDGES_FILE, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 2:
                    raise ValueError(f"expected 2 columns, got {len(parts)}")
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"{EDGES_FILE} line {lineno}: {exc}") from exc
            if not (0 <= u < len(texts) and 0 <= v < len(texts)):
                raise GraphFormatError(f"{EDGES_FILE} line {lineno}: dangling edge endpoint ({u}, {v})")
            edges.append((u, v))

    return TextAttributedGraph.from_parts(texts, labels, categories, edges, name=root.name)


def save_graph(g: TextAttributedGraph, path: str | Path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / NODES_FILE, "w", encoding="utf-8") as fh:
        for i, text in enumerate(g.texts):
            rec = {"id": i, "text": text, "label": g.label_name(i)}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    with open(root / EDGES_FILE, "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    (root / CATEGORIES_FILE).write_text(json.dumps(list(g.categories), ensure_ascii=False) + "\n", encoding="utf-8")
    return root


def neighbors(g: TextAttributedGraph, v: int, hops: int = 1) -> list[int]:
    """All nodes within ``hops`` steps of ``v`` (excluding ``v``), ascending by id."""
    g._check_node(v)
    if hops < 1:
        raise ValueError("hops must be >= 1")
    if hops == 1:
        return g.adjacency(v).tolist()
    seen = {v}
    frontier = deque([(v, 0)])
    while frontier:
        u, d = frontier.popleft()
        if d == hops:
            continue
        for w in g.indices[g.indptr[u] : g.indptr[u + 1]]:
            w = int(w)
            if w not in seen:
                seen.add(w)
                frontier.append((w, d + 1))
    seen.discard(v)
    return sorted(seen)


def edge_homophily(g: TextAttributedGraph) -> float:
    """Fraction of edges joining same-label endpoints; edges touching unlabeled nodes are ignored."""
    if g.edge_count == 0:
        raise ValueError("graph has no edges")
    a = g.labels[g.edges[:, 0]]
    b = g.labels[g.edges[:, 1]]
    ok = (a >= 0) & (b >= 0)
    if not ok.any():
        raise ValueError("no edge has two labeled endpoints")
    return float((a[ok] == b[ok]).sum() / ok.sum())


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    seed: int
    scheme: str

    def __post_init__(self) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("split sets overlap")

    def to_json(self) -> dict:
        return {
            "scheme": self.scheme,
            "seed": self.seed,
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Split":
        return cls(
            train=tuple(int(i) for i in obj["train"]),
            val=tuple(int(i) for i in obj["val"]),
            test=tuple(int(i) for i in obj["test"]),
            seed=int(obj["seed"]),
            scheme=str(obj["scheme"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Split":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


_PER_CLASS = re.compile(r"per-class-(\d+)$")
_FRAC = re.compile(r"frac-(\d+)-(\d+)-(\d+)$")


def make_split(
    g: TextAttributedGraph,
    scheme: str = "per-class-20",
    seed: int = 0,
    *,
    val_size: int = 500,
    test_size: int = 1000,
) -> Split:
    """Sample a train/val/test split.

    ``per-class-<k>`` puts ``k`` labeled nodes of every category into train (all of them
    when fewer exist) and then draws ``val_size`` and ``test_size`` nodes from the labeled
    remainder, shrinking both in proportion when too few remain.  ``frac-<a>-<b>-<c>`` shuffles the labeled nodes and cuts them by the given
    percentages.  Sampling is uniform without replacement under ``seed``.
    """
    rng = np.random.default_rng(seed)
    labeled = g.labeled_nodes()

    if m := _PER_CLASS.match(scheme):
        k = int(m.group(1))
        train: list[int] = []
        for c in range(len(g.categories)):
            members = labeled[g.labels[labeled] == c]
            if len(members) == 0:
                raise ValueError(f"category {g.categories[c]!r} has no labeled nodes")
            take = min(k, len(members))
            train.extend(rng.choice(members, size=take, replace=False).tolist())
        rest = np.setdiff1d(labeled, train)
        rest = rng.permutation(rest)
        if len(rest) < val_size + test_size:
            # small graphs: shrink val and test together, keeping their ratio
            val_size = len(rest) * val_size // max(val_size + test_size, 1)
            test_size = len(rest) - val_size
        val = rest[:val_size]
        test = rest[val_size : val_size + test_size]
    elif m := _FRAC.match(scheme):
        fr = np.array([int(x) for x in m.groups()], dtype=float)
        if fr.sum() != 100:
            raise ValueError(f"fractions in {scheme!r} must sum to 100")
        perm = rng.permutation(labeled)
        n_train = int(round(len(perm) * fr[0] / 100))
        n_val = int(round(len(perm) * fr[1] / 100))
        train = perm[:n_train].tolist()
        val = perm[n_train : n_train + n_val]
        test = perm[n_train + n_val :]
    else:
        raise ValueError(f"unknown split scheme {scheme!r}")

    return Split(
        train=tuple(sorted(int(i) for i in train)),
        val=tuple(sorted(int(i) for i in val)),
        test=tuple(sorted(int(i) for i in test)),
        seed=seed,
        scheme=scheme,
    )


@dataclass(frozen=True)
class GraphStats:
    node_count: int
    edge_count: int
    directed_edge_count: int
    category_count: int
    avg_degree: float
    edge_homophily: Optional[float]
    avg_token_length: float

    def as_dict(self) -> dict:
        return {
            "nodes": self.node_count,
            "edges (undirected pairs)": self.edge_count,
            "edges (directed convention)": self.directed_edge_count,
            "categories": self.category_count,
            "avg degree": round(self.avg_degree, 4),
            "edge homophily": None if self.edge_homophily is None else round(self.edge_homophily, 4),
            "avg token length (approx, whitespace)": round(self.avg_token_length, 2),
        }


def graph_stats(g: TextAttributedGraph) -> GraphStats:
    n = g.node_count
    try:
        hom: Optional[float] = edge_homophily(g)
    except ValueError:
        hom = None
    tokens = [len(t.split()) for t in g.texts]
    return GraphStats(
        node_count=n,
        edge_count=g.edge_count,
        directed_edge_count=2 * g.edge_count,
        category_count=len(g.categories),
        avg_degree=float(g.degrees.mean()) if n else 0.0,
        edge_homophily=hom,
        avg_token_length=float(np.mean(tokens)) if n else 0.0,
    )
