"""Synthetic text-attributed graphs with controllable edge homophily, and an analytic oracle for neighbor-majority accuracy."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .graph import TextAttributedGraph

MAX_ENUM_DEGREE = 20


@dataclass(frozen=True)
class SynthSpec:
    n: int = 2000
    c: int = 5
    homophily: float = 0.9
    mean_degree: float = 10.0
    tokens_per_node: int = 30
    vocab_per_class: int = 50
    shared_vocab: int = 200
    class_token_rate: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.n >= self.c >= 2:
            raise ValueError("need n >= c >= 2")
        if not 0 <= self.homophily <= 1:
            raise ValueError("homophily must be in [0, 1]")
        if not 0 <= self.mean_degree < self.n - 1:
            raise ValueError("mean_degree must be in [0, n-1)")
        if not 0 <= self.class_token_rate <= 1:
            raise ValueError("class_token_rate must be in [0, 1]")
        if self.vocab_per_class < 1 or self.shared_vocab < 1 or self.tokens_per_node < 0:
            raise ValueError("vocabularies must be non-empty")

    def as_dict(self) -> dict:
        return asdict(self)


def category_names(c: int) -> list[str]:
    return [f"class_{i}" for i in range(c)]


def generate(spec: SynthSpec, *, max_attempts_factor: int = 50) -> TextAttributedGraph:
    """Sample a graph.

    Labels are assigned round-robin and shuffled.  Each of ``n * mean_degree / 2`` edges
    picks an endpoint uniformly, then a partner from the same class with probability
    ``homophily``, otherwise from a uniformly chosen other class; duplicates and
    self-loops are redrawn.  Every token of a node's text comes from its class vocabulary
    with probability ``class_token_rate`` and from the shared vocabulary otherwise.
    """
    rng = np.random.default_rng(spec.seed)
    n, c = spec.n, spec.c
    labels = rng.permutation(np.arange(n) % c)
    by_class = [np.flatnonzero(labels == k) for k in range(c)]

    target = int(round(n * spec.mean_degree / 2))
    edges: set[tuple[int, int]] = set()
    attempts = 0
    limit = max_attempts_factor * max(target, 1)
    while len(edges) < target:
        attempts += 1
        if attempts > limit:
            raise ValueError(f"could not place {target} distinct edges after {limit} draws; degree unsatisfiable")
        u = int(rng.integers(n))
        cu = int(labels[u])
        if rng.random() < spec.homophily:
            cls = cu
        else:
            cls = int(rng.integers(c - 1))
            cls += cls >= cu
        pool = by_class[cls]
        w = int(pool[rng.integers(len(pool))])
        if w == u:
            continue
        e = (u, w) if u < w else (w, u)
        edges.add(e)

    texts = []
    class_pick = rng.random((n, spec.tokens_per_node)) < spec.class_token_rate
    class_tok = rng.integers(spec.vocab_per_class, size=(n, spec.tokens_per_node))
    shared_tok = rng.integers(spec.shared_vocab, size=(n, spec.tokens_per_node))
    for i in range(n):
        words = [
            f"c{labels[i]}w{class_tok[i, j]}" if class_pick[i, j] else f"sw{shared_tok[i, j]}"
            for j in range(spec.tokens_per_node)
        ]
        texts.append(" ".join(words))

    return TextAttributedGraph.from_parts(
        texts, labels.tolist(), category_names(c), sorted(edges), name=f"synth-h{spec.homophily}-s{spec.seed}"
    )


@lru_cache(maxsize=4096)
def _compositions(total: int, parts: int) -> tuple[tuple[int, ...], ...]:
    if parts == 0:
        return ((),) if total == 0 else ()
    if parts == 1:
        return ((total,),)
    out = []
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            out.append((first,) + rest)
    return tuple(out)


def expected_majority_accuracy(h: float, c: int, degree: int) -> float:
    """Probability that a plurality vote over ``degree`` i.i.d. neighbor labels recovers the node's class.

    Each neighbor has the node's class with probability ``h`` and each other class with
    probability ``(1 - h) / (c - 1)``.  Ties go to the earliest category; with the node's
    class uniform over the category order, a tie among ``t`` classes that includes it is
    won with probability ``1/t``.  Computed by exact enumeration of label counts.
    """
    if c < 2:
        raise ValueError("c must be >= 2")
    if degree < 0:
        raise ValueError("degree must be >= 0")
    if degree > MAX_ENUM_DEGREE:
        raise ValueError(f"degree {degree} exceeds the enumeration limit {MAX_ENUM_DEGREE}; use monte_carlo_majority_accuracy")
    q = (1 - h) / (c - 1)
    log_fact = [math.lgamma(i + 1) for i in range(degree + 1)]
    total = 0.0
    for own in range(degree + 1):
        for others in _compositions(degree - own, c - 1):
            top = max(others, default=0)
            if own < top:
                continue
            ties = 1 + sum(1 for x in others if x == own)
            logm = log_fact[degree] - log_fact[own] - sum(log_fact[x] for x in others)
            p = math.exp(logm) * _pow(h, own) * _pow(q, degree - own)
            total += p / ties
    return total


def _pow(base: float, exp: int) -> float:
    return 1.0 if exp == 0 else base**exp


def monte_carlo_majority_accuracy(
    h: float, c: int, degree: int, samples: int = 1_000_000, seed: int = 0
) -> tuple[float, float]:
    """Sampling estimate of :func:`expected_majority_accuracy` and its standard error.

    Simulates the query class uniformly over categories and applies the earliest-category
    tie rule literally, so it checks the ``1/t`` tie marginalization independently.
    """
    rng = np.random.default_rng(seed)
    own = rng.integers(c, size=samples)
    acc = np.zeros(samples, dtype=bool)
    chunk = 200_000
    for start in range(0, samples, chunk):
        o = own[start : start + chunk]
        m = len(o)
        # draw "same class" vs "which other class" per neighbor
        same = rng.random((m, degree)) < h
        other = rng.integers(c - 1, size=(m, degree))
        other = other + (other >= o[:, None])
        lab = np.where(same, o[:, None], other)
        counts = (lab[:, :, None] == np.arange(c)).sum(axis=1)
        acc[start : start + m] = np.argmax(counts, axis=1) == o
    mean = float(acc.mean())
    return mean, math.sqrt(mean * (1 - mean) / samples)


def degree_mixed_oracle(
    h: float, c: int, degrees, *, mc_samples: int = 200_000, seed: int = 0
) -> float:
    """Mean oracle accuracy over nodes of the given realized degrees (Monte Carlo above the enumeration limit)."""
    degrees = np.asarray(degrees, dtype=np.int64)
    if degrees.size == 0:
        raise ValueError("no degrees given")
    total = 0.0
    for d, count in zip(*np.unique(degrees, return_counts=True)):
        d = int(d)
        if d <= MAX_ENUM_DEGREE:
            val = expected_majority_accuracy(h, c, d)
        else:
            val = monte_carlo_majority_accuracy(h, c, d, mc_samples, seed + d)[0]
        total += val * count
    return total / degrees.size
