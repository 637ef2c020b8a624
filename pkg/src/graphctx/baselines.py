"""Message-passing baselines: label propagation, neighbor majority vote, and linear probes on propagated features."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import TextAttributedGraph


def adjacency_matrix(g: TextAttributedGraph) -> sp.csr_matrix:
    n = g.node_count
    data = np.ones(len(g.indices), dtype=np.float64)
    return sp.csr_matrix((data, g.indices, g.indptr), shape=(n, n))


@dataclass
class LabelDistribution:
    probs: np.ndarray  # (N, C); rows sum to 1 or are all zero
    alpha: float
    iterations_run: int
    residual: float
    converged: bool

    def predict(self) -> list[Optional[int]]:
        """Argmax per node (ties to the earliest category); ``None`` for all-zero rows."""
        out: list[Optional[int]] = []
        for row in self.probs:
            out.append(int(np.argmax(row)) if row.any() else None)
        return out


def label_propagation(
    g: TextAttributedGraph,
    seeds: Mapping[int, int],
    alpha: float = 0.9,
    max_iter: int = 100,
    tol: float = 1e-8,
    *,
    clamp: bool = True,
    normalize: bool = True,
) -> LabelDistribution:
    """Iterate ``Y <- (1 - alpha) * Y0 + alpha * A @ Y`` from one-hot seed rows.

    ``A`` is the row-normalized adjacency (neighbor mean) unless ``normalize=False``, which
    uses the raw neighbor sum and can diverge.  With ``clamp`` seed rows are reset to their
    one-hot label after every step.  Returned rows are rescaled to sum to one.
    """
    if not 0 <= alpha < 1:
        raise ValueError("alpha must be in [0, 1)")
    if not seeds:
        raise ValueError("need at least one seed label")
    n, c = g.node_count, len(g.categories)
    seed_ids = np.fromiter(seeds.keys(), dtype=np.int64)
    seed_lab = np.fromiter(seeds.values(), dtype=np.int64)
    y0 = np.zeros((n, c))
    y0[seed_ids, seed_lab] = 1.0

    adj = adjacency_matrix(g)
    if normalize:
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        adj = sp.diags(inv) @ adj

    y = y0.copy()
    residual = 0.0
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):  # noqa: B007 (count is reported after the loop)
        new = (1 - alpha) * y0 + alpha * (adj @ y)
        if clamp:
            new[seed_ids] = y0[seed_ids]
        residual = float(np.abs(new - y).max()) if n else 0.0
        y = new
        if residual < tol:
            converged = True
            break

    sums = y.sum(axis=1, keepdims=True)
    probs = np.divide(y, sums, out=np.zeros_like(y), where=sums > 0)
    return LabelDistribution(probs, alpha, iterations, residual, converged)


def majority_vote(
    g: TextAttributedGraph, labels_visible: Mapping[int, int], v: int
) -> Optional[int]:
    """Most frequent visible label among one-hop neighbors; ties to the earliest category, ``None`` if none visible."""
    counts = np.zeros(len(g.categories), dtype=np.int64)
    for u in g.adjacency(v):
        lab = labels_visible.get(int(u))
        if lab is not None:
            counts[lab] += 1
    if counts.sum() == 0:
        return None
    return int(np.argmax(counts))


def normalized_adjacency(g: TextAttributedGraph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` with degrees taken after adding self-loops."""
    a = adjacency_matrix(g) + sp.identity(g.node_count, format="csr")
    d = np.asarray(a.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(d))
    return (s @ a @ s).tocsr()


def propagate_features(features: np.ndarray, g: TextAttributedGraph, steps: int = 2) -> np.ndarray:
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if steps == 0:
        return features
    a_hat = normalized_adjacency(g)
    x = np.asarray(features, dtype=np.float64)
    for _ in range(steps):
        x = a_hat @ x
    return x


class ProbeDiverged(FloatingPointError):
    pass


@dataclass
class LinearProbe:
    weight: np.ndarray  # (dim, C)
    bias: np.ndarray  # (C,)
    l2_penalty: float
    losses: list[float] = field(default_factory=list)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def probe_objective(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``l2 * ||w||^2 / 2``, with gradients for ``w`` and ``b``."""
    n = x.shape[0]
    logp = _log_softmax(x @ w + b)
    loss = -logp[np.arange(n), y].mean() + 0.5 * l2 * float(np.sum(w * w))
    p = np.exp(logp)
    p[np.arange(n), y] -= 1.0
    p /= n
    return float(loss), x.T @ p + l2 * w, p.sum(axis=0)


def train_probe(
    features: np.ndarray,
    labels: Sequence[int] | np.ndarray,
    train_ids: Sequence[int],
    n_categories: int,
    *,
    l2: float = 1e-4,
    epochs: int = 200,
    lr: float = 1.0,
    armijo: float = 1e-4,
) -> LinearProbe:
    """Full-batch softmax regression from zero weights, gradient descent with Armijo backtracking."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    ids = np.asarray(train_ids, dtype=np.int64)
    x = np.asarray(features, dtype=np.float64)[ids]
    y = np.asarray(labels, dtype=np.int64)[ids]
    if (y < 0).any():
        raise ValueError("training nodes must be labeled")
    w = np.zeros((x.shape[1], n_categories))
    b = np.zeros(n_categories)

    loss, gw, gb = probe_objective(w, b, x, y, l2)
    losses = [loss]
    for _ in range(epochs):
        sq = float(np.sum(gw * gw) + np.sum(gb * gb))
        if sq == 0.0:
            break
        step = lr
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_gw, new_gb = probe_objective(w_new, b_new, x, y, l2)
            if np.isfinite(new_loss) and new_loss <= loss - armijo * step * sq:
                break
            step *= 0.5
            if step < 1e-12:
                break
        if not np.isfinite(new_loss):
            raise ProbeDiverged(f"non-finite loss {new_loss}; lower the learning rate")
        if step < 1e-12:
            break  # no descent step found; at numerical optimum
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        losses.append(loss)
    return LinearProbe(w, b, l2, losses)


def predict_probe(probe: LinearProbe, features: np.ndarray) -> np.ndarray:
    return np.argmax(probe.logits(np.asarray(features, dtype=np.float64)), axis=1)
