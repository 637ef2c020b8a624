import numpy as np
import pytest

from graphctx.baselines import (
    ProbeDiverged,
    label_propagation,
    majority_vote,
    normalized_adjacency,
    predict_probe,
    probe_objective,
    propagate_features,
    train_probe,
)
from graphctx.graph import TextAttributedGraph

from .conftest import path_graph


def graph(n, edges, labels=None, categories=("A", "B")):
    labels = labels if labels is not None else [0] * n
    return TextAttributedGraph.from_parts([str(i) for i in range(n)], labels, list(categories), edges)


def naive_lp(n, edges, seeds, c, alpha, iters):
    """Dictionary-based fixed-point iteration, written independently of the sparse implementation."""
    nbrs = {i: [] for i in range(n)}
    for u, v in edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    y0 = [[1.0 if seeds.get(i) == k else 0.0 for k in range(c)] for i in range(n)]
    y = [row[:] for row in y0]
    for _ in range(iters):
        new = []
        for i in range(n):
            if i in seeds:
                new.append(y0[i][:])
                continue
            agg = [0.0] * c
            for j in nbrs[i]:
                for k in range(c):
                    agg[k] += y[j][k] / len(nbrs[i])
            new.append([(1 - alpha) * y0[i][k] + alpha * agg[k] for k in range(c)])
        y = new
    out = []
    for row in y:
        s = sum(row)
        out.append([x / s for x in row] if s else row)
    return np.array(out)


def random_connected(n, extra, seed):
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(i)), i) for i in range(1, n)]  # random tree
    edges += [tuple(int(x) for x in rng.integers(0, n, 2)) for _ in range(extra)]
    return sorted({(min(e), max(e)) for e in edges if e[0] != e[1]})


# label propagation


def test_lp_alpha_zero_returns_seeds():
    g = graph(5, [(0, 1), (1, 2), (2, 3), (3, 4)])
    dist = label_propagation(g, {0: 1, 3: 0}, alpha=0.0)
    assert dist.probs[0].tolist() == [0.0, 1.0] and dist.probs[3].tolist() == [1.0, 0.0]
    assert not dist.probs[[1, 2, 4]].any()
    assert dist.predict() == [1, None, None, 0, None]


def test_lp_disjoint_triangles():
    g = graph(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
    dist = label_propagation(g, {0: 0, 5: 1}, alpha=0.9)
    assert dist.predict() == [0, 0, 0, 1, 1, 1]
    assert dist.converged


def test_lp_path_symmetry_against_naive_oracle():
    edges = [(0, 1), (1, 2)]
    g = graph(3, edges)
    dist = label_propagation(g, {0: 0, 2: 1}, alpha=0.5)
    oracle = naive_lp(3, edges, {0: 0, 2: 1}, 2, 0.5, 200)
    assert np.abs(dist.probs - oracle).max() < 1e-8
    assert dist.probs[1, 0] == pytest.approx(dist.probs[1, 1], abs=1e-12)
    assert dist.predict()[1] == 0  # tie goes to the earliest category


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lp_matches_naive_oracle_random(seed):
    n = 30
    edges = random_connected(n, 25, seed)
    rng = np.random.default_rng(seed)
    seeds = {int(u): int(rng.integers(3)) for u in rng.choice(n, 6, replace=False)}
    g = graph(n, edges, categories=("A", "B", "C"))
    dist = label_propagation(g, seeds, alpha=0.8, max_iter=500, tol=1e-13)
    oracle = naive_lp(n, edges, seeds, 3, 0.8, 500)
    assert np.abs(dist.probs - oracle).max() < 1e-8


def test_lp_rows_sum_to_one_or_zero():
    g = graph(7, [(0, 1), (1, 2), (4, 5)])
    dist = label_propagation(g, {0: 0, 4: 1})
    sums = dist.probs.sum(axis=1)
    assert np.all((np.abs(sums - 1) < 1e-9) | (sums == 0))
    assert dist.predict()[3] is None and dist.predict()[6] is None
    assert dist.residual >= 0


@pytest.mark.parametrize("alpha", [0.5, 0.9, 0.95])
def test_lp_converges_on_fixtures(alpha, toy):
    fixtures = [
        (toy, {0: 0, 3: 1}),
        (graph(3, [(0, 1), (1, 2)]), {0: 0, 2: 1}),
        (graph(40, random_connected(40, 60, 5)), {i: i % 2 for i in range(0, 40, 4)}),
    ]
    for g, seeds in fixtures:
        dist = label_propagation(g, seeds, alpha=alpha)
        assert dist.converged and dist.residual < 1e-8


def test_lp_permutation_equivariant():
    n = 25
    edges = random_connected(n, 20, 7)
    seeds = {0: 0, 5: 1, 9: 1, 17: 0}
    perm = np.random.default_rng(3).permutation(n)
    g = graph(n, edges)
    gp = graph(n, [(int(perm[u]), int(perm[v])) for u, v in edges])
    a = label_propagation(g, seeds).predict()
    b = label_propagation(gp, {int(perm[u]): c for u, c in seeds.items()}).predict()
    assert all(a[u] == b[perm[u]] for u in range(n))


def test_lp_validation():
    g = path_graph(3)
    with pytest.raises(ValueError):
        label_propagation(g, {0: 0}, alpha=1.0)
    with pytest.raises(ValueError):
        label_propagation(g, {0: 0}, alpha=-0.1)
    with pytest.raises(ValueError):
        label_propagation(g, {})


def test_lp_unnormalized_flag_differs():
    g = graph(4, [(0, 1), (0, 2), (0, 3), (1, 2)])
    a = label_propagation(g, {1: 0, 3: 1}, alpha=0.3)
    b = label_propagation(g, {1: 0, 3: 1}, alpha=0.3, normalize=False)
    assert not np.allclose(a.probs, b.probs)


# majority vote


def test_majority_vote_examples():
    g = graph(4, [(0, 1), (0, 2), (0, 3)])
    assert majority_vote(g, {1: 0, 2: 0, 3: 1}, 0) == 0
    assert majority_vote(g, {}, 0) is None
    assert majority_vote(g, {1: 5}, 2) is None  # 2's only neighbor is 0, unlabeled
    # categories [B, A]: B is index 0, A index 1; a tie goes to B
    gba = graph(3, [(0, 1), (0, 2)], categories=("B", "A"))
    assert majority_vote(gba, {1: 1, 2: 0}, 0) == 0


def test_majority_vote_recount():
    n = 50
    edges = random_connected(n, 80, 11)
    g = graph(n, edges, categories=("A", "B", "C"))
    rng = np.random.default_rng(0)
    visible = {u: int(rng.integers(3)) for u in range(n) if rng.random() < 0.5}
    for v in range(n):
        hist = [0, 0, 0]
        for u in g.adjacency(v):
            if int(u) in visible:
                hist[visible[int(u)]] += 1
        expected = None if sum(hist) == 0 else hist.index(max(hist))
        assert majority_vote(g, visible, v) == expected


# feature propagation


def test_propagate_steps_zero_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    out = propagate_features(x, path_graph(3), 0)
    assert out.tobytes() == x.tobytes()


def test_propagate_single_edge_by_hand():
    # A + I = [[1,1],[1,1]], degrees 2, so every entry of A_hat is 1/2
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = propagate_features(x, graph(2, [(0, 1)]), 1)
    assert np.allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_propagate_path_by_hand():
    # path 0-1-2: degrees with self-loops 2,3,2
    a_hat = normalized_adjacency(path_graph(3)).toarray()
    s = 1 / np.sqrt(6)
    expected = np.array([[0.5, s, 0], [s, 1 / 3, s], [0, s, 0.5]])
    assert np.allclose(a_hat, expected, atol=1e-15)


def test_propagate_linear():
    g = graph(10, random_connected(10, 5, 2))
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(10, 6)), rng.normal(size=(10, 6))
    lhs = propagate_features(2.5 * x - 0.7 * y, g, 3)
    rhs = 2.5 * propagate_features(x, g, 3) - 0.7 * propagate_features(y, g, 3)
    assert lhs.shape == x.shape
    assert np.abs(lhs - rhs).max() < 1e-9


def test_propagate_smooths_rows():
    g = graph(10, random_connected(10, 6, 4))
    x = np.random.default_rng(2).normal(size=(10, 5))
    spreads = []
    for steps in range(0, 40, 4):
        out = propagate_features(x, g, steps)
        # compare direction: normalize by the sqrt-degree stationary profile
        d = np.sqrt(np.asarray(g.degrees) + 1.0)[:, None]
        z = out / d
        spreads.append(np.abs(z - z.mean(axis=0)).max())
    assert all(b <= a + 1e-12 for a, b in zip(spreads, spreads[1:]))
    assert spreads[-1] < 0.1 * spreads[0]


def test_propagate_negative_steps():
    with pytest.raises(ValueError):
        propagate_features(np.zeros((3, 2)), path_graph(3), -1)


# linear probe


def test_probe_gradient_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    w, b, l2 = rng.normal(size=(3, 3)), rng.normal(size=3), 0.3
    _, gw, gb = probe_objective(w, b, x, y, l2)
    eps = 1e-6

    def fd(param, idx, is_w):
        p, m = param.copy(), param.copy()
        p[idx] += eps
        m[idx] -= eps
        args_p = (p, b) if is_w else (w, p)
        args_m = (m, b) if is_w else (w, m)
        return (probe_objective(*args_p, x, y, l2)[0] - probe_objective(*args_m, x, y, l2)[0]) / (2 * eps)

    num_w = np.array([[fd(w, (i, j), True) for j in range(3)] for i in range(3)])
    num_b = np.array([fd(b, (j,), False) for j in range(3)])

    def rel(a, n):
        return np.abs(a - n).max() / max(np.abs(n).max(), 1e-12)

    assert rel(gw, num_w) < 1e-4 and rel(gb, num_b) < 1e-4


def test_probe_separable():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(loc=(-2, -2), scale=0.5, size=(30, 2)), rng.normal(loc=(2, 2), scale=0.5, size=(30, 2))])
    y = np.array([0] * 30 + [1] * 30)
    probe = train_probe(x, y, range(60), 2, epochs=500)
    assert (predict_probe(probe, x) == y).mean() == 1.0


def test_probe_loss_non_increasing_and_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(80, 10))
    y = rng.integers(0, 4, 80)
    p1 = train_probe(x, y, range(80), 4, epochs=100)
    p2 = train_probe(x, y, range(80), 4, epochs=100)
    assert all(b <= a + 1e-9 for a, b in zip(p1.losses, p1.losses[1:]))
    assert p1.losses == p2.losses and np.array_equal(p1.weight, p2.weight)
    assert np.isfinite(p1.weight).all()


def test_probe_large_l2_shrinks_to_tie():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(40, 6))
    y = np.repeat([0, 1], 20)  # balanced, so the unpenalized bias stays at zero
    norms = [np.linalg.norm(train_probe(x, y, range(40), 2, l2=l2).weight) for l2 in (1e-2, 1.0, 1e2, 1e6)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    probe = train_probe(x, y, range(40), 2, l2=1e12)
    assert np.abs(probe.logits(x)).max() < 1e-9
    # exact zero weights fall back to the earliest category
    probe.weight[:] = 0
    probe.bias[:] = 0
    assert (predict_probe(probe, x) == 0).all()


def test_probe_validation():
    x = np.zeros((3, 2))
    with pytest.raises(ValueError):
        train_probe(x, [0, 1, 0], [0, 1], 2, lr=0)
    with pytest.raises(ValueError):
        train_probe(x, [0, -1, 0], [0, 1], 2)


def test_probe_diverged_is_floating_point_error():
    assert issubclass(ProbeDiverged, FloatingPointError)
