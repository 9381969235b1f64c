import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgml.autodiff import ParameterStore, ShapeError, Tape, backward
from kgml.gnn import batch_graphs, encode_batch, encode_graph, init_gnn, layer_names, sage_layer
from kgml.kb import SentenceGraph

from helpers import fd_gradient, max_rel_error


def loop_sage(x, edges, w_self, w_neigh):
    """Per-node reference: relu(x_v W1 + mean_{u in N(v)} x_u W2)."""
    n = len(x)
    nbrs = {v: set() for v in range(n)}
    for u, v in edges:
        if u != v:
            nbrs[u].add(v)
            nbrs[v].add(u)
    out = np.zeros((n, w_self.shape[1]))
    for v in range(n):
        agg = np.zeros(x.shape[1])
        for u in sorted(nbrs[v]):
            agg += x[u]
        if nbrs[v]:
            agg /= len(nbrs[v])
        out[v] = np.maximum(x[v] @ w_self + agg @ w_neigh, 0.0)
    return out


def _params(rng, dims):
    store = ParameterStore()
    init_gnn(store, dims, rng)
    return store.subset()


def _graph(nodes, edges, feats):
    return SentenceGraph(list(nodes), list(edges), list(nodes), np.asarray(feats, dtype=float))


def test_isolated_node_with_identity_self_weight():
    x = np.array([[0.5, 2.0, 0.0]])
    out = sage_layer(x, [], np.eye(3), np.random.default_rng(0).normal(size=(3, 3)))
    assert np.array_equal(out, x)


def test_two_identical_nodes():
    x = np.array([[1.0, -1.0], [1.0, -1.0]])
    out = sage_layer(x, [(0, 1)], np.eye(2), np.eye(2))
    assert np.array_equal(out, np.maximum(2 * x, 0))


def test_path_graph_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 5))
    ws, wn = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    edges = [(0, 1), (1, 2), (2, 3)]
    assert np.abs(sage_layer(x, edges, ws, wn) - loop_sage(x, edges, ws, wn)).max() < 1e-12


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        sage_layer(np.ones((2, 3)), [], np.ones((4, 2)), np.ones((4, 2)))


def test_single_node_readout():
    rng = np.random.default_rng(2)
    p = _params(rng, [3, 4, 2])
    x = rng.normal(size=(1, 3))
    h = loop_sage(loop_sage(x, [], p["gnn.1.self"], p["gnn.1.neigh"]), [], p["gnn.2.self"], p["gnn.2.neigh"])
    assert np.abs(encode_graph(_graph([7], [], x), p) - h[0]).max() < 1e-12


def test_two_isomorphic_components():
    rng = np.random.default_rng(3)
    p = _params(rng, [3, 4])
    f = rng.normal(size=(2, 3))
    one = encode_graph(_graph([0, 1], [(0, 1)], f), p)
    two = encode_graph(_graph([0, 1, 2, 3], [(0, 1), (2, 3)], np.vstack([f, f])), p)
    np.testing.assert_allclose(two, one, rtol=0, atol=1e-15)


def test_random_graph_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(1, 9))
        nodes = sorted(rng.choice(100, size=n, replace=False).tolist())
        edges = sorted({(min(a, b), max(a, b)) for a, b in rng.choice(nodes, size=(n, 2)) if a != b})
        feats = rng.normal(size=(n, 3))
        p = _params(rng, [3, 5, 4])
        local = {v: i for i, v in enumerate(nodes)}
        le = [(local[a], local[b]) for a, b in edges]
        h = loop_sage(feats, le, p["gnn.1.self"], p["gnn.1.neigh"])
        h = loop_sage(h, le, p["gnn.2.self"], p["gnn.2.neigh"])
        assert np.abs(encode_graph(_graph(nodes, edges, feats), p) - h.mean(axis=0)).max() < 1e-12


def test_empty_graph_errors_but_batches_to_zero():
    p = _params(np.random.default_rng(5), [3, 2])
    empty = SentenceGraph([], [], [], np.zeros((0, 3)))
    with pytest.raises(ValueError):
        encode_graph(empty, p)
    t = Tape()
    pv = {n: t.param(n, v) for n, v in p.items()}
    g = encode_batch(t, pv, batch_graphs([empty, _graph([1], [], np.ones((1, 3)))], 3))
    assert t.value(g)[0].tolist() == [0.0, 0.0]


def _random_case(rng):
    n = int(rng.integers(1, 10))
    ids = rng.choice(50, size=n, replace=False).tolist()
    edges = {(min(a, b), max(a, b)) for a, b in rng.choice(ids, size=(2 * n, 2)) if a != b}
    return ids, sorted(edges), rng.normal(size=(n, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_readout_is_bitwise_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = _params(rng, [4, 6, 3])
    ids, edges, feats = _random_case(rng)
    perm = rng.permutation(len(ids))
    a = encode_graph(_graph(ids, edges, feats), p)
    shuffled = _graph([ids[i] for i in perm], [(v, u) for u, v in reversed(edges)], feats[perm])
    b = encode_graph(shuffled, p)
    assert np.array_equal(a, b)


def test_locality_one_layer():
    # a one-layer output at node v only depends on v and its neighbors
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 3))
    ws, wn = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    edges = [(0, 1), (1, 2), (3, 4)]
    y = x.copy()
    y[4] += 10.0
    a, b = sage_layer(x, edges, ws, wn), sage_layer(y, edges, ws, wn)
    assert np.array_equal(a[:3], b[:3])


def test_gnn_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    p = {n: v for n, v in _params(rng, [3, 4, 2]).items()}
    graphs = [_graph([0, 1, 2], [(0, 1), (1, 2)], rng.normal(size=(3, 3)) + 0.5),
              _graph([4], [], rng.normal(size=(1, 3)) + 0.5)]
    batch = batch_graphs(graphs, 3)
    w = rng.normal(size=(2, 2))

    def build(params):
        t = Tape()
        pv = {n: t.param(n, v) for n, v in params.items()}
        g = encode_batch(t, pv, batch)
        return t, t.sum(t.mul(g, t.constant(w)))

    t, loss = build(p)
    f = lambda q: float(build(q)[0].value(build(q)[1])[0])  # noqa: E731
    assert max_rel_error(backward(t, loss), fd_gradient(f, p)) < 1e-4


def test_layer_names():
    assert layer_names(2) == ("gnn.2.self", "gnn.2.neigh")
