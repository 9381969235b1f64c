"""Shared oracles for the test suite."""
from __future__ import annotations

import itertools

import numpy as np

from kgml.autodiff import backward
from kgml.kb import KnowledgeBase, UNREACHABLE, densify

FD_EPS = 1e-5
REL_FLOOR = 1e-6


def rel_error(a, f):
    a, f = np.asarray(a, dtype=float), np.asarray(f, dtype=float)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), REL_FLOOR)


def fd_gradient(loss_fn, params: dict, names=None, eps: float = FD_EPS) -> dict:
    """Central differences of scalar ``loss_fn(params)`` for every coordinate."""
    names = list(params) if names is None else names
    out = {}
    for n in names:
        base = params[n]
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += eps
            minus = base.copy()
            minus[idx] -= eps
            g[idx] = (loss_fn({**params, n: plus}) - loss_fn({**params, n: minus})) / (2 * eps)
        out[n] = g
    return out


def max_rel_error(analytic: dict, numeric: dict) -> float:
    return max(float(rel_error(analytic[n], numeric[n]).max()) for n in numeric)


def tape_grad(tape, loss):
    return backward(tape, loss)


def random_kb(rng, n: int, p: float, dim: int = 3) -> KnowledgeBase:
    triples = [(u, 0, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return KnowledgeBase([f"e{i}" for i in range(n)], rng.normal(size=(n, dim)), triples, ["r"])


def random_dense(rng, n: int, p: float):
    return densify(random_kb(rng, n, p))


def floyd_warshall(dense) -> np.ndarray:
    n = dense.n_nodes
    inf = np.iinfo(np.int64).max // 4
    d = np.full((n, n), inf, dtype=np.int64)
    np.fill_diagonal(d, 0)
    for u, v in dense.edges:
        d[u, v] = d[v, u] = 1
    for k in range(n):
        d = np.minimum(d, d[:, [k]] + d[[k], :])
    d[d >= inf] = UNREACHABLE
    return d


def prufer_trees(m: int):
    """All labelled spanning trees of K_m as arrays of (a, b) edges."""
    if m == 1:
        yield []
        return
    if m == 2:
        yield [(0, 1)]
        return
    for seq in itertools.product(range(m), repeat=m - 2):
        degree = [1] * m
        for s in seq:
            degree[s] += 1
        edges = []
        for s in seq:
            leaf = min(i for i in range(m) if degree[i] == 1)
            edges.append((leaf, s))
            degree[leaf] -= 1
            degree[s] -= 1
        u, v = [i for i in range(m) if degree[i] == 1]
        edges.append((u, v))
        yield edges


def brute_force_mst_weight(dist: np.ndarray) -> int:
    """Exhaustive minimum over all spanning trees of a connected metric closure."""
    m = len(dist)
    best = None
    for tree in prufer_trees(m):
        w = sum(int(dist[a, b]) for a, b in tree)
        best = w if best is None or w < best else best
    return best
