"""GraphSAGE (mean aggregator, full neighborhoods) and mean-pool readout."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParameterStore, ShapeError, Tape
from .kb import SentenceGraph


def layer_names(k: int) -> tuple[str, str]:
    return f"gnn.{k}.self", f"gnn.{k}.neigh"


def init_gnn(store: ParameterStore, dims: Sequence[int], rng: np.random.Generator) -> None:
    """Add K layers of (self, neighbor) weights to the ``knowledge`` group.

    ``dims`` is ``[D_e, d_1, ..., d_K]``.
    """
    if len(dims) < 2:
        raise ValueError("need at least one GNN layer")
    for k, (din, dout) in enumerate(zip(dims[:-1], dims[1:]), 1):
        bound = np.sqrt(6.0 / (din + dout))
        for name in layer_names(k):
            store.add("knowledge", name, rng.uniform(-bound, bound, size=(din, dout)))


def n_layers(params: Mapping[str, np.ndarray]) -> int:
    k = 0
    while layer_names(k + 1)[0] in params:
        k += 1
    return k


def mean_adjacency(n: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    a = np.zeros((n, n))
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1, keepdims=True)
    np.divide(a, deg, out=a, where=deg > 0)
    return a


def sage_layer(features: np.ndarray, edges, w_self: np.ndarray, w_neigh: np.ndarray) -> np.ndarray:
    """One propagation step over local node indices ``0..n-1``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != w_self.shape[0]:
        raise ShapeError("sage_layer", features.shape, w_self.shape)
    if w_self.shape != w_neigh.shape:
        raise ShapeError("sage_layer", w_self.shape, w_neigh.shape)
    t = Tape()
    h = t.constant(features)
    a = t.constant(mean_adjacency(len(features), edges))
    out = _sage(t, h, a, t.constant(w_self), t.constant(w_neigh))
    return t.value(out)


def _sage(t: Tape, h: int, adj: int, w_self: int, w_neigh: int) -> int:
    neigh = t.matmul(adj, h)
    return t.relu(t.add(t.matmul(h, w_self), t.matmul(neigh, w_neigh)))


@dataclass
class GraphBatch:
    """Several sentence graphs stacked block-diagonally."""
    features: np.ndarray   # (total_nodes, D_e)
    adjacency: np.ndarray  # (total_nodes, total_nodes), row-normalized
    readout: np.ndarray    # (n_graphs, total_nodes), mean-pool weights

    @property
    def n_graphs(self) -> int:
        return self.readout.shape[0]


def _canonical(g: SentenceGraph) -> tuple[np.ndarray, list[tuple[int, int]]]:
    order = np.argsort(g.nodes, kind="stable")
    nodes = [g.nodes[i] for i in order]
    local = {v: i for i, v in enumerate(nodes)}
    feats = np.asarray(g.features, dtype=np.float64)[order]
    edges = [(local[u], local[v]) for u, v in g.edges]
    return feats, edges


def batch_graphs(graphs: Sequence[SentenceGraph], dim: int) -> GraphBatch:
    """Stack graphs; an empty graph yields a zero readout row (zero embedding)."""
    sizes = [g.n_nodes for g in graphs]
    total = sum(sizes)
    features = np.zeros((total, dim))
    adjacency = np.zeros((total, total))
    readout = np.zeros((len(graphs), total))
    off = 0
    for gi, g in enumerate(graphs):
        n = sizes[gi]
        if n:
            feats, edges = _canonical(g)
            if feats.shape[1] != dim:
                raise ShapeError("batch_graphs", feats.shape, (n, dim))
            features[off:off + n] = feats
            adjacency[off:off + n, off:off + n] = mean_adjacency(n, edges)
            readout[gi, off:off + n] = 1.0 / n
        off += n
    return GraphBatch(features, adjacency, readout)


def encode_batch(t: Tape, pv: Mapping[str, int], batch: GraphBatch) -> int:
    """Graph embeddings (n_graphs, d_K) on the tape."""
    k = 1
    h = t.constant(batch.features)
    adj = t.constant(batch.adjacency)
    while layer_names(k)[0] in pv:
        ws, wn = layer_names(k)
        if t.value(h).shape[1] != t.value(pv[ws]).shape[0]:
            raise ShapeError("sage_layer", t.value(h).shape, t.value(pv[ws]).shape)
        h = _sage(t, h, adj, pv[ws], pv[wn])
        k += 1
    if k == 1:
        raise ValueError("no GNN layers registered")
    return t.matmul(t.constant(batch.readout), h)


def node_representations(g: SentenceGraph, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Final-layer node representations in sorted-node-id order."""
    if g.n_nodes == 0:
        raise ValueError("cannot encode a graph with no nodes")
    feats, edges = _canonical(g)
    h = feats
    for k in range(1, n_layers(params) + 1):
        ws, wn = layer_names(k)
        h = sage_layer(h, edges, params[ws], params[wn])
    return h


def encode_graph(g: SentenceGraph, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Mean-pooled graph embedding of dimension d_K."""
    if g.n_nodes == 0:
        raise ValueError("cannot encode a graph with no nodes")
    if n_layers(params) == 0:
        raise ValueError("no GNN layers in params")
    t = Tape()
    pv = {n: t.param(n, v) for n, v in params.items() if n.startswith("gnn.")}
    out = encode_batch(t, pv, batch_graphs([g], g.features.shape[1]))
    return t.value(out)[0]
