"""Knowledge base loading, k-NN densification and per-sentence KG extraction."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

UNREACHABLE = -1
BASE, KNN = "base", "knn"


class KBFormatError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path, self.lineno = str(path), lineno


@dataclass
class KnowledgeBase:
    names: list[str]
    embeddings: np.ndarray
    triples: list[tuple[int, int, int]] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.names):
            raise ValueError("need one embedding row per entity")
        if self.embeddings.shape[1] < 1:
            raise ValueError("embedding dimension must be >= 1")
        n = len(self.names)
        for h, r, t in self.triples:
            if not (0 <= h < n and 0 <= t < n and 0 <= r < max(len(self.relations), 1)):
                raise ValueError(f"triple ({h}, {r}, {t}) out of range")
        self.index = {name: i for i, name in enumerate(self.names)}

    @property
    def n_entities(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def surface(self, i: int) -> str:
        """Lowercased surface form used by the entity linker."""
        return self.names[i].replace("_", " ").lower()


def load_kb(triples_path, embeddings_path) -> KnowledgeBase:
    names: list[str] = []
    rows: list[list[float]] = []
    index: dict[str, int] = {}
    with open(embeddings_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise KBFormatError(embeddings_path, lineno, "expected name<TAB>vector")
            name, vec = parts
            try:
                row = [float(v) for v in vec.split()]
            except ValueError:
                raise KBFormatError(embeddings_path, lineno, "non-numeric embedding value") from None
            if rows and len(row) != len(rows[0]):
                raise KBFormatError(embeddings_path, lineno,
                                    f"dimension {len(row)} != {len(rows[0])}")
            if not row:
                raise KBFormatError(embeddings_path, lineno, "empty embedding")
            if name in index:
                raise KBFormatError(embeddings_path, lineno, f"duplicate entity {name!r}")
            index[name] = len(names)
            names.append(name)
            rows.append(row)
    if not names:
        raise KBFormatError(embeddings_path, 0, "no entities")

    relations: list[str] = []
    rel_index: dict[str, int] = {}
    triples = []
    with open(triples_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise KBFormatError(triples_path, lineno, "expected head<TAB>relation<TAB>tail")
            h, r, t = parts
            for ent in (h, t):
                if ent not in index:
                    raise KBFormatError(triples_path, lineno, f"unknown entity {ent!r}")
            if r not in rel_index:
                rel_index[r] = len(relations)
                relations.append(r)
            triples.append((index[h], rel_index[r], index[t]))
    return KnowledgeBase(names, np.array(rows), triples, relations)


def build_knn_graph(kb: KnowledgeBase, k: int) -> set[tuple[int, int]]:
    """Symmetrized exact k-NN edges on Euclidean distance, ties to lower id."""
    n = kb.n_entities
    if k < 1 or k >= n:
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    x = kb.embeddings
    # direct differences, not the |a|^2+|b|^2-2ab expansion: exact ties must stay ties
    edges = set()
    ids = np.arange(n)
    for i in range(n):
        diff = x - x[i]
        d = np.einsum("ij,ij->i", diff, diff)
        d[i] = np.inf
        order = np.lexsort((ids, d))[:k]
        for j in order:
            edges.add((min(i, int(j)), max(i, int(j))))
    return edges


class DenseGraph:
    """Undirected union of KB edges and k-NN edges; immutable after construction."""

    def __init__(self, kb: KnowledgeBase, edges: dict[tuple[int, int], str]):
        self.kb = kb
        self.edges = dict(sorted(edges.items()))
        adj: list[list[int]] = [[] for _ in range(kb.n_entities)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        self.adj = tuple(tuple(sorted(a)) for a in adj)
        self._bfs_cache: dict[int, np.ndarray] = {}

    @property
    def n_nodes(self) -> int:
        return len(self.adj)

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def bfs(self, source: int) -> np.ndarray:
        """Hop distances from ``source``; memoized per graph."""
        cached = self._bfs_cache.get(source)
        if cached is not None:
            return cached
        dist = np.full(self.n_nodes, UNREACHABLE, dtype=np.int64)
        dist[source] = 0
        q = deque([source])
        adj = self.adj
        while q:
            u = q.popleft()
            du = dist[u] + 1
            for w in adj[u]:
                if dist[w] == UNREACHABLE:
                    dist[w] = du
                    q.append(w)
        dist.flags.writeable = False
        self._bfs_cache[source] = dist
        return dist

    def canonical_path(self, u: int, v: int) -> list[int] | None:
        """Lexicographically smallest shortest node sequence from u to v."""
        dv = self.bfs(v)
        if dv[u] == UNREACHABLE:
            return None
        path = [u]
        cur = u
        while cur != v:
            want = dv[cur] - 1
            # adjacency is sorted, so the first hit is the smallest id
            cur = next(w for w in self.adj[cur] if dv[w] == want)
            path.append(cur)
        return path


def _edge_key(u, v):
    return (u, v) if u < v else (v, u)


def densify(kb: KnowledgeBase, knn_edges=()) -> DenseGraph:
    n = kb.n_entities
    edges: dict[tuple[int, int], str] = {}
    for h, _, t in kb.triples:
        if h != t:
            edges[_edge_key(h, t)] = BASE
    for u, v in knn_edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValueError(f"k-NN edge ({u}, {v}) out of range")
        if u != v:
            edges.setdefault(_edge_key(u, v), KNN)
    return DenseGraph(kb, edges)


@dataclass
class DistanceMatrix:
    targets: list[int]
    dist: np.ndarray
    paths: dict[tuple[int, int], list[int]]

    def reachable(self, a: int, b: int) -> bool:
        return self.dist[a, b] != UNREACHABLE


def pairwise_shortest(dense: DenseGraph, targets) -> DistanceMatrix:
    targets = sorted(set(int(t) for t in targets))
    if not targets:
        raise ValueError("targets must be nonempty")
    for t in targets:
        if not 0 <= t < dense.n_nodes:
            raise ValueError(f"unknown entity id {t}")
    m = len(targets)
    dist = np.zeros((m, m), dtype=np.int64)
    paths = {}
    for a in range(m):
        da = dense.bfs(targets[a])
        for b in range(a + 1, m):
            d = int(da[targets[b]])
            dist[a, b] = dist[b, a] = d
            if d != UNREACHABLE:
                paths[(targets[a], targets[b])] = dense.canonical_path(targets[a], targets[b])
    return DistanceMatrix(targets, dist, paths)


def kruskal(n: int, weighted_edges) -> list[tuple[int, int, int]]:
    """Minimum spanning forest; edges are (w, a, b) and sorted lexicographically."""
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = []
    for w, a, b in sorted(weighted_edges):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            tree.append((w, a, b))
    return tree


@dataclass
class SentenceGraph:
    nodes: list[int]
    edges: list[tuple[int, int]]
    targets: list[int]
    features: np.ndarray
    mst: list[tuple[int, int]] = field(default_factory=list)
    mst_weight: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)


def empty_graph(dim: int) -> SentenceGraph:
    return SentenceGraph([], [], [], np.zeros((0, dim)))


def extract_sentence_kg(dense: DenseGraph, targets) -> SentenceGraph:
    """Union of canonical shortest paths along the MST of the targets' metric closure."""
    dm = pairwise_shortest(dense, targets)
    t = dm.targets
    m = len(t)
    candidates = [
        (int(dm.dist[a, b]), a, b)
        for a in range(m) for b in range(a + 1, m)
        if dm.dist[a, b] != UNREACHABLE
    ]
    tree = kruskal(m, candidates)
    nodes = set(t)
    edges = set()
    for _, a, b in tree:
        path = dm.paths[(t[a], t[b])]
        nodes.update(path)
        edges.update(_edge_key(p, q) for p, q in zip(path, path[1:]))
    nodes = sorted(nodes)
    return SentenceGraph(
        nodes=nodes,
        edges=sorted(edges),
        targets=t,
        features=dense.kb.embeddings[nodes],
        mst=[(t[a], t[b]) for _, a, b in tree],
        mst_weight=sum(w for w, _, _ in tree),
    )


def build_dense_graph(kb: KnowledgeBase, knn_k: int | None) -> DenseGraph:
    knn = build_knn_graph(kb, knn_k) if knn_k else ()
    return densify(kb, knn)


def write_kb(kb: KnowledgeBase, triples_path, embeddings_path) -> None:
    with open(embeddings_path, "w", encoding="utf-8") as fh:
        for name, row in zip(kb.names, kb.embeddings):
            fh.write(name + "\t" + " ".join(repr(float(v)) for v in row) + "\n")
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in kb.triples:
            fh.write(f"{kb.names[h]}\t{kb.relations[r]}\t{kb.names[t]}\n")


__all__ = [
    "UNREACHABLE", "KBFormatError", "KnowledgeBase", "load_kb", "build_knn_graph",
    "DenseGraph", "densify", "DistanceMatrix", "pairwise_shortest", "kruskal",
    "SentenceGraph", "empty_graph", "extract_sentence_kg", "build_dense_graph", "write_kb",
]
