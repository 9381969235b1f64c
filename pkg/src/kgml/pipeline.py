"""Model assembly: sentence encoder + sentence-KG encoder + fusion + head."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import encoder, gnn
from .autodiff import ParameterStore, Tape
from .data import Corpus, EntityLinker
from .kb import DenseGraph, KnowledgeBase, SentenceGraph, empty_graph, extract_sentence_kg

KG_MODES = ("full", "no-knn", "concat-fusion", "off")
ENGINES = ("maml", "protonet", "arm")


@dataclass
class ModelSpec:
    engine: str
    kg: str
    vocab_size: int
    entity_dim: int
    encoder_dims: list[int]
    gnn_dims: list[int]
    head_dims: list[int] = field(default_factory=lambda: [64, 64])
    n_out: int = 5
    context: bool = True

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.kg not in KG_MODES:
            raise ValueError(f"unknown kg mode {self.kg!r}")

    @property
    def uses_graph(self) -> bool:
        return self.kg != "off"

    @property
    def sent_dim(self) -> int:
        return self.encoder_dims[-1]

    @property
    def graph_dim(self) -> int:
        return self.gnn_dims[-1] if self.uses_graph else 0

    @property
    def rep_dim(self) -> int:
        if self.kg == "concat-fusion":
            return self.sent_dim + self.graph_dim
        return self.sent_dim

    @property
    def head_in(self) -> int:
        return 2 * self.rep_dim if self.engine == "arm" else self.rep_dim


def head_names(k: int) -> tuple[str, str]:
    return f"head.{k}.weight", f"head.{k}.bias"


def init_head(store: ParameterStore, dims: Sequence[int], rng: np.random.Generator) -> None:
    for k, (din, dout) in enumerate(zip(dims[:-1], dims[1:]), 1):
        bound = np.sqrt(6.0 / (din + dout))
        w, b = head_names(k)
        store.add("head", w, rng.uniform(-bound, bound, size=(din, dout)))
        store.add("head", b, np.zeros(dout))


def head_logits(t: Tape, pv: Mapping[str, int], x: int) -> int:
    k = 1
    while head_names(k + 1)[0] in pv:
        w, b = head_names(k)
        x = t.relu(t.linear(x, pv[w], pv[b]))
        k += 1
    w, b = head_names(k)
    return t.linear(x, pv[w], pv[b])


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators so toggling one component never shifts another."""
    names = ("encoder", "knowledge", "head", "train", "val", "eval")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


class Model:
    def __init__(self, spec: ModelSpec, store: ParameterStore):
        self.spec = spec
        self.store = store

    @classmethod
    def create(cls, spec: ModelSpec, seed: int) -> "Model":
        rngs = seed_streams(seed)
        store = ParameterStore()
        encoder.init_encoder(store, spec.vocab_size, spec.encoder_dims, rngs["encoder"])
        if spec.uses_graph:
            gnn.init_gnn(store, [spec.entity_dim, *spec.gnn_dims], rngs["knowledge"])
            if spec.kg != "concat-fusion":
                encoder.init_fusion(store, spec.sent_dim, spec.graph_dim, rngs["knowledge"])
        if spec.engine != "protonet":
            init_head(store, [spec.head_in, *spec.head_dims, spec.n_out], rngs["head"])
        return cls(spec, store)

    def represent(self, t: Tape, pv: Mapping[str, int], tokens: Sequence[Sequence[int]],
                  graphs: Sequence[SentenceGraph] | None) -> int:
        """Fused sentence representations, one row per sentence."""
        s = encoder.encode_batch(t, pv, tokens)
        if not self.spec.uses_graph:
            return s
        g = gnn.encode_batch(t, pv, gnn.batch_graphs(graphs, self.spec.entity_dim))
        if self.spec.kg == "concat-fusion":
            return t.concat(s, g)
        return encoder.fuse_batch(t, pv, s, g)


class Featurizer:
    """Per-document tokens, linked entities and sentence graphs.

    Graphs are extracted on demand; ``extract_seconds`` accumulates the time
    spent so training can report it separately.
    """

    def __init__(self, corpus: Corpus, vocab: encoder.Vocab, kb: KnowledgeBase | None = None,
                 dense: DenseGraph | None = None, cache_graphs: bool = True):
        self.corpus = corpus
        self.vocab = vocab
        self.kb = kb
        self.dense = dense
        self.linker = EntityLinker(kb) if kb is not None else None
        self.cache_graphs = cache_graphs
        self._tokens: dict[int, list[int]] = {}
        self._targets: dict[int, list[int]] = {}
        self._graphs: dict[int, SentenceGraph] = {}
        self.extract_seconds = 0.0

    def tokens(self, i: int) -> list[int]:
        toks = self._tokens.get(i)
        if toks is None:
            toks = self.vocab.encode(self.corpus.documents[i].text) or [1]
            self._tokens[i] = toks
        return toks

    def targets(self, i: int) -> list[int]:
        tg = self._targets.get(i)
        if tg is None:
            tg = self._targets[i] = self.linker(self.corpus.documents[i].text)
        return tg

    def graph(self, i: int) -> SentenceGraph:
        g = self._graphs.get(i)
        if g is not None:
            return g
        start = time.perf_counter()
        targets = self.targets(i)
        g = extract_sentence_kg(self.dense, targets) if targets else empty_graph(self.kb.dim)
        self.extract_seconds += time.perf_counter() - start
        if self.cache_graphs:
            self._graphs[i] = g
        return g

    def batch(self, doc_ids: Sequence[int], with_graphs: bool):
        toks = [self.tokens(i) for i in doc_ids]
        graphs = [self.graph(i) for i in doc_ids] if with_graphs else None
        return toks, graphs
