"""Bag-of-embeddings sentence encoder and the knowledge-fusion layer."""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ParameterStore, ShapeError, Tape

PAD, UNK = "<pad>", "<unk>"
EMBED = "encoder.embed"
FUSE_W, FUSE_B = "fusion.weight", "fusion.bias"


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        idx = self.stoi.get(tok)
        if idx is None:
            idx = self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return idx

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        v = cls()
        for text in texts:
            for tok in tokenize(text):
                v.add(tok)
        return v

    def __len__(self):
        return len(self.itos)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, 1) for tok in tokenize(text)]


def _layer_names(k: int):
    return f"encoder.{k}.weight", f"encoder.{k}.bias"


def _glorot(rng, din, dout):
    bound = np.sqrt(6.0 / (din + dout))
    return rng.uniform(-bound, bound, size=(din, dout))


def init_encoder(store: ParameterStore, vocab_size: int, dims: Sequence[int],
                 rng: np.random.Generator) -> None:
    """``dims`` = [D_w, hidden..., D_s]; adds the token table and ReLU MLP."""
    if len(dims) < 2:
        raise ValueError("encoder dims need the token width and at least one layer")
    table = rng.normal(0.0, 1.0, size=(vocab_size, dims[0]))
    table[0] = 0.0
    store.add("encoder", EMBED, table)
    for k, (din, dout) in enumerate(zip(dims[:-1], dims[1:]), 1):
        w, b = _layer_names(k)
        store.add("encoder", w, _glorot(rng, din, dout))
        store.add("encoder", b, np.zeros(dout))


def init_fusion(store: ParameterStore, sent_dim: int, graph_dim: int,
                rng: np.random.Generator) -> None:
    store.add("knowledge", FUSE_W, _glorot(rng, sent_dim + graph_dim, sent_dim))
    store.add("knowledge", FUSE_B, np.zeros(sent_dim))


def pooling_matrix(batch: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row i averages the non-PAD token embeddings of sentence i."""
    p = np.zeros((len(batch), vocab_size))
    for i, toks in enumerate(batch):
        toks = [t for t in toks if t != 0]
        if not toks:
            raise ValueError(f"sentence {i} has no non-PAD tokens")
        for tok in toks:
            p[i, tok] += 1.0
        p[i] /= len(toks)
    return p


def encode_batch(t: Tape, pv: Mapping[str, int], batch: Sequence[Sequence[int]]) -> int:
    table = pv[EMBED]
    x = t.matmul(t.constant(pooling_matrix(batch, t.value(table).shape[0])), table)
    k = 1
    while _layer_names(k)[0] in pv:
        w, b = _layer_names(k)
        x = t.relu(t.linear(x, pv[w], pv[b]))
        k += 1
    return x


def encode_sentence(tokens: Sequence[int], params: Mapping[str, np.ndarray]) -> np.ndarray:
    if not len(tokens):
        raise ValueError("empty token list")
    t = Tape()
    pv = {n: t.param(n, v) for n, v in params.items() if n.startswith("encoder.")}
    return t.value(encode_batch(t, pv, [tokens]))[0]


def fuse_batch(t: Tape, pv: Mapping[str, int], sent: int, graph: int) -> int:
    w = pv[FUSE_W]
    got = t.value(sent).shape[1] + t.value(graph).shape[1]
    if got != t.value(w).shape[0]:
        raise ShapeError("fuse", (t.value(sent).shape[1], t.value(graph).shape[1]), t.value(w).shape)
    return t.relu(t.linear(t.concat(sent, graph), w, pv[FUSE_B]))


def fuse(sentence: np.ndarray, graph: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """ReLU(W [s; g] + b) for a single pair of embeddings."""
    t = Tape()
    pv = {FUSE_W: t.param(FUSE_W, params[FUSE_W]), FUSE_B: t.param(FUSE_B, params[FUSE_B])}
    s = t.constant(np.atleast_2d(sentence))
    g = t.constant(np.asarray(graph, dtype=np.float64).reshape(1, -1))
    return t.value(fuse_batch(t, pv, s, g))[0]


def fuse_ablation_concat(sentence: np.ndarray, graph: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(sentence, dtype=np.float64).ravel(),
                           np.asarray(graph, dtype=np.float64).ravel()])
