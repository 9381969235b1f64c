"""Corpus ingestion, entity linking, episode sampling and synthetic benchmarks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import tokenize
from .kb import KnowledgeBase, write_kb

NO_USER = "-"
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    text: str
    label: str
    user: str = NO_USER


@dataclass
class Corpus:
    """Documents plus a partition of labels (``kind="labels"``) or users."""
    documents: list[Document]
    splits: dict[str, list[str]] = field(default_factory=dict)
    kind: str = "labels"

    def __post_init__(self):
        seen: set[str] = set()
        for name, members in self.splits.items():
            overlap = seen.intersection(members)
            if overlap:
                raise DataError(f"split {name!r} overlaps earlier splits on {sorted(overlap)[:3]}")
            seen.update(members)
        self._by_key: dict[str, list[int]] = {}
        for i, d in enumerate(self.documents):
            self._by_key.setdefault(self._key(d), []).append(i)

    def _key(self, d: Document) -> str:
        return d.label if self.kind == "labels" else d.user

    def groups(self, split: str) -> dict[str, list[int]]:
        """Member name -> document indices, in split order."""
        if split not in self.splits:
            raise DataError(f"unknown split {split!r}")
        return {m: self._by_key.get(m, []) for m in self.splits[split]}

    def docs_of(self, member: str) -> list[int]:
        return self._by_key.get(member, [])

    def doc_indices(self, split: str) -> list[int]:
        return [i for idx in self.groups(split).values() for i in idx]

    @property
    def labels(self) -> list[str]:
        return sorted({d.label for d in self.documents})


def load_corpus(path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected label<TAB>user_id<TAB>text")
            label, user, text = parts
            docs.append(Document(text, label, user))
    return docs


def load_splits(path) -> tuple[dict[str, list[str]], str]:
    """Split file: optional ``#kind=labels|users`` line, then ``split<TAB>m1<TAB>m2...``."""
    splits: dict[str, list[str]] = {}
    kind = "labels"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if line.startswith("#kind="):
                kind = line.split("=", 1)[1].strip()
                if kind not in ("labels", "users"):
                    raise DataError(f"{path}:{lineno}: kind must be labels or users")
                continue
            if not line.strip() or line.startswith("#"):
                continue
            name, *members = line.split("\t")
            if name in splits:
                raise DataError(f"{path}:{lineno}: duplicate split {name!r}")
            splits[name] = [m for m in members if m]
    return splits, kind


def write_corpus(corpus: Corpus, corpus_path, splits_path) -> None:
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for d in corpus.documents:
            fh.write(f"{d.label}\t{d.user}\t{d.text}\n")
    with open(splits_path, "w", encoding="utf-8") as fh:
        fh.write(f"#kind={corpus.kind}\n")
        for name, members in corpus.splits.items():
            fh.write("\t".join([name, *members]) + "\n")


# -- entity linking ----------------------------------------------------------

class EntityLinker:
    """Greedy left-to-right longest-match over KB surface names."""

    def __init__(self, kb: KnowledgeBase):
        self.table: dict[tuple[str, ...], int] = {}
        for i in range(kb.n_entities):
            key = tuple(tokenize(kb.surface(i)))
            if key:
                self.table.setdefault(key, i)
        self.max_len = max((len(k) for k in self.table), default=0)

    def __call__(self, text: str) -> list[int]:
        toks = tokenize(text)
        found: list[int] = []
        i = 0
        while i < len(toks):
            for n in range(min(self.max_len, len(toks) - i), 0, -1):
                ent = self.table.get(tuple(toks[i:i + n]))
                if ent is not None:
                    if ent not in found:
                        found.append(ent)
                    i += n
                    break
            else:
                i += 1
        return found


def link_entities(text: str, kb: KnowledgeBase) -> list[int]:
    return EntityLinker(kb)(text)


# -- episodes ----------------------------------------------------------------

@dataclass
class Episode:
    """One task; indices point into the corpus document list."""
    support: list[int]
    support_labels: np.ndarray
    query: list[int]
    query_labels: np.ndarray
    classes: list[str]
    n_way: int = 0
    k_shot: int = 0

    @property
    def label_map(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.classes)}


def sample_episode(corpus: Corpus, split: str, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator) -> Episode:
    groups = corpus.groups(split)
    eligible = [c for c, idx in groups.items() if len(idx) >= k_shot + n_query]
    if len(eligible) < n_way:
        raise DataError(
            f"split {split!r} has {len(eligible)} classes with >= {k_shot + n_query} documents, "
            f"need {n_way}")
    picked = rng.choice(len(eligible), size=n_way, replace=False)
    classes = [eligible[i] for i in picked]
    support, query, s_lab, q_lab = [], [], [], []
    for k, c in enumerate(classes):
        idx = groups[c]
        chosen = rng.choice(len(idx), size=k_shot + n_query, replace=False)
        support += [idx[j] for j in chosen[:k_shot]]
        query += [idx[j] for j in chosen[k_shot:]]
        s_lab += [k] * k_shot
        q_lab += [k] * n_query
    return Episode(support, np.array(s_lab), query, np.array(q_lab), classes, n_way, k_shot)


def user_pool(corpus: Corpus, split: str, user_ratio: float = 1.0,
              rng: np.random.Generator | None = None) -> list[str]:
    """Users of ``split``; with ratio < 1 the first fraction after a seeded shuffle."""
    users = [u for u, idx in corpus.groups(split).items() if idx]
    if not 0 < user_ratio <= 1:
        raise DataError(f"user ratio must lie in (0, 1], got {user_ratio}")
    if user_ratio < 1:
        if rng is None:
            raise DataError("a generator is required to subsample users")
        users = [users[i] for i in rng.permutation(len(users))]
        users = users[:max(1, int(round(user_ratio * len(users))))]
    return users


def user_task(corpus: Corpus, user: str, context_size: int, class_index: dict[str, int],
              rng: np.random.Generator) -> Episode:
    idx = corpus.docs_of(user)
    if not idx:
        raise DataError(f"user {user!r} has no documents")
    if len(idx) > context_size:
        idx = [idx[j] for j in sorted(rng.choice(len(idx), size=context_size, replace=False))]
    labels = np.array([class_index[corpus.documents[i].label] for i in idx])
    classes = sorted(class_index, key=class_index.get)
    return Episode([], np.zeros(0, dtype=int), list(idx), labels, classes)


def sample_user_task(corpus: Corpus, users: list[str], context_size: int,
                     class_index: dict[str, int], rng: np.random.Generator) -> Episode:
    if not users:
        raise DataError("no users in split")
    user = users[int(rng.integers(len(users)))]
    return user_task(corpus, user, context_size, class_index, rng)


# -- synthetic benchmarks ----------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs of the generated benchmark.

    ``kind="classes"``: few-shot topic classification where a fraction
    ``signal`` of documents carries no class information in its tokens and
    only the mentioned entities (clustered by class in embedding space)
    identify the class. ``kind="users"``: binary labels whose meaning is
    flipped by a per-user latent that shows only in the user's token mix.
    """
    kind: str = "classes"
    split_counts: tuple[int, int, int] = (15, 5, 8)
    entities_per_class: int = 8
    docs_per_class: int = 30
    filler_vocab: int = 150
    topic_vocab: int = 40
    topic_tokens_per_class: int = 4
    doc_length: int = 6
    mentions: tuple[int, int] = (2, 3)
    signal: float = 1.0
    embed_dim: int = 16
    center_scale: float = 1.0
    entity_noise: float = 0.6
    base_edge_prob: float = 0.5
    cross_edges: int = 20
    # users kind
    n_users: int = 300
    docs_per_user: tuple[int, int] = (20, 60)
    latent_bias: float = 0.75
    n_background_entities: int = 40

    def validate(self) -> None:
        if self.kind not in ("classes", "users"):
            raise DataError(f"unknown benchmark kind {self.kind!r}")
        if not 0.0 <= self.signal <= 1.0:
            raise DataError("signal must lie in [0, 1]")
        if self.kind == "classes":
            if min(self.split_counts) < 1 or self.entities_per_class < 1 or self.docs_per_class < 2:
                raise DataError("need >= 1 class per split, >= 1 entity and >= 2 docs per class")
            if self.topic_tokens_per_class > self.topic_vocab:
                raise DataError("topic_tokens_per_class exceeds topic_vocab")
            lo, hi = self.mentions
            if not 1 <= lo <= hi <= self.entities_per_class:
                raise DataError("mentions range must lie within [1, entities_per_class]")
            if self.doc_length < self.topic_tokens_per_class:
                raise DataError("doc_length shorter than the topic signature")
        else:
            if self.n_users < 3:
                raise DataError("need at least 3 users")
            if not 0.5 <= self.latent_bias <= 1.0:
                raise DataError("latent_bias must lie in [0.5, 1]")
            lo, hi = self.docs_per_user
            if not 1 <= lo <= hi:
                raise DataError("bad docs_per_user range")


def _split_names(names: list[str], counts) -> dict[str, list[str]]:
    a, b, _ = counts
    return {"train": names[:a], "val": names[a:a + b], "test": names[a + b:]}


def _make_classes(spec: SynthSpec, rng: np.random.Generator):
    n_classes = sum(spec.split_counts)
    epc = spec.entities_per_class
    names, rows, triples = [], [], []
    entity_class = []
    centers = rng.normal(0.0, spec.center_scale, size=(n_classes, spec.embed_dim))
    for c in range(n_classes):
        first = len(names)
        for e in range(epc):
            names.append(f"ent{c:03d}x{e}")
            rows.append(centers[c] + rng.normal(0.0, spec.entity_noise, spec.embed_dim))
            entity_class.append(c)
            if e and rng.random() < spec.base_edge_prob:
                other = first + int(rng.integers(e))
                triples.append((len(names) - 1, 0, other))
    n_ent = len(names)
    for _ in range(spec.cross_edges):
        h, t = rng.integers(n_ent, size=2)
        if h != t:
            triples.append((int(h), 1, int(t)))
    kb = KnowledgeBase(names, np.array(rows), triples, ["related_to", "see_also"])

    topic = [f"topic{i}" for i in range(spec.topic_vocab)]
    filler = [f"w{i}" for i in range(spec.filler_vocab)]
    signatures = [rng.choice(spec.topic_vocab, size=spec.topic_tokens_per_class, replace=False)
                  for _ in range(n_classes)]
    labels = [f"class{c:02d}" for c in range(n_classes)]
    docs = []
    informative = []
    for c in range(n_classes):
        for _ in range(spec.docs_per_class):
            uninformative = rng.random() < spec.signal
            if uninformative:
                # topic words drawn at random still appear, just not class-specific
                toks = [topic[int(rng.integers(spec.topic_vocab))]
                        for _ in range(spec.topic_tokens_per_class)]
            else:
                toks = [topic[i] for i in signatures[c]]
            toks += [filler[int(i)] for i in rng.integers(spec.filler_vocab,
                                                          size=spec.doc_length - len(toks))]
            m = int(rng.integers(spec.mentions[0], spec.mentions[1] + 1))
            ents = rng.choice(epc, size=m, replace=False) + c * epc
            for e in ents:
                toks.insert(int(rng.integers(len(toks) + 1)), names[int(e)])
            docs.append(Document(" ".join(toks), labels[c]))
            informative.append(not uninformative)
    corpus = Corpus(docs, _split_names(labels, spec.split_counts), "labels")
    meta = {"entity_class": entity_class, "signatures": [s.tolist() for s in signatures],
            "informative": informative, "centers": centers.tolist()}
    return kb, corpus, meta


def _make_users(spec: SynthSpec, rng: np.random.Generator):
    n_ent = spec.n_background_entities
    names = [f"ent{i:03d}" for i in range(n_ent)]
    emb = rng.normal(0.0, 1.0, size=(n_ent, spec.embed_dim))
    triples = [(i, 0, int(rng.integers(i))) for i in range(1, n_ent) if rng.random() < spec.base_edge_prob]
    kb = KnowledgeBase(names, emb, triples, ["related_to"])
    filler = [f"w{i}" for i in range(spec.filler_vocab)]
    docs, latents = [], []
    users = [f"user{u:03d}" for u in range(spec.n_users)]
    for user in users:
        z = int(rng.integers(2))
        latents.append(z)
        p_good = spec.latent_bias if z == 0 else 1.0 - spec.latent_bias
        n_docs = int(rng.integers(spec.docs_per_user[0], spec.docs_per_user[1] + 1))
        for _ in range(n_docs):
            good = rng.random() < p_good
            toks = ["good" if good else "bad"]
            toks += [filler[int(i)] for i in rng.integers(spec.filler_vocab, size=spec.doc_length - 1)]
            m = int(rng.integers(spec.mentions[0], spec.mentions[1] + 1))
            for e in rng.choice(n_ent, size=min(m, n_ent), replace=False):
                toks.insert(int(rng.integers(len(toks) + 1)), names[int(e)])
            label = "pos" if good != bool(z) else "neg"
            docs.append(Document(" ".join(toks), label, user))
    n_train = int(round(0.8 * spec.n_users))
    n_val = max(1, int(round(0.1 * spec.n_users)))
    splits = {"train": users[:n_train], "val": users[n_train:n_train + n_val],
              "test": users[n_train + n_val:]}
    corpus = Corpus(docs, splits, "users")
    return kb, corpus, {"latent": latents}


def make_synthetic_benchmark(spec: SynthSpec, rng: np.random.Generator):
    """Returns ``(kb, corpus, meta)``; ``meta`` holds ground truth for tests."""
    spec.validate()
    if spec.kind == "classes":
        kb, corpus, meta = _make_classes(spec, rng)
    else:
        kb, corpus, meta = _make_users(spec, rng)
    meta["spec"] = asdict(spec)
    return kb, corpus, meta


def write_benchmark(out_dir, kb: KnowledgeBase, corpus: Corpus, meta: dict) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "triples": str(out / "triples.tsv"),
        "embeddings": str(out / "embeddings.tsv"),
        "corpus": str(out / "corpus.tsv"),
        "splits": str(out / "splits.tsv"),
    }
    write_kb(kb, paths["triples"], paths["embeddings"])
    write_corpus(corpus, paths["corpus"], paths["splits"])
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)
    with open(out / "data.cfg", "w", encoding="utf-8") as fh:
        for k, v in paths.items():
            fh.write(f"{k}={v}\n")
    return paths
