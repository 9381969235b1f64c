"""Wiring between a RunConfig, the data files and the training engines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Adam
from .config import RunConfig
from .data import Corpus, DataError, Episode, load_corpus, load_splits, sample_episode, \
    sample_user_task, user_pool, user_task
from .encoder import Vocab
from .kb import KnowledgeBase, build_dense_graph, load_kb
from .meta import AccuracyReport, EngineConfig, TrainResult, evaluate, train
from .pipeline import Featurizer, Model, ModelSpec, seed_streams

STRUCTURAL_KEYS = ("mode", "kg", "knn_k", "encoder_dims", "gnn_dims", "head_dims", "n_way", "no_context")


@dataclass
class Workspace:
    kb: KnowledgeBase | None
    corpus: Corpus
    vocab: Vocab
    featurizer: Featurizer
    class_index: dict[str, int]


def load_data(cfg: RunConfig) -> tuple[KnowledgeBase, Corpus]:
    missing = [k for k in ("triples", "embeddings", "corpus", "splits") if not getattr(cfg, k)]
    if missing:
        raise DataError(f"missing data paths: {', '.join(missing)}")
    kb = load_kb(cfg.triples, cfg.embeddings)
    splits, kind = load_splits(cfg.splits)
    return kb, Corpus(load_corpus(cfg.corpus), splits, kind)


def prepare(cfg: RunConfig, kb: KnowledgeBase, corpus: Corpus, vocab: Vocab | None = None) -> Workspace:
    expected = "labels" if cfg.supervised else "users"
    if corpus.kind != expected:
        raise DataError(f"mode {cfg.mode} needs a corpus split by {expected}, got {corpus.kind}")
    if vocab is None:
        vocab = Vocab.build(corpus.documents[i].text for i in corpus.doc_indices("train"))
    dense = None
    if cfg.kg != "off":
        dense = build_dense_graph(kb, None if cfg.kg == "no-knn" else cfg.knn_k)
    feat = Featurizer(corpus, vocab, kb if cfg.kg != "off" else None, dense)
    class_index = {c: i for i, c in enumerate(corpus.labels)}
    return Workspace(kb, corpus, vocab, feat, class_index)


def model_spec(cfg: RunConfig, ws: Workspace) -> ModelSpec:
    n_out = cfg.n_way if cfg.supervised else len(ws.class_index)
    return ModelSpec(
        engine=cfg.mode, kg=cfg.kg, vocab_size=len(ws.vocab),
        entity_dim=ws.kb.dim if ws.kb is not None else 0,
        encoder_dims=list(cfg.encoder_dims), gnn_dims=list(cfg.gnn_dims),
        head_dims=list(cfg.head_dims), n_out=n_out, context=not cfg.no_context,
    )


def engine_config(cfg: RunConfig) -> EngineConfig:
    return EngineConfig(alpha=cfg.alpha, inner_steps=cfg.inner_steps)


def train_sampler(cfg: RunConfig, ws: Workspace, rng: np.random.Generator) -> Callable[[np.random.Generator], Episode]:
    if cfg.supervised:
        return lambda r: sample_episode(ws.corpus, "train", cfg.n_way, cfg.k_shot, cfg.n_query, r)
    users = user_pool(ws.corpus, "train", cfg.user_ratio, rng)
    return lambda r: sample_user_task(ws.corpus, users, cfg.context_size, ws.class_index, r)


def eval_episodes(cfg: RunConfig, ws: Workspace, split: str, count: int,
                  rng: np.random.Generator) -> list[Episode]:
    """Supervised: ``count`` sampled episodes. Unsupervised: one task per user."""
    if cfg.supervised:
        return [sample_episode(ws.corpus, split, cfg.n_way, cfg.k_shot, cfg.n_query, rng)
                for _ in range(count)]
    return [user_task(ws.corpus, u, cfg.context_size, ws.class_index, rng)
            for u in user_pool(ws.corpus, split)]


def run_training(cfg: RunConfig, ws: Workspace, log: Callable[[str], None] | None = None,
                 model: Model | None = None) -> tuple[Model, TrainResult]:
    rngs = seed_streams(cfg.seed)
    if model is None:
        model = Model.create(model_spec(cfg, ws), cfg.seed)
    opt = Adam(cfg.beta, weight_decay=cfg.weight_decay)
    ecfg = engine_config(cfg)
    sampler = train_sampler(cfg, ws, rngs["train"])
    validate = None
    if cfg.val_every and cfg.val_every <= cfg.epochs and "val" in ws.corpus.splits:
        val_eps = eval_episodes(cfg, ws, "val", cfg.val_episodes, rngs["val"])
        validate = lambda: evaluate(model, val_eps, ws.featurizer, ecfg).mean  # noqa: E731
    result = train(model, ws.featurizer, sampler, cfg.epochs, cfg.meta_batch, opt, ecfg,
                   rngs["train"], log, validate, cfg.val_every)
    return model, result


def run_eval(cfg: RunConfig, model: Model, ws: Workspace, split: str | None = None) -> AccuracyReport:
    rngs = seed_streams(cfg.seed)
    eps = eval_episodes(cfg, ws, split or cfg.split, cfg.eval_episodes, rngs["eval"])
    return evaluate(model, eps, ws.featurizer, engine_config(cfg))
