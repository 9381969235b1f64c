"""MAML (first-order), ProtoNet and ARM-CML engines over fused representations."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Adam, Tape, backward, sgd_step
from .data import Episode
from .pipeline import Featurizer, Model, head_logits


class NumericError(RuntimeError):
    def __init__(self, step: int, grad_norms: Mapping[str, float]):
        norms = " ".join(f"{g}={v:.3e}" for g, v in grad_norms.items())
        super().__init__(f"non-finite loss at step {step}; gradient norms: {norms}")
        self.step = step
        self.grad_norms = dict(grad_norms)


# -- small numpy-level operations ----------------------------------------------

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prototypes(features: np.ndarray, labels: np.ndarray, n_way: int) -> np.ndarray:
    return np.stack([features[labels == k].mean(axis=0) for k in range(n_way)])


def proto_predict(protos: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Softmax over negative squared Euclidean distances to each prototype."""
    protos = np.atleast_2d(np.asarray(protos, dtype=np.float64))
    if protos.shape[0] == 0:
        raise ValueError("no prototypes")
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    diff = q[:, None, :] - protos[None, :, :]
    p = _softmax(-np.einsum("ijk,ijk->ij", diff, diff))
    return p[0] if np.ndim(query) == 1 else p


def arm_context(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("context needs at least one embedding")
    return x.mean(axis=0)


def _selector(rows: Sequence[int], n: int) -> np.ndarray:
    s = np.zeros((len(rows), n))
    s[np.arange(len(rows)), rows] = 1.0
    return s


def _class_mean_matrix(labels: np.ndarray, n_way: int, offset: int, n: int) -> np.ndarray:
    m = np.zeros((n_way, n))
    for k in range(n_way):
        idx = np.flatnonzero(labels == k)
        if not len(idx):
            raise ValueError(f"class {k} has no support examples")
        m[k, offset + idx] = 1.0 / len(idx)
    return m


# -- head adaptation -----------------------------------------------------------

def support_loss(head: Mapping[str, np.ndarray], features: np.ndarray, labels) -> tuple[Tape, int]:
    t = Tape()
    pv = {n: t.param(n, v) for n, v in head.items()}
    loss = t.cross_entropy(head_logits(t, pv, t.constant(features)), labels)
    return t, loss


def maml_adapt(head: Mapping[str, np.ndarray], features: np.ndarray, labels,
               alpha: float, steps: int) -> dict[str, np.ndarray]:
    """``steps`` plain gradient steps on the support cross-entropy, head only."""
    if len(labels) == 0:
        raise ValueError("empty support set")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    head = dict(head)
    for _ in range(steps):
        t, loss = support_loss(head, features, labels)
        head = sgd_step(head, backward(t, loss), alpha)
    return head


# -- per-episode losses ----------------------------------------------------------

@dataclass
class EngineConfig:
    alpha: float = 0.01
    inner_steps: int = 5


def maml_episode(model: Model, ep: Episode, feat: Featurizer, cfg: EngineConfig,
                 params: Mapping[str, np.ndarray] | None = None):
    """Query loss at the adapted head. Returns ``(tape, loss, logits, adapted_head)``.

    The tape's head parameters hold the post-adaptation values, so its
    gradient is the first-order meta-gradient.
    """
    store = model.store
    params = dict(params) if params is not None else {}
    docs = ep.support + ep.query
    toks, graphs = feat.batch(docs, model.spec.uses_graph)
    t = Tape()
    pv = {n: t.param(n, params.get(n, store[n])) for n in store.names(["encoder", "knowledge"])}
    rep = model.represent(t, pv, toks, graphs)
    ns = len(ep.support)
    head0 = {n: params.get(n, store[n]) for n in store.names(["head"])}
    adapted = maml_adapt(head0, t.value(rep)[:ns], ep.support_labels, cfg.alpha, cfg.inner_steps)
    pv.update({n: t.param(n, v) for n, v in adapted.items()})
    q = t.matmul(t.constant(_selector(range(ns, len(docs)), len(docs))), rep)
    logits = head_logits(t, pv, q)
    return t, t.cross_entropy(logits, ep.query_labels), logits, adapted


def proto_episode(model: Model, ep: Episode, feat: Featurizer, params=None):
    store = model.store
    params = params or {}
    docs = ep.support + ep.query
    toks, graphs = feat.batch(docs, model.spec.uses_graph)
    t = Tape()
    pv = {n: t.param(n, params.get(n, store[n])) for n in store.names(["encoder", "knowledge"])}
    rep = model.represent(t, pv, toks, graphs)
    n, ns = len(docs), len(ep.support)
    n_way = int(ep.support_labels.max()) + 1
    protos = t.matmul(t.constant(_class_mean_matrix(ep.support_labels, n_way, 0, n)), rep)
    q = t.matmul(t.constant(_selector(range(ns, n), n)), rep)
    logits = t.neg(t.sqdist(q, protos))
    return t, t.cross_entropy(logits, ep.query_labels), logits


def arm_episode(model: Model, ep: Episode, feat: Featurizer, params=None):
    store = model.store
    params = params or {}
    toks, graphs = feat.batch(ep.query, model.spec.uses_graph)
    t = Tape()
    pv = {n: t.param(n, params.get(n, store[n])) for n in store.names()}
    rep = model.represent(t, pv, toks, graphs)
    n = len(ep.query)
    if model.spec.context:
        ctx = t.matmul(t.constant(np.ones((n, 1))), t.mean(rep, axis=0))
    else:
        ctx = t.constant(np.zeros((n, model.spec.rep_dim)))
    logits = head_logits(t, pv, t.concat(rep, ctx))
    return t, t.cross_entropy(logits, ep.query_labels), logits


# -- training steps --------------------------------------------------------------

UPDATED_GROUPS = {
    "maml": ("encoder", "head", "knowledge"),
    # ProtoNet has no task head to adapt
    "protonet": ("encoder", "knowledge"),
    "arm": ("encoder", "head", "knowledge"),
}


def episode_loss(model: Model, ep: Episode, feat: Featurizer, cfg: EngineConfig, params=None):
    engine = model.spec.engine
    if engine == "maml":
        return maml_episode(model, ep, feat, cfg, params)
    if engine == "protonet":
        return proto_episode(model, ep, feat, params)
    return arm_episode(model, ep, feat, params)


def batch_gradients(model: Model, episodes: Sequence[Episode], feat: Featurizer,
                    cfg: EngineConfig) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradient over the meta-batch."""
    if not episodes:
        raise ValueError("empty meta-batch")
    names = model.store.names(UPDATED_GROUPS[model.spec.engine], trainable_only=True)
    total = {n: np.zeros_like(model.store[n]) for n in names}
    losses = []
    # fixed episode-index reduction order keeps steps deterministic
    for ep in episodes:
        t, loss = episode_loss(model, ep, feat, cfg)[:2]
        g = backward(t, loss)
        for n in names:
            total[n] += g[n]
        losses.append(float(t.value(loss)[0]))
    b = len(episodes)
    return float(np.mean(losses)), {n: v / b for n, v in total.items()}


def grad_norms(model: Model, grads: Mapping[str, np.ndarray]) -> dict[str, float]:
    out: dict[str, float] = {}
    for n, g in grads.items():
        grp = model.store.group_of(n)
        out[grp] = out.get(grp, 0.0) + float(np.sum(g * g))
    return {k: math.sqrt(v) for k, v in out.items()}


def train_step(model: Model, episodes, feat: Featurizer, opt: Adam, cfg: EngineConfig,
               step: int = 0) -> float:
    """One optimizer step for the model's engine; returns the mean batch loss."""
    loss, grads = batch_gradients(model, episodes, feat, cfg)
    if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
        raise NumericError(step, grad_norms(model, grads))
    params = {n: model.store[n] for n in grads}
    model.store.update(opt.step(params, grads))
    return loss


def _engine_step(engine):
    def step(model: Model, episodes, feat: Featurizer, opt: Adam, cfg: EngineConfig | None = None):
        if model.spec.engine != engine:
            raise ValueError(f"model is configured for {model.spec.engine!r}, not {engine!r}")
        return train_step(model, episodes, feat, opt, cfg or EngineConfig())
    step.__name__ = f"{engine}_step"
    return step


maml_outer_step = _engine_step("maml")
proto_train_step = _engine_step("protonet")
arm_train_step = _engine_step("arm")


# -- evaluation ------------------------------------------------------------------

@dataclass
class AccuracyReport:
    accuracies: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else 0.0

    @property
    def ci95(self) -> float:
        n = len(self.accuracies)
        if n < 2:
            return 0.0
        return 1.96 * float(np.std(self.accuracies, ddof=1)) / math.sqrt(n)


def predict(model: Model, ep: Episode, feat: Featurizer, cfg: EngineConfig) -> np.ndarray:
    out = episode_loss(model, ep, feat, cfg)
    t, logits = out[0], out[2]
    return t.value(logits).argmax(axis=1)


def evaluate(model: Model, episodes: Sequence[Episode], feat: Featurizer, cfg: EngineConfig) -> AccuracyReport:
    report = AccuracyReport()
    for ep in episodes:
        pred = predict(model, ep, feat, cfg)
        report.accuracies.append(float(np.mean(pred == ep.query_labels)))
    return report


@dataclass
class TrainResult:
    losses: list[float]
    val: list[tuple[int, float]]
    seconds_per_task: float
    extract_seconds_per_task: float


def train(model: Model, feat: Featurizer, sample: Callable[[np.random.Generator], Episode],
          epochs: int, meta_batch: int, opt: Adam, cfg: EngineConfig,
          rng: np.random.Generator, log: Callable[[str], None] | None = None,
          validate: Callable[[], float] | None = None, val_every: int = 0) -> TrainResult:
    """Run ``epochs`` meta-batches; ``sample`` draws one training episode."""
    losses, val = [], []
    tasks = 0
    elapsed = 0.0
    extract0 = feat.extract_seconds
    for step in range(1, epochs + 1):
        start = time.perf_counter()
        episodes = [sample(rng) for _ in range(meta_batch)]
        loss = train_step(model, episodes, feat, opt, cfg, step)
        elapsed += time.perf_counter() - start
        tasks += len(episodes)
        losses.append(loss)
        if log:
            log(f"event=step step={step} loss={loss!r}")
        if validate and val_every and step % val_every == 0:
            acc = validate()
            val.append((step, acc))
            if log:
                log(f"event=val step={step} accuracy={acc:.6f}")
    per = elapsed / tasks if tasks else 0.0
    ext = (feat.extract_seconds - extract0) / tasks if tasks else 0.0
    return TrainResult(losses, val, per, ext)
