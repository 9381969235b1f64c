"""Command line entry point: ``kgml {synth,extract-kg,train,eval}``.

All output is line-oriented ``key=value`` text. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_config, read_config_file
from .data import DataError, SynthSpec, make_synthetic_benchmark, write_benchmark
from .encoder import Vocab
from .experiment import STRUCTURAL_KEYS, load_data, model_spec, prepare, run_eval, run_training
from .kb import KBFormatError, UNREACHABLE, build_dense_graph, load_kb
from .meta import NumericError
from .pipeline import Model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(out, **kv) -> None:
    parts = []
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        parts.append(f"{k}={v}")
    out.write(" ".join(parts) + "\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", action="append", default=[], metavar="FILE",
                   help="flat key=value file; may repeat, later files win")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "no_context":
            p.add_argument(flag, dest=f.name, action="store_const", const="true", default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())


def _run_config(args) -> RunConfig:
    file_values: dict[str, str] = {}
    for path in args.config:
        file_values.update(read_config_file(path))
    explicit = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    return build_config(explicit, file_values)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args, out) -> int:
    spec = SynthSpec(kind=args.kind, signal=args.signal)
    if args.classes:
        spec.split_counts = tuple(int(v) for v in args.classes.split(","))
        if len(spec.split_counts) != 3:
            raise UsageError("--classes expects train,val,test counts")
    if args.users:
        spec.n_users = args.users
    kb, corpus, meta = make_synthetic_benchmark(spec, np.random.default_rng(args.seed))
    paths = write_benchmark(args.out, kb, corpus, meta)
    _emit(out, event="synth", kind=spec.kind, entities=kb.n_entities, triples=len(kb.triples),
          documents=len(corpus.documents), config=str(Path(args.out) / "data.cfg"))
    for k, v in paths.items():
        _emit(out, event="file", role=k, path=v)
    return EXIT_OK


def graph_record(doc_index: int, label: str, g, kb) -> str:
    rec = {
        "doc": doc_index,
        "label": label,
        "targets": list(g.targets),
        "nodes": list(g.nodes),
        "edges": [list(e) for e in g.edges],
        "names": [kb.names[v] for v in g.nodes],
    }
    return json.dumps(rec, separators=(",", ":"))


def cmd_extract_kg(args, out) -> int:
    from .data import load_corpus, EntityLinker
    from .kb import empty_graph, extract_sentence_kg

    kb = load_kb(args.triples, args.embeddings)
    dense = build_dense_graph(kb, None if args.no_knn else args.knn_k)
    docs = load_corpus(args.corpus)
    linker = EntityLinker(kb)
    n_nodes = n_edges = 0
    multi_targets = unreachable = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, d in enumerate(docs):
            targets = linker(d.text)
            g = extract_sentence_kg(dense, targets) if targets else empty_graph(kb.dim)
            fh.write(graph_record(i, d.label, g, kb) + "\n")
            n_nodes += g.n_nodes
            n_edges += len(g.edges)
            if len(g.targets) > 1:
                multi_targets += len(g.targets)
                for t in g.targets:
                    dist = dense.bfs(t)
                    if all(dist[o] == UNREACHABLE for o in g.targets if o != t):
                        unreachable += 1
    n = len(docs)
    _emit(out, event="stats", graphs=n,
          mean_nodes=n_nodes / n if n else 0.0,
          mean_edges=n_edges / n if n else 0.0,
          unreachable_target_rate=unreachable / multi_targets if multi_targets else 0.0,
          knn_edges=sum(1 for p in dense.edges.values() if p == "knn"),
          base_edges=sum(1 for p in dense.edges.values() if p == "base"))
    return EXIT_OK


def cmd_train(args, out) -> int:
    cfg = _run_config(args)
    kb, corpus = load_data(cfg)
    ws = prepare(cfg, kb, corpus)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def log(line: str) -> None:
        out.write(line + "\n")
        if log_fh:
            log_fh.write(line + "\n")

    try:
        log("event=config " + " ".join(f"{k}={_fmt(v)}" for k, v in cfg.to_dict().items()))
        start = time.perf_counter()
        model, result = run_training(cfg, ws, log)
        wall = time.perf_counter() - start
        with_kg = result.seconds_per_task
        log(f"event=timing tasks={cfg.epochs * cfg.meta_batch} "
            f"time_per_task_with_kg={with_kg:.6f} "
            f"time_per_task_without_kg={with_kg - result.extract_seconds_per_task:.6f} "
            f"extract_time_per_task={result.extract_seconds_per_task:.6f} wall_seconds={wall:.3f}")
        if args.checkpoint:
            save_checkpoint(args.checkpoint, model.store, cfg.to_dict(),
                            {"vocab": ws.vocab.itos, "version": __version__})
            log(f"event=checkpoint path={args.checkpoint}")
        if result.losses:
            log(f"event=done final_loss={result.losses[-1]!r}")
        else:
            log("event=done final_loss=nan")
    finally:
        if log_fh:
            log_fh.close()
    return EXIT_OK


def _fmt(v) -> str:
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def cmd_eval(args, out) -> int:
    store, saved, extra = load_checkpoint(args.checkpoint)
    explicit = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    file_values: dict[str, str] = {}
    for path in args.config:
        file_values.update(read_config_file(path))
    # evaluation knobs and paths may be overridden; structure must match the checkpoint
    base = {k: _fmt(v) for k, v in saved.items()}
    cfg = build_config(explicit, file_values, base)
    for key in STRUCTURAL_KEYS:
        if _fmt(getattr(cfg, key)) != _fmt(saved.get(key)):
            raise CheckpointError(f"config {key}={_fmt(getattr(cfg, key))} does not match "
                                  f"checkpoint {key}={_fmt(saved.get(key))}")
    kb, corpus = load_data(cfg)
    vocab = Vocab()
    for tok in extra.get("vocab", [])[2:]:
        vocab.add(tok)
    ws = prepare(cfg, kb, corpus, vocab)
    spec = model_spec(cfg, ws)
    fresh = Model.create(spec, cfg.seed).store
    if fresh.names() != store.names() or any(fresh[n].shape != store[n].shape for n in fresh.names()):
        raise CheckpointError("checkpoint tensors do not match the configured model")
    model = Model(spec, store)
    start = time.perf_counter()
    report = run_eval(cfg, model, ws)
    seconds = time.perf_counter() - start
    if args.per_episode:
        for i, acc in enumerate(report.accuracies):
            _emit(out, event="episode", index=i, accuracy=acc)
    _emit(out, event="eval", mode=cfg.mode, kg=cfg.kg, split=cfg.split,
          episodes=len(report.accuracies), accuracy=report.mean, ci95=report.ci95,
          seconds_per_task=seconds / max(len(report.accuracies), 1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kgml", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"kgml {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, allow_abbrev=False, **kw)

    s = add("synth", help="generate a synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=["classes", "users"], default="classes")
    s.add_argument("--signal", type=float, default=1.0,
                   help="fraction of documents whose tokens carry no class information")
    s.add_argument("--classes", default=None, help="train,val,test class counts")
    s.add_argument("--users", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    e = add("extract-kg", help="dump per-sentence knowledge graphs")
    e.add_argument("--triples", required=True)
    e.add_argument("--embeddings", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--knn-k", type=int, default=3)
    e.add_argument("--no-knn", action="store_true")
    e.set_defaults(func=cmd_extract_kg)

    t = add("train", help="meta-train one engine")
    _add_run_flags(t)
    t.add_argument("--checkpoint", default=None)
    t.add_argument("--log", default=None)
    t.set_defaults(func=cmd_train)

    v = add("eval", help="evaluate a checkpoint")
    _add_run_flags(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--per-episode", action="store_true")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except (UsageError, ConfigError) as exc:
        print(f"kgml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, KBFormatError, CheckpointError, OSError) as exc:
        print(f"kgml: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"kgml: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"kgml: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
