import numpy as np
import pytest

from kgml.config import build_config
from kgml.data import SynthSpec, make_synthetic_benchmark
from kgml.experiment import prepare

SMALL = dict(split_counts=(6, 3, 5), docs_per_class=12, embed_dim=6, filler_vocab=30,
             topic_vocab=20, entities_per_class=5)
SMALL_DIMS = {"encoder_dims": "8,8", "gnn_dims": "6,4", "head_dims": "8"}


@pytest.fixture(scope="session")
def small_bench():
    return make_synthetic_benchmark(SynthSpec(**SMALL), np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_users():
    spec = SynthSpec(kind="users", n_users=12, docs_per_user=(3, 8), filler_vocab=20,
                     n_background_entities=10, embed_dim=4)
    return make_synthetic_benchmark(spec, np.random.default_rng(0))


def small_workspace(bench, **overrides):
    kb, corpus, _ = bench
    cfg = build_config({**SMALL_DIMS, "eval_episodes": "50", **overrides})
    return cfg, prepare(cfg, kb, corpus)


ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
