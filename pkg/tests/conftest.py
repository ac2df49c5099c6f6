import os

import numpy as np
import pytest

from kala.config import ModelConfig, RELATIONAL
from kala.corpus import GenConfig, generate_synthetic_corpus, load_corpus, write_corpus
from kala.trainer import TaskData

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def tiny_gen(**overrides):
    params = dict(num_types=4, seen_entities=24, unseen_entities=12, train_contexts=48,
                  val_contexts=16, test_contexts=16, candidates=3, filler=6, unseen_fraction=0.5)
    params.update(overrides)
    return GenConfig(**params)


def tiny_model(variant=RELATIONAL, **overrides):
    params = dict(variant=variant, num_layers=2, hidden=16, intermediate=32, num_heads=2,
                  max_len=48, dropout=0.0, gnn_dropout=0.0, kfm_locations=[1, 2], relation_dim=8)
    params.update(overrides)
    return ModelConfig(**params)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("corpus")
    cfg = tiny_gen()
    write_corpus(generate_synthetic_corpus(cfg, seed=7), str(directory), cfg, seed=7)
    return str(directory)


@pytest.fixture(scope="session")
def tagging_corpus_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("tagging")
    cfg = tiny_gen(task="tagging")
    write_corpus(generate_synthetic_corpus(cfg, seed=3), str(directory), cfg, seed=3)
    return str(directory)


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus_dir):
    return TaskData.from_corpus(load_corpus(tiny_corpus_dir))


@pytest.fixture(scope="session")
def tagging_data(tagging_corpus_dir):
    return TaskData.from_corpus(load_corpus(tagging_corpus_dir))


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, line = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key:<4} {'PASS' if ok else 'FAIL'}  {line}")
