"""Session-scoped reference pipeline shared by the empirical test suites.

Building the reference models costs ~45 s (staged pretraining plus the two
composition fine-tunes), so it runs once per session.  Everything below is
seeded and single-threaded; reruns are bit-identical.
"""

import pytest

from ssmcompose.corpus import generate_corpus
from ssmcompose.pipeline import build_store, prepare_reference_models

TRAIN_CORPUS_SEED = 101
EVAL_CORPUS_SEED = 202
TRAIN_DOCS = 400
EVAL_DOCS = 200


@pytest.fixture(scope="session")
def ref_corpus():
    train_items = generate_corpus(seed=TRAIN_CORPUS_SEED, num_docs=TRAIN_DOCS)
    eval_items = generate_corpus(seed=EVAL_CORPUS_SEED, num_docs=EVAL_DOCS)
    return train_items, eval_items


@pytest.fixture(scope="session")
def reference_models(ref_corpus):
    train_items, _ = ref_corpus
    return prepare_reference_models(train_items)


@pytest.fixture(scope="session")
def eval_store_bptc(ref_corpus, reference_models):
    _, eval_items = ref_corpus
    return build_store(eval_items, reference_models.bptc)


@pytest.fixture(scope="session")
def eval_store_lm(ref_corpus, reference_models):
    _, eval_items = ref_corpus
    return build_store(eval_items, reference_models.pretrained)
