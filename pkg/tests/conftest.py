import numpy as np
import pytest

from densaug.corpus import Corpus, Document, HashConfig, Query, TrainingExample, text_features


@pytest.fixture
def hash_config():
    return HashConfig(vocab_dim=1024, lowercase=True, seed=7)


def make_document(doc_id: str, text: str, config: HashConfig, title: str = "") -> Document:
    return Document(
        id=doc_id, title=title, text=text, features=text_features(f"{title} {text}", config)
    )


def make_corpus(texts: dict[str, str], config: HashConfig) -> Corpus:
    docs = [make_document(doc_id, text, config) for doc_id, text in texts.items()]
    return Corpus(docs, config)


def make_example(
    query_id: str,
    question: str,
    positive: str,
    config: HashConfig,
    hard: tuple[str, ...] = (),
    answers: tuple[str, ...] = (),
) -> TrainingExample:
    return TrainingExample(
        query=Query(id=query_id, text=question, features=text_features(question, config)),
        positive_doc_id=positive,
        hard_negative_doc_ids=hard,
        answers=answers,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
