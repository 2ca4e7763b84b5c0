"""Corpus ingestion: tokenization, feature hashing, and DPR-style file loaders.

Documents and queries are represented as sparse hashed bag-of-token count
maps so no vocabulary file is needed. Everything here is deterministic for a
fixed :class:`HashConfig`, which is what makes downstream training and
retrieval byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

logger = logging.getLogger(__name__)

_PASSAGE_HEADER = "id\ttext\ttitle"

_SEED_MIN = -(2**63)
_SEED_MAX = 2**63 - 1


@dataclass(frozen=True)
class HashConfig:
    """Feature-hashing parameters.

    Identical config + identical text always produce identical features.
    ``vocab_dim`` must be a power of two so hashed indices can be reduced
    with a mask instead of a modulo.
    """

    vocab_dim: int = 2**18
    lowercase: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_dim <= 0 or (self.vocab_dim & (self.vocab_dim - 1)) != 0:
            raise ValueError(f"vocab_dim must be a positive power of two, got {self.vocab_dim}")
        if not (_SEED_MIN <= self.seed <= _SEED_MAX):
            raise ValueError(f"seed must fit in a signed 64-bit integer, got {self.seed}")

    @property
    def seed_key(self) -> bytes:
        return self.seed.to_bytes(8, "little", signed=True)


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str
    features: dict[int, int]


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    features: dict[int, int]


@dataclass(frozen=True)
class TrainingExample:
    """A query with one positive document, optional hard negatives, answers."""

    query: Query
    positive_doc_id: str
    hard_negative_doc_ids: tuple[str, ...]
    answers: tuple[str, ...]


def tokenize(text: str, config: HashConfig) -> list[str]:
    """Lowercase (if configured) and split on runs of non-alphanumeric codepoints."""
    if config.lowercase:
        text = text.lower()
    return "".join(c if c.isalnum() else " " for c in text).split()


def _token_index(token: str, key: bytes, vocab_dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") & (vocab_dim - 1)


def canonical_features(features: dict[int, int]) -> dict[int, int]:
    """Re-key a feature map in ascending index order.

    Keeps float reductions over feature maps identical no matter how the map
    was produced (hashing vs. cache round-trip).
    """
    return dict(sorted(features.items()))


def hash_features(tokens: Sequence[str], config: HashConfig) -> dict[int, int]:
    """Map each token to +1 at ``hash(token) mod vocab_dim``.

    The sum of counts always equals ``len(tokens)``; collisions just merge
    counts onto one index.
    """
    key = config.seed_key
    feats: dict[int, int] = {}
    for tok in tokens:
        idx = _token_index(tok, key, config.vocab_dim)
        feats[idx] = feats.get(idx, 0) + 1
    return canonical_features(feats)


def text_features(text: str, config: HashConfig) -> dict[int, int]:
    return hash_features(tokenize(text, config), config)


class Corpus:
    """Immutable in-memory document collection with id lookup."""

    def __init__(self, documents: Sequence[Document], hash_config: HashConfig):
        by_id: dict[str, Document] = {}
        for doc in documents:
            if doc.id in by_id:
                raise ValueError(f"duplicate document id: {doc.id!r}")
            by_id[doc.id] = doc
        self._documents = tuple(documents)
        self._by_id = by_id
        self.hash_config = hash_config

    def __len__(self) -> int:
        return len(self._documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    @property
    def documents(self) -> tuple[Document, ...]:
        return self._documents

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self._documents)

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise KeyError(f"unknown document id: {doc_id!r}") from None


def load_corpus(path: str | Path, config: HashConfig) -> Corpus:
    """Load a passage TSV (``id<TAB>text<TAB>title``) into a :class:`Corpus`.

    An optional first row equal to the header ``id\\ttext\\ttitle`` is
    skipped. Rows with the wrong column count raise with the line number;
    duplicate ids raise with the id.
    """
    path = Path(path)
    documents: list[Document] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if lineno == 1 and line == _PASSAGE_HEADER:
                continue
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}"
                )
            doc_id, text, title = cols
            documents.append(
                Document(
                    id=doc_id,
                    title=title,
                    text=text,
                    features=text_features(f"{title} {text}", config),
                )
            )
    return Corpus(documents, config)


@dataclass(frozen=True)
class TrainingSet:
    """Loaded training examples plus the count of skipped positive-less records."""

    examples: tuple[TrainingExample, ...]
    skipped: int

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[TrainingExample]:
        return iter(self.examples)


def _context_id(ctx: object, record_index: int) -> str:
    if not isinstance(ctx, dict):
        raise ValueError(f"record {record_index}: context is not an object")
    raw = ctx.get("passage_id", ctx.get("id"))
    if raw is None:
        raise ValueError(f"record {record_index}: context has neither 'passage_id' nor 'id'")
    return str(raw)


def _parse_record(record: object, index: int, config: HashConfig) -> TrainingExample | None:
    """Turn one DPR-style JSON record into a TrainingExample.

    Returns None for records without a usable positive context (skipped
    upstream with a warning count).
    """
    if not isinstance(record, dict):
        raise ValueError(f"record {index}: expected a JSON object")
    try:
        question = record["question"]
        answers = record.get("answers", [])
        positives = record["positive_ctxs"]
    except KeyError as exc:
        raise ValueError(f"record {index}: missing field {exc.args[0]!r}") from None
    if not isinstance(question, str):
        raise ValueError(f"record {index}: 'question' is not a string")
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        raise ValueError(f"record {index}: 'answers' is not a list of strings")
    if not isinstance(positives, list):
        raise ValueError(f"record {index}: 'positive_ctxs' is not a list")
    if not positives:
        return None

    positive_id = _context_id(positives[0], index)
    hard_ids: list[str] = []
    for ctx in record.get("hard_negative_ctxs", []) or []:
        hid = _context_id(ctx, index)
        if hid != positive_id:
            hard_ids.append(hid)

    query_id = str(record.get("id", f"q{index}"))
    query = Query(id=query_id, text=question, features=text_features(question, config))
    return TrainingExample(
        query=query,
        positive_doc_id=positive_id,
        hard_negative_doc_ids=tuple(hard_ids),
        answers=tuple(answers),
    )


def _iter_records(path: Path) -> Iterator[tuple[int, object]]:
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            records = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON array: {exc}") from None
        yield from enumerate(records)
        return
    index = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield index, json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"record {index} ({path}:{lineno}): invalid JSON: {exc}") from None
        index += 1


def load_training(
    path: str | Path,
    config: HashConfig,
    corpus: Corpus | None = None,
) -> TrainingSet:
    """Load DPR-style training records (JSON array or JSON-lines).

    The first positive context becomes the positive document; hard negatives
    keep file order (dropping any that equal the positive). Records with no
    positive context are skipped and counted. When ``corpus`` is given, every
    referenced id must exist in it.
    """
    path = Path(path)
    examples: list[TrainingExample] = []
    skipped = 0
    for index, record in _iter_records(path):
        example = _parse_record(record, index, config)
        if example is None:
            skipped += 1
            continue
        if corpus is not None:
            if example.positive_doc_id not in corpus:
                raise ValueError(
                    f"record {index}: positive document {example.positive_doc_id!r}"
                    " not found in corpus"
                )
            for hid in example.hard_negative_doc_ids:
                if hid not in corpus:
                    raise ValueError(
                        f"record {index}: hard negative {hid!r} not found in corpus"
                    )
        examples.append(example)
    if skipped:
        logger.warning("skipped %d training record(s) without a positive context", skipped)
    return TrainingSet(examples=tuple(examples), skipped=skipped)
