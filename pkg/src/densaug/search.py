"""Exact top-K retrieval: brute-force dense scoring and an Okapi BM25 baseline.

Both retrievers rank every document (no approximate index) and share one tie
rule: descending score, then ascending document id. Dense corpus encoding
computes each document independently, so splitting the work across threads
can never change a byte of the output.
"""

from __future__ import annotations

import math
import os
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, Query, tokenize
from .encoder import EncoderParams, encode

INDEX_MAGIC = b"DARI"
INDEX_VERSION = 1

METRICS = ("dot", "cosine")


@dataclass(frozen=True)
class RankedList:
    """Per-query ranking: (doc_id, score) pairs, scores non-increasing."""

    query_id: str
    results: tuple[tuple[str, float], ...]


@dataclass
class DenseIndex:
    doc_ids: tuple[str, ...]
    vectors: np.ndarray  # (N, m) float64, row-aligned with doc_ids
    metric: str = "dot"

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.doc_ids):
            raise ValueError(
                f"vectors shape {self.vectors.shape} does not match {len(self.doc_ids)} ids"
            )
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not np.isfinite(self.vectors).all():
            raise ValueError("index vectors must be finite")

    def __len__(self) -> int:
        return len(self.doc_ids)


def encode_corpus(
    corpus: Corpus,
    params: EncoderParams,
    metric: str = "dot",
    threads: int = 1,
) -> DenseIndex:
    """Encode every document with the doc tower, corpus order preserved."""
    docs = corpus.documents
    vectors = np.empty((len(docs), params.output_dim))
    if threads > 1 and len(docs) > 1:
        def encode_one(doc):
            return encode(doc.features, "doc", params)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for row, vec in enumerate(pool.map(encode_one, docs)):
                vectors[row] = vec
    else:
        for row, doc in enumerate(docs):
            vectors[row] = encode(doc.features, "doc", params)
    return DenseIndex(doc_ids=tuple(d.id for d in docs), vectors=vectors, metric=metric)


def _rank(scores: np.ndarray, doc_ids: Sequence[str], k: int) -> tuple[tuple[str, float], ...]:
    """Top-k by descending score, ties broken by ascending doc id."""
    ids = np.asarray(doc_ids)
    order = np.lexsort((ids, -scores))
    top = order[: min(k, len(ids))]
    return tuple((str(ids[i]), float(scores[i])) for i in top)


def dense_topk(
    query: Query,
    index: DenseIndex,
    params: EncoderParams,
    k: int,
) -> RankedList:
    """Exhaustive dense scoring of one query against the whole index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    query_vec = encode(query.features, "query", params)
    scores = _score_against(index, query_vec)
    return RankedList(query_id=query.id, results=_rank(scores, index.doc_ids, k))


def _score_against(index: DenseIndex, query_vec: np.ndarray) -> np.ndarray:
    if index.metric == "dot":
        return index.vectors @ query_vec
    norms = np.linalg.norm(index.vectors, axis=1)
    qnorm = float(np.linalg.norm(query_vec))
    if qnorm == 0.0 or (len(index) and norms.min() == 0.0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return (index.vectors @ query_vec) / (norms * qnorm)


def batch_dense_topk(
    queries: Sequence[Query],
    index: DenseIndex,
    params: EncoderParams,
    k: int,
    threads: int = 1,
) -> list[RankedList]:
    """dense_topk over many queries, optionally thread-parallel (order preserved)."""
    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda q: dense_topk(q, index, params, k), queries))
    return [dense_topk(q, index, params, k) for q in queries]


@dataclass
class Bm25Index:
    """Inverted index with Okapi BM25 statistics."""

    doc_ids: tuple[str, ...]
    postings: dict[str, list[tuple[int, int]]]  # token -> [(doc position, tf)]
    doc_lengths: np.ndarray
    avg_doc_length: float
    k1: float = 1.2
    b: float = 0.75

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_bm25_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    """Index title+text tokens of every document."""
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = np.zeros(len(corpus), dtype=np.float64)
    for pos, doc in enumerate(corpus):
        tokens = tokenize(f"{doc.title} {doc.text}", corpus.hash_config)
        lengths[pos] = len(tokens)
        for token, tf in sorted(Counter(tokens).items()):
            postings.setdefault(token, []).append((pos, tf))
    if len(corpus) == 0 or lengths.sum() == 0:
        raise ValueError("BM25 index requires a corpus with at least one token")
    return Bm25Index(
        doc_ids=tuple(d.id for d in corpus),
        postings=postings,
        doc_lengths=lengths,
        avg_doc_length=float(lengths.mean()),
        k1=k1,
        b=b,
    )


def bm25_topk(query_tokens: Sequence[str], index: Bm25Index, k: int) -> tuple[tuple[str, float], ...]:
    """Score all documents for the query tokens and return the top-k pairs.

    idf(t) = ln((N - df + 0.5) / (df + 0.5) + 1); each query-token occurrence
    contributes idf * tf * (k1+1) / (tf + k1 * (1 - b + b * len/avglen)).
    Unindexed query tokens contribute nothing, so a query with no corpus
    terms yields all-zero scores.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_docs = len(index)
    scores = np.zeros(n_docs)
    norm = index.k1 * (1.0 - index.b + index.b * index.doc_lengths / index.avg_doc_length)
    for token in query_tokens:
        plist = index.postings.get(token)
        if not plist:
            continue
        df = len(plist)
        idf = math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)
        for pos, tf in plist:
            scores[pos] += idf * tf * (index.k1 + 1.0) / (tf + norm[pos])
    return _rank(scores, index.doc_ids, k)


def bm25_search(query: Query, index: Bm25Index, hash_config, k: int) -> RankedList:
    tokens = tokenize(query.text, hash_config)
    return RankedList(query_id=query.id, results=bm25_topk(tokens, index, k))


def save_index(path: str | Path, index: DenseIndex, header: str = "") -> None:
    """Self-contained binary index: magic, version, header JSON, ids, float64 vectors."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    header_bytes = header.encode("utf-8")
    try:
        with open(tmp, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<I", INDEX_VERSION))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            metric_bytes = index.metric.encode("ascii")
            fh.write(struct.pack("<B", len(metric_bytes)))
            fh.write(metric_bytes)
            fh.write(struct.pack("<QI", len(index), index.vectors.shape[1]))
            for doc_id in index.doc_ids:
                id_bytes = doc_id.encode("utf-8")
                fh.write(struct.pack("<I", len(id_bytes)))
                fh.write(id_bytes)
            fh.write(np.ascontiguousarray(index.vectors, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_index(path: str | Path) -> tuple[DenseIndex, str]:
    """Returns (index, header string)."""
    data = Path(path).read_bytes()
    if data[:4] != INDEX_MAGIC:
        raise ValueError(f"{path}: not an index file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != INDEX_VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    offset = 8
    (header_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    header = data[offset : offset + header_len].decode("utf-8")
    offset += header_len
    (metric_len,) = struct.unpack_from("<B", data, offset)
    offset += 1
    metric = data[offset : offset + metric_len].decode("ascii")
    offset += metric_len
    count, dim = struct.unpack_from("<QI", data, offset)
    offset += 12
    doc_ids = []
    for _ in range(count):
        (id_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        doc_ids.append(data[offset : offset + id_len].decode("utf-8"))
        offset += id_len
    vectors = (
        np.frombuffer(data, dtype="<f8", count=count * dim, offset=offset)
        .reshape(count, dim)
        .copy()
    )
    return DenseIndex(doc_ids=tuple(doc_ids), vectors=vectors, metric=metric), header


def export_embeddings(index: DenseIndex, path: str | Path, header: str = "") -> None:
    """TSV export ``doc_id<TAB>v1,...,vm`` for external visualization tools."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for doc_id, vec in zip(index.doc_ids, index.vectors):
            fh.write(doc_id)
            fh.write("\t")
            fh.write(",".join(repr(float(x)) for x in vec))
            fh.write("\n")
