"""On-disk artifact formats shared by the CLI stages.

All JSON here is written with sorted keys and no timestamps, so re-running a
stage with identical inputs and configuration reproduces identical bytes.
Feature maps are serialized with string keys (JSON requirement) and re-read
into int-keyed maps in canonical ascending order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import (
    Corpus,
    Document,
    HashConfig,
    Query,
    TrainingExample,
    TrainingSet,
    canonical_features,
)
from .search import RankedList

CORPUS_KIND = "densaug-corpus"
EXAMPLES_KIND = "densaug-examples"
RETRIEVAL_KIND = "densaug-retrieval"
FORMAT_VERSION = 1


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _read_header(path: Path, expected_kind: str) -> tuple[dict, list[str]]:
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty artifact file")
    header = json.loads(lines[0])
    if header.get("kind") != expected_kind:
        raise ValueError(f"{path}: expected a {expected_kind} file, got {header.get('kind')!r}")
    if header.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format')!r}")
    return header, lines[1:]


def _features_to_json(features: dict[int, int]) -> dict[str, int]:
    return {str(k): v for k, v in features.items()}


def _features_from_json(raw: dict[str, int]) -> dict[int, int]:
    return canonical_features({int(k): int(v) for k, v in raw.items()})


def write_corpus_cache(path: str | Path, corpus: Corpus, config: dict) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "kind": CORPUS_KIND,
            "format": FORMAT_VERSION,
            "n_documents": len(corpus),
            "config": config,
        }) + "\n")
        for doc in corpus:
            fh.write(_dumps({
                "id": doc.id,
                "title": doc.title,
                "text": doc.text,
                "features": _features_to_json(doc.features),
            }) + "\n")


def read_corpus_cache(path: str | Path) -> tuple[Corpus, dict]:
    """Returns (corpus, embedded config dict)."""
    path = Path(path)
    header, lines = _read_header(path, CORPUS_KIND)
    config = header["config"]
    hash_section = config["corpus"]
    hash_config = HashConfig(
        vocab_dim=int(hash_section["vocab_dim"]),
        lowercase=bool(hash_section["lowercase"]),
        seed=int(hash_section["hash_seed"]),
    )
    documents = []
    for line in lines:
        if not line.strip():
            continue
        row = json.loads(line)
        documents.append(
            Document(
                id=row["id"],
                title=row["title"],
                text=row["text"],
                features=_features_from_json(row["features"]),
            )
        )
    return Corpus(documents, hash_config), config


def write_examples_cache(
    path: str | Path,
    examples: TrainingSet | Sequence[TrainingExample],
    config: dict,
    skipped: int | None = None,
) -> None:
    if isinstance(examples, TrainingSet):
        if skipped is None:
            skipped = examples.skipped
        examples = examples.examples
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "kind": EXAMPLES_KIND,
            "format": FORMAT_VERSION,
            "n_examples": len(examples),
            "skipped": skipped or 0,
            "config": config,
        }) + "\n")
        for ex in examples:
            fh.write(_dumps({
                "query_id": ex.query.id,
                "question": ex.query.text,
                "features": _features_to_json(ex.query.features),
                "positive_doc_id": ex.positive_doc_id,
                "hard_negative_doc_ids": list(ex.hard_negative_doc_ids),
                "answers": list(ex.answers),
            }) + "\n")


def read_examples_cache(path: str | Path) -> tuple[list[TrainingExample], dict]:
    path = Path(path)
    header, lines = _read_header(path, EXAMPLES_KIND)
    examples = []
    for line in lines:
        if not line.strip():
            continue
        row = json.loads(line)
        examples.append(
            TrainingExample(
                query=Query(
                    id=row["query_id"],
                    text=row["question"],
                    features=_features_from_json(row["features"]),
                ),
                positive_doc_id=row["positive_doc_id"],
                hard_negative_doc_ids=tuple(row["hard_negative_doc_ids"]),
                answers=tuple(row["answers"]),
            )
        )
    return examples, header["config"]


def write_retrieval(
    path: str | Path,
    ranked_lists: Iterable[RankedList],
    config: dict,
    retriever: str,
    metric: str,
    topk: int,
) -> None:
    """JSON-lines: a header record, then one record per query with ranked results."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "kind": RETRIEVAL_KIND,
            "format": FORMAT_VERSION,
            "retriever": retriever,
            "metric": metric,
            "topk": topk,
            "config": config,
        }) + "\n")
        for ranked in ranked_lists:
            fh.write(_dumps({
                "query_id": ranked.query_id,
                "results": [
                    {"doc_id": doc_id, "score": score, "rank": rank}
                    for rank, (doc_id, score) in enumerate(ranked.results, start=1)
                ],
            }) + "\n")


def read_retrieval(path: str | Path) -> tuple[dict[str, RankedList], dict]:
    """Returns ({query_id: RankedList}, header dict)."""
    path = Path(path)
    header, lines = _read_header(path, RETRIEVAL_KIND)
    runs: dict[str, RankedList] = {}
    for line in lines:
        if not line.strip():
            continue
        row = json.loads(line)
        results = tuple((r["doc_id"], float(r["score"])) for r in row["results"])
        runs[row["query_id"]] = RankedList(query_id=row["query_id"], results=results)
    return runs, header


def write_metrics(path: str | Path, report_dict: dict) -> None:
    Path(path).write_text(
        json.dumps(report_dict, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
