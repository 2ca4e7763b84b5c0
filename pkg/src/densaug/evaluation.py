"""Ranking metrics: Top-K accuracy, MRR, MAP, Recall@k, with two relevance rules.

A retrieved document is judged relevant either because one of the query's
answer strings occurs in it (as a contiguous token subsequence of the
normalized document text) or, in gold-id mode, because it is the query's
positive document. Queries with no relevant document anywhere contribute 0 to
every metric rather than being excluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Corpus, TrainingExample, tokenize
from .search import RankedList

RELEVANCE_MODES = ("answer", "gold")


def _contains_subsequence(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0 or n > len(haystack):
        return False
    first = needle[0]
    for start in range(len(haystack) - n + 1):
        if haystack[start] == first and list(haystack[start : start + n]) == list(needle):
            return True
    return False


def judge(
    ranked: RankedList,
    corpus: Corpus,
    *,
    answers: Sequence[str] | None = None,
    gold_doc_id: str | None = None,
    _token_cache: dict[str, list[str]] | None = None,
) -> list[int]:
    """Binary relevance per retrieved document, aligned with the ranking.

    Exactly one of ``answers`` (containment mode) or ``gold_doc_id`` (gold-id
    mode) selects the rule. In containment mode a document is relevant iff
    any normalized answer occurs as a contiguous token subsequence of its
    normalized text; an empty answer list is an error.
    """
    if (answers is None) == (gold_doc_id is None):
        raise ValueError("pass exactly one of answers= or gold_doc_id=")
    if gold_doc_id is not None:
        return [1 if doc_id == gold_doc_id else 0 for doc_id, _ in ranked.results]

    if not answers:
        raise ValueError(f"query {ranked.query_id!r} has no answers for containment judging")
    config = corpus.hash_config
    answer_tokens = [tokenize(a, config) for a in answers]
    relevance = []
    for doc_id, _ in ranked.results:
        if _token_cache is not None and doc_id in _token_cache:
            doc_tokens = _token_cache[doc_id]
        else:
            doc_tokens = tokenize(corpus.get(doc_id).text, config)
            if _token_cache is not None:
                _token_cache[doc_id] = doc_tokens
        hit = any(_contains_subsequence(doc_tokens, toks) for toks in answer_tokens)
        relevance.append(1 if hit else 0)
    return relevance


def _check_depth(k: int, depth: int | None, name: str) -> None:
    if k < 1:
        raise ValueError(f"{name} must be >= 1, got {k}")
    if depth is not None and k > depth:
        raise ValueError(f"{name}={k} exceeds retrieval depth {depth}")


def topk_accuracy(judgments: Sequence[Sequence[int]], k: int, depth: int | None = None) -> float:
    """Fraction of queries with at least one relevant document in ranks 1..k."""
    _check_depth(k, depth, "k")
    if not judgments:
        return 0.0
    hits = sum(1 for j in judgments if any(j[:k]))
    return hits / len(judgments)


def mrr(judgments: Sequence[Sequence[int]], cap: int = 100) -> float:
    """Mean reciprocal rank of the first relevant document, 0 beyond the cap."""
    _check_depth(cap, None, "cap")
    if not judgments:
        return 0.0
    total = 0.0
    for j in judgments:
        for rank, rel in enumerate(j[:cap], start=1):
            if rel:
                total += 1.0 / rank
                break
    return total / len(judgments)


def mean_average_precision(judgments: Sequence[Sequence[int]], cap: int = 100) -> float:
    """Mean over queries of average precision at the relevant ranks within the cap.

    AP = (sum over relevant ranks r of precision@r) / (relevant count within
    the cap); 0 when nothing relevant was retrieved.
    """
    _check_depth(cap, None, "cap")
    if not judgments:
        return 0.0
    total = 0.0
    for j in judgments:
        hits = 0
        precision_sum = 0.0
        for rank, rel in enumerate(j[:cap], start=1):
            if rel:
                hits += 1
                precision_sum += hits / rank
        if hits:
            total += precision_sum / hits
    return total / len(judgments)


def recall_at(judgments: Sequence[Sequence[int]], k: int, depth: int | None = None) -> float:
    """Identical to topk_accuracy in the single-gold setting; kept as its own name."""
    return topk_accuracy(judgments, k, depth)


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated metrics, scaled to [0, 100] with 2-decimal display rounding."""

    n_queries: int
    depth: int
    relevance: str
    metrics: dict[str, float]
    config: dict | None = None

    def to_dict(self) -> dict:
        out: dict = {
            "n_queries": self.n_queries,
            "depth": self.depth,
            "relevance": self.relevance,
            "metrics": self.metrics,
        }
        if self.config is not None:
            out["config"] = self.config
        return out


T_POINTS = (1, 5, 20, 100)


def evaluate(
    runs: Mapping[str, RankedList] | Sequence[RankedList],
    examples: Sequence[TrainingExample],
    corpus: Corpus,
    *,
    depth: int = 100,
    relevance: str = "answer",
    cap: int | None = None,
    recall_points: Sequence[int] = (),
    config: dict | None = None,
) -> MetricsReport:
    """Judge each query's ranking and aggregate the full metric suite.

    Every example must have a retrieval record; missing query ids raise with
    the full list. ``cap`` for MRR/MAP defaults to min(100, depth).
    """
    if relevance not in RELEVANCE_MODES:
        raise ValueError(f"relevance must be one of {RELEVANCE_MODES}, got {relevance!r}")
    if isinstance(runs, Mapping):
        by_id = dict(runs)
    else:
        by_id = {r.query_id: r for r in runs}
    missing = [ex.query.id for ex in examples if ex.query.id not in by_id]
    if missing:
        raise ValueError(f"no retrieval record for query ids: {', '.join(sorted(missing))}")
    if cap is None:
        cap = min(100, depth)
    _check_depth(cap, depth, "cap")

    token_cache: dict[str, list[str]] = {}
    judgments = []
    for ex in examples:
        ranked = by_id[ex.query.id]
        if relevance == "gold":
            judgments.append(judge(ranked, corpus, gold_doc_id=ex.positive_doc_id))
        else:
            judgments.append(
                judge(ranked, corpus, answers=ex.answers, _token_cache=token_cache)
            )

    def scaled(value: float) -> float:
        return round(value * 100.0, 2)

    metrics: dict[str, float] = {}
    for k in T_POINTS:
        if k <= depth:
            metrics[f"T{k}"] = scaled(topk_accuracy(judgments, k, depth))
    metrics["MRR"] = scaled(mrr(judgments, cap))
    metrics["MAP"] = scaled(mean_average_precision(judgments, cap))
    for k in recall_points:
        _check_depth(k, depth, "recall point")
        metrics[f"R@{k}"] = scaled(recall_at(judgments, k, depth))

    return MetricsReport(
        n_queries=len(examples),
        depth=depth,
        relevance=relevance,
        metrics=metrics,
        config=config,
    )
