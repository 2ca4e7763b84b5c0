import numpy as np
import pytest

from densaug.evaluation import (
    MetricsReport,
    evaluate,
    judge,
    mean_average_precision,
    mrr,
    recall_at,
    topk_accuracy,
)
from densaug.search import RankedList

from conftest import make_corpus, make_example


def ranked(query_id, doc_ids, scores=None):
    if scores is None:
        scores = [float(len(doc_ids) - i) for i in range(len(doc_ids))]
    return RankedList(query_id=query_id, results=tuple(zip(doc_ids, scores)))


class TestJudge:
    def test_answer_token_present(self, hash_config):
        corpus = make_corpus({"d1": "Paris is the capital"}, hash_config)
        out = judge(ranked("q", ["d1"]), corpus, answers=["paris"])
        assert out == [1]

    def test_substring_inside_word_does_not_match(self, hash_config):
        # token-boundary rule: "paris" must not match inside "comparison"
        corpus = make_corpus({"d1": "comparison"}, hash_config)
        out = judge(ranked("q", ["d1"]), corpus, answers=["paris"])
        assert out == [0]

    def test_multi_token_answer_needs_contiguous_match(self, hash_config):
        corpus = make_corpus(
            {"d1": "i love New York city", "d2": "york new haven"}, hash_config
        )
        out = judge(ranked("q", ["d1", "d2"]), corpus, answers=["new york"])
        assert out == [1, 0]

    def test_empty_answers_rejected(self, hash_config):
        corpus = make_corpus({"d1": "text"}, hash_config)
        with pytest.raises(ValueError, match="no answers"):
            judge(ranked("q", ["d1"]), corpus, answers=[])

    def test_exactly_one_mode_required(self, hash_config):
        corpus = make_corpus({"d1": "text"}, hash_config)
        with pytest.raises(ValueError, match="exactly one"):
            judge(ranked("q", ["d1"]), corpus)
        with pytest.raises(ValueError, match="exactly one"):
            judge(ranked("q", ["d1"]), corpus, answers=["a"], gold_doc_id="d1")

    def test_gold_id_mode(self, hash_config):
        corpus = make_corpus({"d1": "a", "d2": "b"}, hash_config)
        out = judge(ranked("q", ["d2", "d1"]), corpus, gold_doc_id="d1")
        assert out == [0, 1]

    def test_matches_independent_subsequence_oracle(self, hash_config, rng):
        # oracle: separator-padded string containment over normalized tokens
        words = [f"w{i}" for i in range(30)]
        texts = {}
        planted = {}
        for i in range(100):
            tokens = [words[int(k)] for k in rng.integers(0, 30, size=12)]
            if rng.random() < 0.5:
                pos = int(rng.integers(0, 10))
                tokens[pos : pos + 2] = ["answer", "token"]
                planted[f"d{i}"] = True
            else:
                planted[f"d{i}"] = False
            texts[f"d{i}"] = " ".join(tokens)
        corpus = make_corpus(texts, hash_config)
        doc_ids = list(texts)
        out = judge(ranked("q", doc_ids), corpus, answers=["Answer token"])
        from densaug.corpus import tokenize

        for doc_id, rel in zip(doc_ids, out):
            hay = " " + " ".join(tokenize(corpus.get(doc_id).text, hash_config)) + " "
            needle = " " + " ".join(tokenize("Answer token", hash_config)) + " "
            assert rel == (1 if needle in hay else 0)
            assert rel == (1 if planted[doc_id] else 0)


def brute_force_topk(judgments, k):
    hits = 0
    for j in judgments:
        found = False
        for rel in list(j)[:k]:
            if rel == 1:
                found = True
        if found:
            hits += 1
    return hits / len(judgments) if judgments else 0.0


def brute_force_mrr(judgments, cap):
    total = 0.0
    for j in judgments:
        for position in range(min(cap, len(j))):
            if j[position] == 1:
                total += 1.0 / (position + 1)
                break
    return total / len(judgments) if judgments else 0.0


def brute_force_map(judgments, cap):
    total = 0.0
    for j in judgments:
        head = list(j)[:cap]
        relevant_ranks = [r + 1 for r, rel in enumerate(head) if rel == 1]
        if not relevant_ranks:
            continue
        ap = 0.0
        for r in relevant_ranks:
            # precision@r recomputed from scratch each time
            ap += sum(head[:r]) / r
        total += ap / len(relevant_ranks)
    return total / len(judgments) if judgments else 0.0


def random_judgments(rng, count, depth=100):
    out = []
    for _ in range(count):
        length = int(rng.integers(0, depth + 1))
        out.append(list((rng.random(length) < 0.1).astype(int)))
    return out


class TestTopkAccuracy:
    def test_first_relevant_at_rank_four(self):
        j = [[0, 0, 0, 1, 0]]
        assert topk_accuracy(j, 5) == 1.0
        assert topk_accuracy(j, 1) == 0.0

    def test_nothing_relevant(self):
        j = [[0, 0, 0], [0, 0]]
        for k in (1, 2, 3):
            assert topk_accuracy(j, k) == 0.0

    def test_matches_brute_force(self, rng):
        judgments = random_judgments(rng, 500)
        for k in (1, 3, 10, 50, 100):
            assert topk_accuracy(judgments, k) == brute_force_topk(judgments, k)

    def test_k_beyond_depth_rejected(self):
        with pytest.raises(ValueError, match="depth"):
            topk_accuracy([[1]], 20, depth=10)

    def test_monotone_in_k(self, rng):
        judgments = random_judgments(rng, 100)
        values = [topk_accuracy(judgments, k) for k in (1, 5, 20, 100)]
        assert values == sorted(values)


class TestMrr:
    def test_first_rank(self):
        assert mrr([[1, 0, 0]]) == 1.0

    def test_fourth_rank(self):
        assert mrr([[0, 0, 0, 1]]) == 0.25

    def test_mixed_set(self):
        # hand computation: (1 + 0.5 + 0) / 3
        assert mrr([[1, 0], [0, 1], [0, 0]]) == 0.5

    def test_relevant_beyond_cap_counts_zero(self):
        j = [[0] * 10 + [1]]
        assert mrr(j, cap=10) == 0.0
        assert mrr(j, cap=11) == pytest.approx(1.0 / 11)

    def test_matches_brute_force(self, rng):
        judgments = random_judgments(rng, 500)
        for cap in (5, 50, 100):
            assert mrr(judgments, cap) == brute_force_mrr(judgments, cap)


class TestMap:
    def test_all_relevant_is_one(self):
        assert mean_average_precision([[1, 1, 1, 1]]) == 1.0

    def test_single_relevant_at_rank_two(self):
        assert mean_average_precision([[0, 1, 0, 0, 0]]) == 0.5

    def test_matches_brute_force_exactly(self, rng):
        judgments = random_judgments(rng, 500)
        for cap in (10, 100):
            got = mean_average_precision(judgments, cap)
            expected = brute_force_map(judgments, cap)
            assert abs(got - expected) < 1e-12

    def test_no_relevant_contributes_zero(self):
        assert mean_average_precision([[0, 0], [1, 0]]) == 0.5


class TestRecallAt:
    def test_same_shapes_as_topk(self, rng):
        assert recall_at([[0, 0, 0, 1, 0]], 5) == 1.0
        assert recall_at([[0, 0, 0]], 3) == 0.0
        judgments = random_judgments(rng, 300)
        for k in (1, 10, 100):
            assert recall_at(judgments, k) == brute_force_topk(judgments, k)


class TestEvaluate:
    def _setup(self, hash_config, reverse=False):
        texts = {f"d{i}": f"subject {i} content" for i in range(5)}
        corpus = make_corpus(texts, hash_config)
        examples = [
            make_example(f"q{i}", f"about subject {i}", f"d{i}", hash_config)
            for i in range(5)
        ]
        runs = {}
        for i in range(5):
            order = [f"d{(i + off) % 5}" for off in range(5)]
            if reverse:
                order = order[::-1]
            runs[f"q{i}"] = ranked(f"q{i}", order)
        return corpus, examples, runs

    def test_perfect_retriever_scores_hundred(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        report = evaluate(runs, examples, corpus, relevance="gold")
        assert report.metrics["T1"] == 100.0
        assert report.metrics["T100"] == 100.0
        assert report.metrics["MRR"] == 100.0
        assert report.metrics["MAP"] == 100.0

    def test_reversed_adversary_misses_at_one(self, hash_config):
        corpus, examples, runs = self._setup(hash_config, reverse=True)
        report = evaluate(runs, examples, corpus, relevance="gold")
        assert report.metrics["T1"] == 0.0
        assert report.metrics["T5"] == 100.0  # gold still within the 5 retrieved

    def test_missing_query_record_lists_ids(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        del runs["q2"]
        del runs["q4"]
        with pytest.raises(ValueError, match=r"q2, q4"):
            evaluate(runs, examples, corpus, relevance="gold")

    def test_topk_points_monotone(self, hash_config):
        corpus, examples, runs = self._setup(hash_config, reverse=True)
        report = evaluate(runs, examples, corpus, relevance="gold")
        keys = [k for k in ("T1", "T5", "T20", "T100") if k in report.metrics]
        values = [report.metrics[k] for k in keys]
        assert values == sorted(values)

    def test_mode_and_config_recorded(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        report = evaluate(
            runs, examples, corpus, relevance="gold", config={"seed": 1}
        )
        payload = report.to_dict()
        assert payload["relevance"] == "gold"
        assert payload["config"] == {"seed": 1}
        assert payload["n_queries"] == 5

    def test_answer_mode(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        examples = [
            make_example(f"q{i}", f"about subject {i}", f"d{i}", hash_config,
                         answers=(f"subject {i}",))
            for i in range(5)
        ]
        report = evaluate(runs, examples, corpus, relevance="answer")
        assert report.metrics["T1"] == 100.0

    def test_rank_only_dependence(self, hash_config):
        # a strictly increasing transform of every score changes no metric
        corpus, examples, runs = self._setup(hash_config, reverse=True)
        transformed = {
            qid: RankedList(
                query_id=qid,
                results=tuple((d, float(np.tanh(s) * 3 + 2)) for d, s in r.results),
            )
            for qid, r in runs.items()
        }
        a = evaluate(runs, examples, corpus, relevance="gold")
        b = evaluate(transformed, examples, corpus, relevance="gold")
        assert a.metrics == b.metrics

    def test_recall_points(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        report = evaluate(
            runs, examples, corpus, relevance="gold", recall_points=(1, 5)
        )
        assert report.metrics["R@1"] == 100.0
        assert report.metrics["R@5"] == 100.0

    def test_cap_beyond_depth_rejected(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        with pytest.raises(ValueError, match="depth"):
            evaluate(runs, examples, corpus, relevance="gold", depth=10, cap=50)

    def test_values_scaled_with_two_decimals(self, hash_config):
        corpus, examples, runs = self._setup(hash_config)
        del runs["q0"]
        runs["q0"] = ranked("q0", [f"d{(4 - off) % 5}" for off in range(5)])
        report = evaluate(runs, examples, corpus, relevance="gold")
        for value in report.metrics.values():
            assert 0.0 <= value <= 100.0
            assert value == round(value, 2)
