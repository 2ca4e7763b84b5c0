"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria are property-based plus scaled-down directional checks; full-scale
benchmark numbers are out of reach at desk scale by design. Run with
``pytest tests/test_acceptance.py -v -s`` to see the per-criterion lines.
"""

import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from densaug.augment import (
    MixupConfig,
    PerturbConfig,
    build_interpolations,
    interpolate,
    perturb,
    sample_masks,
    soft_label_bce,
)
from densaug.cli import main
from densaug.corpus import HashConfig, load_corpus, load_training, tokenize
from densaug.encoder import encode_batch, backward, init_params, load_checkpoint, save_checkpoint
from densaug.evaluation import judge, mean_average_precision, mrr, recall_at, topk_accuracy
from densaug.search import batch_dense_topk, bm25_topk, build_bm25_index, encode_corpus
from densaug.train import BatchData, TrainConfig, batch_loss, nll_loss, train

from conftest import make_corpus, make_example
from synthdata import generate_cluster_dataset, write_dataset

FD_EPS = 1e-4
FD_RTOL = 1e-3
FD_ATOL = 1e-8


@contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[criterion {number}] {description}: FAIL")
        raise
    print(f"[criterion {number}] {description}: PASS")


def assert_fd_close(analytic: float, fd: float, context: str) -> None:
    assert abs(analytic - fd) <= FD_ATOL + FD_RTOL * max(abs(analytic), abs(fd)), (
        f"{context}: analytic {analytic} vs finite difference {fd}"
    )


def fd_over_params(params, scalar_fn, grads):
    """Central finite differences over every parameter entry of both towers."""
    for p_arr, g_arr in zip(params.arrays(), grads.arrays()):
        flat_p = p_arr.reshape(-1)
        flat_g = g_arr.reshape(-1)
        for k in range(flat_p.size):
            orig = flat_p[k]
            flat_p[k] = orig + FD_EPS
            up = scalar_fn()
            flat_p[k] = orig - FD_EPS
            down = scalar_fn()
            flat_p[k] = orig
            assert_fd_close(float(flat_g[k]), (up - down) / (2 * FD_EPS), f"entry {k}")


def random_feature_maps(rng, count, vocab):
    maps = []
    for _ in range(count):
        k = int(rng.integers(1, 5))
        indices = rng.choice(vocab, size=k, replace=False)
        maps.append({int(i): int(rng.integers(1, 4)) for i in indices})
    return maps


def tiny_training_setup(seed, hard):
    config = HashConfig(vocab_dim=32, seed=2)
    texts = {f"d{i}": f"tok{i} tok{(i * 3) % 7} filler" for i in range(8)}
    corpus = make_corpus(texts, config)
    ids = list(texts)
    examples = []
    for i in range(4):
        hard_ids = tuple(ids[(i + 1 + h) % len(ids)] for h in range(hard))
        examples.append(make_example(f"q{i}", f"tok{i} about", f"d{i}", config, hard=hard_ids))
    params = init_params(seed, vocab_dim=32, hidden_dim=4, output_dim=4)
    batch = BatchData.from_examples(examples, corpus, include_hard=hard > 0)
    return params, batch


class TestCriterion1GradientSuite:
    def test_gradient_suite(self):
        with criterion(1, "gradient suite vs central finite differences"):
            start = time.perf_counter()

            # (a) encoder: quadratic + linear readout loss over both towers
            for seed in range(20):
                rng = np.random.default_rng(seed)
                params = init_params(seed, vocab_dim=32, hidden_dim=4, output_dim=4)
                q_maps = random_feature_maps(rng, 2, 32)
                d_maps = random_feature_maps(rng, 2, 32)
                readout = rng.normal(size=(2, 4))

                def encoder_loss():
                    q_vecs, _ = encode_batch(q_maps, "query", params)
                    d_vecs, _ = encode_batch(d_maps, "doc", params)
                    return float(
                        0.5 * (q_vecs**2).sum() + (readout * q_vecs).sum()
                        + 0.5 * (d_vecs**2).sum() + (readout * d_vecs).sum()
                    )

                q_vecs, q_tape = encode_batch(q_maps, "query", params)
                d_vecs, d_tape = encode_batch(d_maps, "doc", params)
                grads = backward(
                    [(q_tape, q_vecs + readout), (d_tape, d_vecs + readout)], params
                )
                fd_over_params(params, encoder_loss, grads)

            # (b) in-batch NLL at the score matrix
            for seed in range(20):
                rng = np.random.default_rng(1000 + seed)
                scores = rng.normal(size=(4, 6)) * 2
                positives = rng.integers(0, 6, size=4)
                _, grad = nll_loss(scores, positives)
                for i in range(4):
                    for j in range(6):
                        orig = scores[i, j]
                        scores[i, j] = orig + FD_EPS
                        up, _ = nll_loss(scores, positives)
                        scores[i, j] = orig - FD_EPS
                        down, _ = nll_loss(scores, positives)
                        scores[i, j] = orig
                        assert_fd_close(grad[i, j], (up - down) / (2 * FD_EPS), f"S[{i},{j}]")

            # (c) soft-label BCE at the similarity score
            rng = np.random.default_rng(7)
            for _ in range(100):
                s = float(rng.uniform(-8, 8))
                lam = float(rng.uniform())
                _, dscore = soft_label_bce(s, lam)
                up, _ = soft_label_bce(s + FD_EPS, lam)
                down, _ = soft_label_bce(s - FD_EPS, lam)
                assert_fd_close(dscore, (up - down) / (2 * FD_EPS), f"s={s}")

            # (d) the full combined objective, perturbation and mixup included
            for seed in range(20):
                side = "dar" if seed % 2 == 0 else "qar"
                hard = 1 if seed % 3 == 0 else 0
                params, batch = tiny_training_setup(seed, hard)
                perturb_cfg = PerturbConfig(n_masks=2, drop_rate=0.1)
                mixup_cfg = MixupConfig(target_mode=side)
                step_seed = 9000 + seed
                _, grads, _ = batch_loss(params, batch, step_seed, perturb_cfg, mixup_cfg)

                def combined_loss():
                    breakdown, _, _ = batch_loss(
                        params, batch, step_seed, perturb_cfg, mixup_cfg,
                        compute_grads=False,
                    )
                    return breakdown.total

                fd_over_params(params, combined_loss, grads)

            elapsed = time.perf_counter() - start
            assert elapsed < 30.0, f"gradient suite took {elapsed:.1f}s"


def oracle_topk(judgments, k):
    hits = 0
    for j in judgments:
        if any(rel == 1 for rel in list(j)[:k]):
            hits += 1
    return hits / len(judgments)


def oracle_mrr(judgments, cap):
    total = 0.0
    for j in judgments:
        head = list(j)[:cap]
        for position, rel in enumerate(head):
            if rel == 1:
                total += 1.0 / (position + 1)
                break
    return total / len(judgments)


def oracle_map(judgments, cap):
    total = 0.0
    for j in judgments:
        head = list(j)[:cap]
        ranks = [r + 1 for r, rel in enumerate(head) if rel == 1]
        if ranks:
            total += sum(sum(head[:r]) / r for r in ranks) / len(ranks)
    return total / len(judgments)


class TestCriterion2MetricOracles:
    def test_metric_oracles(self):
        with criterion(2, "metrics equal brute-force oracles on 1000 random lists"):
            start = time.perf_counter()
            rng = np.random.default_rng(99)
            judgments = []
            for _ in range(1000):
                length = int(rng.integers(0, 101))
                judgments.append(list((rng.random(length) < 0.08).astype(int)))
            for k in (1, 5, 20, 100):
                assert topk_accuracy(judgments, k) == oracle_topk(judgments, k)
                assert recall_at(judgments, k) == oracle_topk(judgments, k)
            for cap in (10, 100):
                assert mrr(judgments, cap) == oracle_mrr(judgments, cap)
                assert abs(
                    mean_average_precision(judgments, cap) - oracle_map(judgments, cap)
                ) < 1e-12
            elapsed = time.perf_counter() - start
            assert elapsed < 10.0, f"metric suite took {elapsed:.1f}s"


class TestCriterion3AugmentationIdentities:
    def test_augmentation_identities(self):
        with criterion(3, "interpolation endpoints, betweenness, dropout statistics"):
            rng = np.random.default_rng(17)

            for _ in range(100):
                a, b = rng.normal(size=8), rng.normal(size=8)
                assert np.array_equal(interpolate(a, b, 1.0), a)
                assert np.array_equal(interpolate(a, b, 0.0), b)

            for _ in range(10_000):
                a, b = rng.normal(size=4), rng.normal(size=4)
                lam = float(rng.uniform())
                mixed = interpolate(a, b, lam)
                assert np.all(mixed >= np.minimum(a, b) - 1e-12)
                assert np.all(mixed <= np.maximum(a, b) + 1e-12)

            masks = sample_masks(np.random.default_rng(23), 10_000, 32, 0.1)
            zero_fraction = 1.0 - masks.mean()
            assert 0.09 <= zero_fraction <= 0.11, f"zero fraction {zero_fraction}"

            vec = np.array([1.5, -2.0, 0.4, 3.0, -0.7, 2.2, -1.1, 0.9])
            variants = perturb(
                vec, PerturbConfig(n_masks=100_000, drop_rate=0.1, rescale=True),
                np.random.default_rng(29),
            )
            np.testing.assert_allclose(variants.mean(axis=0), vec, rtol=0.01)


class TestCriterion4TripleCounting:
    def test_triple_counting(self):
        with criterion(4, "batch of 32 yields 31 interpolation triples per query"):
            rng = np.random.default_rng(3)
            variants = rng.normal(size=(32, 3, 16))
            pool = rng.normal(size=(32, 16))
            triples = build_interpolations(variants, pool, None, rng)
            assert len(triples) == 992
            counts = {}
            for t in triples:
                counts[t.anchor_index] = counts.get(t.anchor_index, 0) + 1
            assert all(counts[i] == 31 for i in range(32))


@pytest.fixture(scope="module")
def cluster_dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("clusters")
    data = generate_cluster_dataset(
        seed=42, n_docs=2000, n_clusters=20, n_train=500, n_eval=200
    )
    paths = write_dataset(data, tmp)
    config = HashConfig(vocab_dim=8192, seed=42)
    corpus = load_corpus(paths["passages"], config)
    train_full = load_training(paths["train"], config, corpus)
    eval_set = load_training(paths["eval"], config, corpus)
    return corpus, train_full, eval_set


def run_training_and_mrr(corpus, examples, eval_set, seed, augmented):
    cfg = TrainConfig(batch_size=32, epochs=25, lr=3e-3, seed=seed)
    if augmented:
        perturb_cfg = PerturbConfig(n_masks=3, drop_rate=0.1)
        mixup_cfg = MixupConfig(enabled=True)
    else:
        perturb_cfg = PerturbConfig(n_masks=1, drop_rate=0.0)
        mixup_cfg = MixupConfig(enabled=False)
    result = train(corpus, examples, cfg, perturb_cfg, mixup_cfg,
                   hidden_dim=32, output_dim=32)
    index = encode_corpus(corpus, result.params)
    ranked = batch_dense_topk([ex.query for ex in eval_set], index, result.params, 100)
    judgments = [
        judge(r, corpus, answers=ex.answers)
        for r, ex in zip(ranked, eval_set.examples)
    ]
    return result, judgments


class TestCriterion5EndToEndTraining:
    def test_plain_objective_reaches_t5(self, cluster_dataset):
        with criterion(5, "plain objective reaches T-5 >= 90 on held-out queries"):
            start = time.perf_counter()
            corpus, train_full, eval_set = cluster_dataset
            _, judgments = run_training_and_mrr(
                corpus, train_full, eval_set, seed=0, augmented=False
            )
            t5 = topk_accuracy(judgments, 5, depth=100) * 100.0
            elapsed = time.perf_counter() - start
            assert t5 >= 90.0, f"T-5 = {t5:.2f}"
            assert elapsed < 300.0, f"end-to-end run took {elapsed:.1f}s"
            print(f"  T-5 = {t5:.2f} in {elapsed:.1f}s", end=" ")


class TestCriterion6LowResourceDirection:
    def test_augmentation_does_not_hurt_low_resource_mrr(self, cluster_dataset):
        with criterion(6, "low-resource augmented MRR >= baseline MRR - 0.01 over 5 seeds"):
            corpus, train_full, eval_set = cluster_dataset
            low_resource = list(train_full)[:100]
            base_scores, aug_scores = [], []
            for seed in range(5):
                _, judgments = run_training_and_mrr(
                    corpus, low_resource, eval_set, seed, augmented=False
                )
                base_scores.append(mrr(judgments, 100))
                _, judgments = run_training_and_mrr(
                    corpus, low_resource, eval_set, seed, augmented=True
                )
                aug_scores.append(mrr(judgments, 100))
            base_mean = float(np.mean(base_scores))
            aug_mean = float(np.mean(aug_scores))
            assert aug_mean >= base_mean - 0.01, (
                f"augmented {aug_mean:.4f} vs baseline {base_mean:.4f}"
            )
            print(f"  baseline {base_mean:.4f}, augmented {aug_mean:.4f}", end=" ")


CONFIG_BODY = """
seed = 13
[corpus]
vocab_dim = 2048
[encoder]
hidden_dim = 8
output_dim = 8
[train]
batch_size = 8
epochs = 3
lr = 0.003
"""


def run_pipeline(raw_paths, config_path, workdir, threads):
    cache = workdir / "cache"
    run = workdir / "run"
    retrieval = workdir / "retrieval.jsonl"
    metrics = workdir / "metrics.json"
    thread_args = ["--threads", str(threads)]
    assert main(["ingest", "--config", str(config_path),
                 "--passages", str(raw_paths["passages"]),
                 "--train", str(raw_paths["train"]),
                 "--eval", str(raw_paths["eval"]),
                 "--out", str(cache), *thread_args]) == 0
    assert main(["train", "--config", str(config_path), "--data", str(cache),
                 "--out", str(run), *thread_args]) == 0
    assert main(["retrieve", "--config", str(config_path), "--data", str(cache),
                 "--checkpoint", str(run / "checkpoint.darc"),
                 "--out", str(retrieval), "--topk", "20", *thread_args]) == 0
    assert main(["eval", "--config", str(config_path), "--data", str(cache),
                 "--retrieval", str(retrieval), "--out", str(metrics),
                 *thread_args]) == 0
    return (run / "checkpoint.darc").read_bytes(), metrics.read_bytes()


class TestCriterion7Determinism:
    def test_pipeline_bytes_reproduce(self, tmp_path):
        with criterion(7, "identical seeds reproduce bytes; threads change nothing"):
            data = generate_cluster_dataset(
                seed=21, n_docs=120, n_clusters=6, n_train=64, n_eval=24
            )
            raw = write_dataset(data, tmp_path / "raw")
            config_path = tmp_path / "run.toml"
            config_path.write_text(CONFIG_BODY)

            first = run_pipeline(raw, config_path, tmp_path / "one", threads=1)
            second = run_pipeline(raw, config_path, tmp_path / "two", threads=1)
            threaded = run_pipeline(raw, config_path, tmp_path / "thr", threads=4)

            assert first[0] == second[0], "checkpoints differ between identical runs"
            assert first[1] == second[1], "metrics differ between identical runs"
            assert first[0] == threaded[0], "thread count changed the checkpoint"
            assert first[1] == threaded[1], "thread count changed the metrics"


def reference_okapi(query_tokens, docs_tokens, k1, b):
    from collections import Counter

    n = len(docs_tokens)
    lengths = [len(toks) for toks in docs_tokens]
    avg = sum(lengths) / n
    tfs = [Counter(toks) for toks in docs_tokens]
    df = Counter()
    for tf in tfs:
        for term in tf:
            df[term] += 1
    out = []
    for pos in range(n):
        score = 0.0
        for term in query_tokens:
            tf = tfs[pos].get(term, 0)
            if tf == 0:
                continue
            idf = math.log((n - df[term] + 0.5) / (df[term] + 0.5) + 1.0)
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * lengths[pos] / avg))
        out.append(score)
    return out


class TestCriterion8Bm25Parity:
    def test_rankings_match_reference(self):
        with criterion(8, "BM25 rankings match an independent Okapi reference"):
            rng = np.random.default_rng(5)
            config = HashConfig(vocab_dim=4096, seed=5)
            words = [f"term{i:02d}" for i in range(60)]
            texts = {}
            for i in range(300):
                length = int(rng.integers(4, 30))
                texts[f"d{i:03d}"] = " ".join(
                    words[int(k)] for k in rng.integers(0, 60, length)
                )
            corpus = make_corpus(texts, config)
            index = build_bm25_index(corpus, k1=1.2, b=0.75)
            docs_tokens = [tokenize(f"{d.title} {d.text}", config) for d in corpus]
            for q in range(100):
                n_tokens = int(rng.integers(1, 6))
                q_tokens = [words[int(k)] for k in rng.integers(0, 60, n_tokens)]
                got = bm25_topk(q_tokens, index, k=300)
                ref = reference_okapi(q_tokens, docs_tokens, 1.2, 0.75)
                expected = sorted(
                    zip(corpus.ids, ref), key=lambda pair: (-pair[1], pair[0])
                )
                assert [d for d, _ in got] == [d for d, _ in expected]
                np.testing.assert_allclose(
                    [s for _, s in got], [s for _, s in expected], rtol=1e-12
                )


class TestCriterion9CheckpointRoundTrip:
    def test_save_load_save_is_bitwise_identical(self, tmp_path):
        with criterion(9, "checkpoint save -> load -> save is bitwise identical"):
            params = init_params(31, vocab_dim=128, hidden_dim=8, output_dim=8)
            first = tmp_path / "first.darc"
            second = tmp_path / "second.darc"
            save_checkpoint(first, params, hash_seed=42)
            loaded, hash_seed = load_checkpoint(first)
            save_checkpoint(second, loaded, hash_seed=hash_seed)
            assert first.read_bytes() == second.read_bytes()
