"""Command-line front end: ingest -> train -> encode/retrieve -> eval -> export.

One ``--seed`` drives every random choice (feature hashing, parameter init,
shuffling, augmentation noise). ``--threads`` only parallelizes corpus
encoding and search and never changes output bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import artifacts
from .config import RunConfig, load_run_config
from .corpus import load_corpus, load_training
from .encoder import load_checkpoint
from .evaluation import evaluate
from .search import (
    batch_dense_topk,
    build_bm25_index,
    bm25_search,
    encode_corpus,
    export_embeddings,
    load_index,
    save_index,
)
from .train import TrainingError, train


class CliError(Exception):
    pass


def _onoff(value: str) -> bool:
    if value == "on":
        return True
    if value == "off":
        return False
    raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {value!r}")


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for corpus encoding and search")


def _run_config(args: argparse.Namespace, extra: dict | None = None) -> RunConfig:
    overrides: dict = {"seed": args.seed, "threads": args.threads}
    if extra:
        overrides.update(extra)
    return load_run_config(args.config, overrides)


def _train_overrides(args: argparse.Namespace) -> dict:
    return {
        "train.batch_size": args.batch_size,
        "train.epochs": args.epochs,
        "train.lr": args.lr,
        "train.hard_negatives": args.hard_negatives,
        "mixup.enabled": args.mixup,
        "mixup.weight": args.mixup_weight,
        "perturb.n": args.perturb_n,
        "perturb.p": args.perturb_p,
        "perturb.rescale": args.perturb_rescale,
        "augment.side": args.augment_side,
    }


def _search_overrides(args: argparse.Namespace) -> dict:
    out = {"search.topk": getattr(args, "topk", None), "search.sim": getattr(args, "sim", None)}
    if hasattr(args, "retriever"):
        out["search.retriever"] = args.retriever
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_cached_corpus(data_dir: Path):
    return artifacts.read_corpus_cache(_require(data_dir / "corpus.jsonl", "corpus cache"))


def _load_checkpoint_for(corpus, path: Path):
    params, hash_seed = load_checkpoint(_require(path, "checkpoint"))
    cfg = corpus.hash_config
    if hash_seed != cfg.seed or params.vocab_dim != cfg.vocab_dim:
        raise CliError(
            f"checkpoint {path} was trained with hash seed {hash_seed} /"
            f" vocab_dim {params.vocab_dim}, but the corpus cache uses"
            f" seed {cfg.seed} / vocab_dim {cfg.vocab_dim}"
        )
    return params


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    embedded = cfg.resolved()
    corpus = load_corpus(_require(args.passages, "passages file"), cfg.hash)
    training = load_training(_require(args.train, "training file"), cfg.hash, corpus)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    artifacts.write_corpus_cache(out / "corpus.jsonl", corpus, embedded)
    artifacts.write_examples_cache(out / "train.jsonl", training, embedded)
    print(f"ingested {len(corpus)} documents, {len(training)} training examples"
          f" ({training.skipped} skipped)")
    if args.eval is not None:
        eval_set = load_training(_require(args.eval, "eval file"), cfg.hash, corpus)
        artifacts.write_examples_cache(out / "eval.jsonl", eval_set, embedded)
        print(f"ingested {len(eval_set)} eval examples ({eval_set.skipped} skipped)")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(args, _train_overrides(args))
    corpus, corpus_cfg = _load_cached_corpus(args.data)
    examples, _ = artifacts.read_examples_cache(
        _require(args.data / "train.jsonl", "training cache")
    )
    embedded = cfg.resolved()
    embedded["corpus"] = corpus_cfg["corpus"]  # the cache's hashing settings rule

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    log_path.write_text(
        json.dumps({"kind": "densaug-losslog", "config": embedded}, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    (out / "run_config.json").write_text(
        json.dumps(embedded, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    debug_hook = None
    if args.debug_dump is not None:
        def debug_hook(internals: dict) -> None:
            dump = {
                "side": cfg.mixup.target_mode,
                "n_triples": internals["n_triples"],
                "query_vectors": internals["query_vectors"].tolist(),
                "doc_vectors": internals["doc_vectors"].tolist(),
                "query_variants": internals["query_variants"].tolist(),
                "doc_variants": internals["doc_variants"].tolist(),
            }
            args.debug_dump.write_text(
                json.dumps(dump, sort_keys=True), encoding="utf-8"
            )

    def on_epoch(record: dict) -> None:
        print(
            f"epoch {record['epoch']}/{cfg.train.epochs}"
            f" nll={record['nll']:.6f} mixup={record['mixup']:.6f}"
            f" total={record['total']:.6f} ({record['seconds']:.2f}s)"
        )

    checkpoint = out / "checkpoint.darc"
    train(
        corpus,
        examples,
        cfg.train,
        cfg.perturb,
        cfg.mixup,
        hidden_dim=cfg.encoder.hidden_dim,
        output_dim=cfg.encoder.output_dim,
        checkpoint_path=checkpoint,
        optimizer_path=out / "checkpoint.darc.opt",
        log_path=log_path,
        on_epoch=on_epoch,
        debug_hook=debug_hook,
    )
    print(f"checkpoint written to {checkpoint}")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    cfg = _run_config(args, _search_overrides(args))
    corpus, _ = _load_cached_corpus(args.data)
    params = _load_checkpoint_for(corpus, args.checkpoint)
    embedded = cfg.resolved()
    index = encode_corpus(corpus, params, metric=cfg.search.sim, threads=cfg.threads)
    save_index(args.out, index, header=json.dumps(embedded, sort_keys=True))
    print(f"encoded {len(index)} documents into {args.out}")
    return 0


def cmd_retrieve(args: argparse.Namespace) -> int:
    cfg = _run_config(args, _search_overrides(args))
    corpus, _ = _load_cached_corpus(args.data)
    queries_path = args.queries or (args.data / "eval.jsonl")
    examples, _ = artifacts.read_examples_cache(_require(queries_path, "query cache"))
    embedded = cfg.resolved()
    topk = cfg.search.topk

    if cfg.search.retriever == "bm25":
        index = build_bm25_index(corpus, k1=cfg.search.k1, b=cfg.search.b)
        ranked = [bm25_search(ex.query, index, corpus.hash_config, topk) for ex in examples]
        metric = "bm25"
    else:
        if args.checkpoint is None:
            raise CliError("dense retrieval requires --checkpoint")
        params = _load_checkpoint_for(corpus, args.checkpoint)
        if args.index is not None:
            index, _ = load_index(_require(args.index, "index"))
            if index.metric != cfg.search.sim:
                index = dataclasses.replace(index, metric=cfg.search.sim)
        else:
            index = encode_corpus(corpus, params, metric=cfg.search.sim, threads=cfg.threads)
        ranked = batch_dense_topk(
            [ex.query for ex in examples], index, params, topk, threads=cfg.threads
        )
        metric = cfg.search.sim

    artifacts.write_retrieval(args.out, ranked, embedded, cfg.search.retriever, metric, topk)
    print(f"retrieved top-{topk} for {len(ranked)} queries into {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    extra = {"eval.relevance": args.relevance}
    if args.recall_at:
        extra["eval.recall_points"] = tuple(args.recall_at)
    cfg = _run_config(args, extra)
    corpus, _ = _load_cached_corpus(args.data)
    queries_path = args.queries or (args.data / "eval.jsonl")
    examples, _ = artifacts.read_examples_cache(_require(queries_path, "query cache"))
    runs, header = artifacts.read_retrieval(_require(args.retrieval, "retrieval file"))
    report = evaluate(
        runs,
        examples,
        corpus,
        depth=int(header["topk"]),
        relevance=cfg.eval.relevance,
        cap=cfg.eval.cap,
        recall_points=cfg.eval.recall_points,
        config=cfg.resolved(),
    )
    artifacts.write_metrics(args.out, report.to_dict())
    parts = " ".join(f"{k}={v:.2f}" for k, v in report.metrics.items())
    print(f"{report.n_queries} queries @depth {report.depth} [{report.relevance}]: {parts}")
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    cfg = _run_config(args, _search_overrides(args))
    embedded = cfg.resolved()
    if args.index is not None:
        index, _ = load_index(_require(args.index, "index"))
    else:
        if args.data is None or args.checkpoint is None:
            raise CliError("export-embeddings needs either --index or --data with --checkpoint")
        corpus, _ = _load_cached_corpus(args.data)
        params = _load_checkpoint_for(corpus, args.checkpoint)
        index = encode_corpus(corpus, params, metric=cfg.search.sim, threads=cfg.threads)
    export_embeddings(index, args.out, header=json.dumps(embedded, sort_keys=True))
    print(f"exported {len(index)} embeddings to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densaug",
        description="dense retrieval with representation augmentation, plus BM25 and metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load, validate, and cache passages and examples")
    _add_shared(p)
    p.add_argument("--passages", type=Path, required=True, help="passage TSV (id, text, title)")
    p.add_argument("--train", type=Path, required=True, help="DPR-style training JSON")
    p.add_argument("--eval", type=Path, default=None, help="DPR-style eval JSON")
    p.add_argument("--out", type=Path, required=True, help="cache directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train the dual encoder")
    _add_shared(p)
    p.add_argument("--data", type=Path, required=True, help="ingest cache directory")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--mixup", type=_onoff, default=None, metavar="on|off")
    p.add_argument("--mixup-weight", type=float, default=None)
    p.add_argument("--perturb-n", type=int, default=None)
    p.add_argument("--perturb-p", type=float, default=None)
    p.add_argument("--perturb-rescale", type=_onoff, default=None, metavar="on|off")
    p.add_argument("--augment-side", choices=("dar", "qar"), default=None)
    p.add_argument("--hard-negatives", type=_onoff, default=None, metavar="on|off")
    p.add_argument("--debug-dump", type=Path, default=None,
                   help="write the first batch's vectors and variants to this JSON file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode the corpus into a dense index file")
    _add_shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sim", choices=("dot", "cosine"), default=None)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("retrieve", help="rank documents for the cached queries")
    _add_shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--index", type=Path, default=None, help="pre-encoded index file")
    p.add_argument("--queries", type=Path, default=None,
                   help="examples cache to query (default: <data>/eval.jsonl)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--sim", choices=("dot", "cosine"), default=None)
    p.add_argument("--retriever", choices=("dense", "bm25"), default=None)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="score a retrieval run with the metric suite")
    _add_shared(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--retrieval", type=Path, required=True)
    p.add_argument("--queries", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--relevance", choices=("answer", "gold"), default=None)
    p.add_argument("--recall-at", type=int, action="append", default=None,
                   help="extra Recall@k point (repeatable)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump document vectors as TSV")
    _add_shared(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--index", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sim", choices=("dot", "cosine"), default=None)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, TrainingError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
