"""Run configuration: a TOML file merged with command-line overrides.

File sections and key names match the CLI surface (``[perturb] n/p/rescale``,
``[mixup] enabled/weight/lambda_per``, ``[augment] side``, ...). Flags always
beat file values. The resolved configuration is embedded into every output
artifact for provenance, except ``threads``, which by contract can never
change any output byte and so is kept out of the embedded header.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import MixupConfig, PerturbConfig
from .corpus import HashConfig
from .train import TrainConfig


@dataclass(frozen=True)
class EncoderConfig:
    hidden_dim: int = 64
    output_dim: int = 64

    def __post_init__(self) -> None:
        if self.hidden_dim <= 0 or self.output_dim <= 0:
            raise ValueError("encoder dimensions must be positive")


@dataclass(frozen=True)
class SearchConfig:
    topk: int = 100
    sim: str = "dot"
    retriever: str = "dense"
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.sim not in ("dot", "cosine"):
            raise ValueError(f"sim must be 'dot' or 'cosine', got {self.sim!r}")
        if self.retriever not in ("dense", "bm25"):
            raise ValueError(f"retriever must be 'dense' or 'bm25', got {self.retriever!r}")


@dataclass(frozen=True)
class EvalConfig:
    relevance: str = "answer"
    cap: int | None = None
    recall_points: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.relevance not in ("answer", "gold"):
            raise ValueError(f"relevance must be 'answer' or 'gold', got {self.relevance!r}")


# file section -> allowed keys
_SCHEMA = {
    "": {"seed", "threads"},
    "corpus": {"vocab_dim", "lowercase", "hash_seed"},
    "encoder": {"hidden_dim", "output_dim"},
    "train": {
        "batch_size",
        "epochs",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "shuffle",
        "hard_negatives",
        "checkpoint_every",
    },
    "perturb": {"n", "p", "rescale"},
    "mixup": {"enabled", "weight", "lambda_per", "squash"},
    "augment": {"side"},
    "search": {"topk", "sim", "retriever", "k1", "b"},
    "eval": {"relevance", "cap", "recall_points"},
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    hash: HashConfig = field(default_factory=HashConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def resolved(self) -> dict:
        """Nested plain dict for embedding into artifact headers (threads excluded)."""
        return {
            "seed": self.seed,
            "corpus": {
                "vocab_dim": self.hash.vocab_dim,
                "lowercase": self.hash.lowercase,
                "hash_seed": self.hash.seed,
            },
            "encoder": {
                "hidden_dim": self.encoder.hidden_dim,
                "output_dim": self.encoder.output_dim,
            },
            "train": {
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "lr": self.train.lr,
                "beta1": self.train.beta1,
                "beta2": self.train.beta2,
                "eps": self.train.eps,
                "shuffle": self.train.shuffle,
                "hard_negatives": self.train.hard_negatives,
                "checkpoint_every": self.train.checkpoint_every,
            },
            "perturb": {
                "n": self.perturb.n_masks,
                "p": self.perturb.drop_rate,
                "rescale": self.perturb.rescale,
            },
            "mixup": {
                "enabled": self.mixup.enabled,
                "weight": self.mixup.weight,
                "lambda_per": self.mixup.lambda_per,
                "squash": self.mixup.squash,
            },
            "augment": {"side": self.mixup.target_mode},
            "search": {
                "topk": self.search.topk,
                "sim": self.search.sim,
                "retriever": self.search.retriever,
                "k1": self.search.k1,
                "b": self.search.b,
            },
            "eval": {
                "relevance": self.eval.relevance,
                "cap": self.eval.cap,
                "recall_points": list(self.eval.recall_points),
            },
        }


def _validate_keys(values: Mapping[str, Any]) -> None:
    for section, content in values.items():
        if isinstance(content, Mapping):
            allowed = _SCHEMA.get(section)
            if allowed is None:
                raise ValueError(f"unknown config section [{section}]")
            for key in content:
                if key not in allowed:
                    raise ValueError(f"unknown config key {section}.{key}")
        else:
            if section not in _SCHEMA[""]:
                raise ValueError(f"unknown top-level config key {section}")


def load_run_config(
    config_path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus dotted-key overrides.

    Overrides use the file's key names ("train.batch_size", "perturb.n",
    "augment.side", "seed", ...) and win over file values. The run seed feeds
    both the hash seed (unless corpus.hash_seed is set explicitly) and the
    training seed.
    """
    values: dict[str, Any] = {}
    if config_path is not None:
        with open(config_path, "rb") as fh:
            values = tomllib.load(fh)
        _validate_keys(values)

    def section(name: str) -> dict[str, Any]:
        data = values.get(name, {})
        if not isinstance(data, Mapping):
            raise ValueError(f"config section [{name}] must be a table")
        return dict(data)

    merged: dict[str, dict[str, Any]] = {name: section(name) for name in _SCHEMA if name}
    top = {k: v for k, v in values.items() if not isinstance(v, Mapping)}

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            sect, key = dotted.split(".", 1)
            if sect not in merged or key not in _SCHEMA[sect]:
                raise ValueError(f"unknown override {dotted!r}")
            merged[sect][key] = value
        else:
            if dotted not in _SCHEMA[""]:
                raise ValueError(f"unknown override {dotted!r}")
            top[dotted] = value

    seed = int(top.get("seed", 0))
    threads = int(top.get("threads", 1))
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")

    corpus_sect = merged["corpus"]
    hash_cfg = HashConfig(
        vocab_dim=int(corpus_sect.get("vocab_dim", 2**18)),
        lowercase=bool(corpus_sect.get("lowercase", True)),
        seed=int(corpus_sect.get("hash_seed", seed)),
    )
    enc_sect = merged["encoder"]
    encoder_cfg = EncoderConfig(
        hidden_dim=int(enc_sect.get("hidden_dim", 64)),
        output_dim=int(enc_sect.get("output_dim", 64)),
    )
    train_sect = merged["train"]
    train_cfg = TrainConfig(
        batch_size=int(train_sect.get("batch_size", 32)),
        epochs=int(train_sect.get("epochs", 25)),
        lr=float(train_sect.get("lr", 1e-3)),
        beta1=float(train_sect.get("beta1", 0.9)),
        beta2=float(train_sect.get("beta2", 0.999)),
        eps=float(train_sect.get("eps", 1e-8)),
        seed=seed,
        shuffle=bool(train_sect.get("shuffle", True)),
        hard_negatives=bool(train_sect.get("hard_negatives", False)),
        checkpoint_every=int(train_sect.get("checkpoint_every", 0)),
    )
    perturb_sect = merged["perturb"]
    perturb_cfg = PerturbConfig(
        n_masks=int(perturb_sect.get("n", 3)),
        drop_rate=float(perturb_sect.get("p", 0.1)),
        rescale=bool(perturb_sect.get("rescale", True)),
    )
    mixup_sect = merged["mixup"]
    augment_sect = merged["augment"]
    mixup_cfg = MixupConfig(
        enabled=bool(mixup_sect.get("enabled", True)),
        weight=float(mixup_sect.get("weight", 1.0)),
        lambda_per=str(mixup_sect.get("lambda_per", "triple")),
        squash=bool(mixup_sect.get("squash", True)),
        target_mode=str(augment_sect.get("side", "dar")),
    )
    search_sect = merged["search"]
    search_cfg = SearchConfig(
        topk=int(search_sect.get("topk", 100)),
        sim=str(search_sect.get("sim", "dot")),
        retriever=str(search_sect.get("retriever", "dense")),
        k1=float(search_sect.get("k1", 1.2)),
        b=float(search_sect.get("b", 0.75)),
    )
    eval_sect = merged["eval"]
    raw_cap = eval_sect.get("cap")
    recall_points = tuple(int(k) for k in eval_sect.get("recall_points", ()))
    eval_cfg = EvalConfig(
        relevance=str(eval_sect.get("relevance", "answer")),
        cap=int(raw_cap) if raw_cap is not None else None,
        recall_points=recall_points,
    )
    return RunConfig(
        seed=seed,
        threads=threads,
        hash=hash_cfg,
        encoder=encoder_cfg,
        train=train_cfg,
        perturb=perturb_cfg,
        mixup=mixup_cfg,
        search=search_cfg,
        eval=eval_cfg,
    )
