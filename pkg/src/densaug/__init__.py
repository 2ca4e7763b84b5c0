"""densaug: dense retrieval training with representation-level augmentation.

A dual-encoder retriever trained with in-batch negatives whose positive
representations can be augmented by dropout perturbation and mixup
interpolation (on the document or the query side), plus an Okapi BM25
baseline and a full ranking-metric suite.
"""

__version__ = "0.1.0"

from .augment import MixupConfig, PerturbConfig, build_interpolations, interpolate, mixup_loss, perturb
from .corpus import Corpus, Document, HashConfig, Query, TrainingExample, hash_features, load_corpus, load_training, tokenize
from .encoder import EncoderParams, encode, init_params, load_checkpoint, save_checkpoint, similarity
from .evaluation import evaluate, mean_average_precision, mrr, recall_at, topk_accuracy
from .search import Bm25Index, DenseIndex, RankedList, bm25_topk, build_bm25_index, dense_topk, encode_corpus
from .train import TrainConfig, nll_loss, train, train_step

__all__ = [
    "Bm25Index",
    "Corpus",
    "DenseIndex",
    "Document",
    "EncoderParams",
    "HashConfig",
    "MixupConfig",
    "PerturbConfig",
    "Query",
    "RankedList",
    "TrainConfig",
    "TrainingExample",
    "bm25_topk",
    "build_bm25_index",
    "build_interpolations",
    "dense_topk",
    "encode",
    "encode_corpus",
    "evaluate",
    "hash_features",
    "init_params",
    "interpolate",
    "load_checkpoint",
    "load_corpus",
    "load_training",
    "mean_average_precision",
    "mixup_loss",
    "mrr",
    "nll_loss",
    "perturb",
    "recall_at",
    "save_checkpoint",
    "similarity",
    "tokenize",
    "topk_accuracy",
    "train",
    "train_step",
]
