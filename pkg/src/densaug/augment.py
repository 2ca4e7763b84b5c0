"""Representation-level augmentation: dropout perturbation and mixup interpolation.

Two mechanisms operate on already-encoded vectors:

* perturbation multiplies a vector by Bernoulli keep-masks, minting several
  positive variants from one pair (inverted-dropout rescaling keeps the
  expected vector unchanged);
* interpolation mixes a positive and a negative vector with a uniform mixing
  weight and trains the similarity toward that weight through a logistic
  squash and binary cross-entropy.

Both can target the document side ("dar") or the query side ("qar").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PROB_EPS = 1e-7

SIDES = ("dar", "qar")
LAMBDA_MODES = ("triple", "batch")


@dataclass(frozen=True)
class PerturbConfig:
    """Dropout perturbation settings: ``n_masks`` variants at drop rate ``drop_rate``."""

    n_masks: int = 3
    drop_rate: float = 0.1
    rescale: bool = True

    def __post_init__(self) -> None:
        if self.n_masks < 1:
            raise ValueError(f"n_masks must be >= 1, got {self.n_masks}")
        if not (0.0 <= self.drop_rate < 1.0):
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")


@dataclass(frozen=True)
class MixupConfig:
    """Interpolation settings; mixing weights are uniform on [0, 1].

    ``lambda_per`` chooses whether a fresh weight is drawn per triple or once
    per batch. ``target_mode`` selects the augmented side (documents for
    "dar", queries for "qar").
    """

    enabled: bool = True
    weight: float = 1.0
    lambda_per: str = "triple"
    squash: bool = True
    target_mode: str = "dar"

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise ValueError(f"weight must be > 0, got {self.weight}")
        if self.lambda_per not in LAMBDA_MODES:
            raise ValueError(f"lambda_per must be one of {LAMBDA_MODES}, got {self.lambda_per!r}")
        if self.target_mode not in SIDES:
            raise ValueError(f"target_mode must be one of {SIDES}, got {self.target_mode!r}")


def apply_side(target_mode: str) -> str:
    """Which tower's vectors get perturbed/interpolated: 'doc' for dar, 'query' for qar."""
    if target_mode == "dar":
        return "doc"
    if target_mode == "qar":
        return "query"
    raise ValueError(f"target_mode must be one of {SIDES}, got {target_mode!r}")


def sample_masks(
    rng: np.random.Generator, count: int, dim: int, drop_rate: float
) -> np.ndarray:
    """(count, dim) array of 0/1 keep-masks, each entry kept with prob 1 - drop_rate."""
    return (rng.random((count, dim)) >= drop_rate).astype(np.float64)


def apply_masks(vec: np.ndarray, masks: np.ndarray, config: PerturbConfig) -> np.ndarray:
    """Element-wise mask, then inverted-dropout rescale by 1/(1 - drop_rate)."""
    out = vec * masks
    if config.rescale:
        out = out / (1.0 - config.drop_rate)
    return out


def perturb(
    vec: np.ndarray, config: PerturbConfig, rng: np.random.Generator
) -> np.ndarray:
    """n_masks perturbed copies of ``vec``, shape (n_masks, dim)."""
    vec = np.asarray(vec, dtype=np.float64)
    masks = sample_masks(rng, config.n_masks, vec.shape[-1], config.drop_rate)
    return apply_masks(vec, masks, config)


def interpolate(pos: np.ndarray, neg: np.ndarray, lam: float) -> np.ndarray:
    """lam * pos + (1 - lam) * neg, element-wise."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"mixing weight must be in [0, 1], got {lam}")
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError(f"vector length mismatch: {pos.shape} vs {neg.shape}")
    return lam * pos + (1.0 - lam) * neg


def logistic(x: float) -> float:
    """Numerically stable 1 / (1 + exp(-x))."""
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def soft_label_bce(score: float, lam: float, squash: bool = True) -> tuple[float, float]:
    """Binary cross-entropy of a similarity score against soft label ``lam``.

    Returns (loss, d loss / d score). With ``squash`` the score first passes
    through a logistic; probabilities are clamped to [PROB_EPS, 1 - PROB_EPS]
    before the logs. The gradient uses the unclamped logistic output, so deep
    in saturation it stays at sig - lam while the clamped loss flattens.
    """
    if not (0.0 <= lam <= 1.0):
        raise ValueError(f"soft label must be in [0, 1], got {lam}")
    prob = logistic(score) if squash else score
    clamped = min(max(prob, PROB_EPS), 1.0 - PROB_EPS)
    loss = -(lam * np.log(clamped) + (1.0 - lam) * np.log1p(-clamped))
    if squash:
        dscore = prob - lam
    else:
        dscore = -lam / clamped + (1.0 - lam) / (1.0 - clamped)
    return float(loss), float(dscore)


def mixup_loss(
    query_vec: np.ndarray,
    mixed_vec: np.ndarray,
    lam: float,
    config: MixupConfig | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """BCE of sim(query, mixed) against soft label ``lam`` plus exact gradients.

    Similarity is the dot product (the training-objective metric). Returns
    (loss, grad at query_vec, grad at mixed_vec).
    """
    squash = True if config is None else config.squash
    query_vec = np.asarray(query_vec, dtype=np.float64)
    mixed_vec = np.asarray(mixed_vec, dtype=np.float64)
    if query_vec.shape != mixed_vec.shape:
        raise ValueError(f"vector length mismatch: {query_vec.shape} vs {mixed_vec.shape}")
    score = float(query_vec @ mixed_vec)
    loss, dscore = soft_label_bce(score, lam, squash=squash)
    return loss, dscore * mixed_vec, dscore * query_vec


@dataclass(frozen=True)
class MixTriple:
    """One interpolated pair: which anchor it belongs to, the mixed vector, its soft label.

    ``variant_index`` and the negative reference record where the mixed
    vector came from so gradients can be routed back through it.
    """

    anchor_index: int
    vector: np.ndarray
    lam: float
    variant_index: int
    negative_kind: str  # "pool" (cross-item in-batch) or "extra" (hard negative)
    negative_index: int


def build_interpolations(
    variants: np.ndarray,
    pool: np.ndarray,
    extras: Sequence[np.ndarray] | None,
    rng: np.random.Generator,
    lambda_per: str = "triple",
) -> list[MixTriple]:
    """Mix every item's perturbed positive with each of its negatives.

    ``variants`` is (B, n, dim): each item's perturbed positive copies.
    ``pool`` is (B, dim): the raw vectors whose cross-item entries act as
    in-batch negatives (item i mixes against pool[j] for all j != i).
    ``extras`` optionally adds per-item negatives (hard negatives), one list
    entry per item, each an (H_i, dim) array.

    Per negative, a fresh mixing weight (or the shared per-batch one) and a
    uniformly chosen variant produce one triple, so item i yields
    (B - 1) + H_i triples. A single item with no extras yields none.
    """
    variants = np.asarray(variants, dtype=np.float64)
    if variants.ndim != 3:
        raise ValueError(f"variants must be (B, n, dim), got shape {variants.shape}")
    batch, n_variants, _ = variants.shape
    if pool.shape[0] != batch:
        raise ValueError(f"pool has {pool.shape[0]} rows for a batch of {batch}")
    if extras is not None and len(extras) != batch:
        raise ValueError(f"extras has {len(extras)} entries for a batch of {batch}")
    if lambda_per not in LAMBDA_MODES:
        raise ValueError(f"lambda_per must be one of {LAMBDA_MODES}, got {lambda_per!r}")

    batch_lam = float(rng.uniform()) if lambda_per == "batch" else None
    triples: list[MixTriple] = []
    for i in range(batch):
        negatives: list[tuple[str, int, np.ndarray]] = [
            ("pool", j, pool[j]) for j in range(batch) if j != i
        ]
        if extras is not None:
            negatives.extend(("extra", t, vec) for t, vec in enumerate(extras[i]))
        for kind, j, neg in negatives:
            lam = batch_lam if batch_lam is not None else float(rng.uniform())
            k = int(rng.integers(0, n_variants))
            triples.append(
                MixTriple(
                    anchor_index=i,
                    vector=interpolate(variants[i, k], neg, lam),
                    lam=lam,
                    variant_index=k,
                    negative_kind=kind,
                    negative_index=j,
                )
            )
    return triples
