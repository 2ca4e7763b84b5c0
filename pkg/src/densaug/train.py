"""Training loop: in-batch softmax NLL plus augmentation losses, Adam updates.

Every step draws its randomness (dropout masks, mixing weights, variant
choices) from a per-step seed, so the whole objective is a pure function of
(parameters, batch, step seed). That is what makes runs byte-reproducible and
lets tests check the full gradient, augmentation paths included, against
finite differences.

Score-matrix layout: for a batch of B queries the candidate columns are the B
aligned positive documents followed by the batch's hard negatives (shared
across rows, DPR style). With n perturbed variants the matrix has B*n rows;
row (i, k) keeps raw scores in every column except its positive column i,
which holds the score of query i against its k-th perturbed positive (for
query-side augmentation, of the k-th perturbed query against its positive).
"""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import (
    MixupConfig,
    MixTriple,
    PerturbConfig,
    apply_masks,
    apply_side,
    build_interpolations,
    sample_masks,
)
from .corpus import Corpus, TrainingExample, TrainingSet
from .encoder import (
    EncoderGrads,
    EncoderParams,
    EncoderTape,
    backward,
    encode_batch,
    init_params,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

OPTSTATE_MAGIC = b"DARO"
OPTSTATE_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when training must halt (non-finite loss, bad configuration)."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    hard_negatives: bool = False
    checkpoint_every: int = 0  # epochs between intermediate checkpoints; 0 = final only

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("Adam eps must be > 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class AdamState:
    """First/second moment arrays aligned with EncoderParams.arrays(), plus step count."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in params.arrays()],
            v=[np.zeros_like(a) for a in params.arrays()],
        )


def adam_step(
    params: EncoderParams, grads: EncoderGrads, state: AdamState, cfg: TrainConfig
) -> None:
    """One in-place Adam update over both towers."""
    state.t += 1
    t = state.t
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for param, grad, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        param -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def nll_loss(scores: np.ndarray, positive_cols: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax negative log-likelihood of the positive column per row.

    Uses max-subtraction stabilization. Returns (loss, gradient at scores).
    Raises on any non-finite score, naming its (row, column).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
    finite = np.isfinite(scores)
    if not finite.all():
        i, j = np.argwhere(~finite)[0]
        raise ValueError(f"non-finite score at row {int(i)}, column {int(j)}")
    rows = np.arange(scores.shape[0])
    positive_cols = np.asarray(positive_cols, dtype=np.int64)
    if positive_cols.shape != (scores.shape[0],):
        raise ValueError("positive_cols must hold one column index per row")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted[rows, positive_cols] - log_norm
    loss = float(-log_probs.mean())
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, positive_cols] -= 1.0
    grad /= scores.shape[0]
    return loss, grad


@dataclass
class BatchData:
    """Feature maps for one batch, hard negatives flattened with per-query slices."""

    query_feats: list[dict[int, int]]
    pos_feats: list[dict[int, int]]
    hard_feats: list[dict[int, int]]
    hard_slices: list[tuple[int, int]]  # per query, [start, end) into hard_feats

    @classmethod
    def from_examples(
        cls, examples: Sequence[TrainingExample], corpus: Corpus, include_hard: bool
    ) -> "BatchData":
        query_feats = [ex.query.features for ex in examples]
        pos_feats = [corpus.get(ex.positive_doc_id).features for ex in examples]
        hard_feats: list[dict[int, int]] = []
        hard_slices: list[tuple[int, int]] = []
        for ex in examples:
            start = len(hard_feats)
            if include_hard:
                hard_feats.extend(corpus.get(h).features for h in ex.hard_negative_doc_ids)
            hard_slices.append((start, len(hard_feats)))
        return cls(query_feats, pos_feats, hard_feats, hard_slices)

    @property
    def size(self) -> int:
        return len(self.query_feats)


@dataclass(frozen=True)
class LossBreakdown:
    nll: float
    mixup: float
    total: float


def _bce_batch(
    scores: np.ndarray, lams: np.ndarray, squash: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized soft-label BCE over triples; returns (losses, dloss/dscore)."""
    if squash:
        probs = np.empty_like(scores)
        pos = scores >= 0
        probs[pos] = 1.0 / (1.0 + np.exp(-scores[pos]))
        e = np.exp(scores[~pos])
        probs[~pos] = e / (1.0 + e)
    else:
        probs = scores
    clamped = np.clip(probs, 1e-7, 1.0 - 1e-7)
    losses = -(lams * np.log(clamped) + (1.0 - lams) * np.log1p(-clamped))
    if squash:
        dscores = probs - lams
    else:
        dscores = -lams / clamped + (1.0 - lams) / (1.0 - clamped)
    return losses, dscores


def batch_loss(
    params: EncoderParams,
    batch: BatchData,
    step_seed: int,
    perturb_cfg: PerturbConfig,
    mixup_cfg: MixupConfig,
    compute_grads: bool = True,
    return_internals: bool = False,
):
    """Total loss for one batch: softmax NLL plus weighted mean interpolation BCE.

    A pure function of (params, batch, step_seed): all masks, mixing weights,
    and variant choices come from a generator seeded with ``step_seed``, drawn
    in a fixed order (masks first, then per-triple draws). Returns
    (LossBreakdown, EncoderGrads or None, internals dict or None).
    """
    rng = np.random.default_rng(step_seed)
    side = apply_side(mixup_cfg.target_mode)
    batch_size = batch.size
    n = perturb_cfg.n_masks
    out_dim = params.output_dim

    q_vecs, q_tape = encode_batch(batch.query_feats, "query", params)
    d_vecs, d_tape = encode_batch(batch.pos_feats, "doc", params)
    if batch.hard_feats:
        h_vecs, h_tape = encode_batch(batch.hard_feats, "doc", params)
    else:
        h_vecs, h_tape = np.empty((0, out_dim)), None
    candidates = np.vstack([d_vecs, h_vecs])  # (C, m)
    n_cols = candidates.shape[0]

    # Perturbed variants of the augmented side; the other side stays raw.
    masks = sample_masks(rng, batch_size * n, out_dim, perturb_cfg.drop_rate)
    masks = masks.reshape(batch_size, n, out_dim)
    varied_raw = d_vecs if side == "doc" else q_vecs
    variants = apply_masks(varied_raw[:, None, :], masks, perturb_cfg)

    # Expanded score matrix: row (i, k) = raw scores with the positive column
    # overwritten by the perturbed-pair score.
    base = q_vecs @ candidates.T  # (B, C)
    scores = np.repeat(base, n, axis=0)
    rows = np.arange(batch_size * n)
    positive_cols = np.repeat(np.arange(batch_size), n)
    if side == "doc":
        pos_scores = np.einsum("im,ikm->ik", q_vecs, variants)
    else:
        pos_scores = np.einsum("ikm,im->ik", variants, d_vecs)
    scores[rows, positive_cols] = pos_scores.reshape(-1)

    nll, score_grad = nll_loss(scores, positive_cols)

    # Interpolation triples: perturbed positives vs. in-batch (and, on the
    # document side, hard) negatives.
    triples: list[MixTriple] = []
    tri_losses = np.zeros(0)
    tri_dscores = np.zeros(0)
    anchors = np.zeros((0, out_dim))
    tri_vecs = np.zeros((0, out_dim))
    if mixup_cfg.enabled:
        if side == "doc":
            extras = [h_vecs[s:e] for s, e in batch.hard_slices]
            triples = build_interpolations(variants, d_vecs, extras, rng, mixup_cfg.lambda_per)
            anchor_pool = q_vecs
        else:
            triples = build_interpolations(variants, q_vecs, None, rng, mixup_cfg.lambda_per)
            anchor_pool = d_vecs
        if triples:
            anchor_idx = np.array([t.anchor_index for t in triples])
            anchors = anchor_pool[anchor_idx]
            tri_vecs = np.stack([t.vector for t in triples])
            tri_lams = np.array([t.lam for t in triples])
            sims = np.einsum("tm,tm->t", anchors, tri_vecs)
            tri_losses, tri_dscores = _bce_batch(sims, tri_lams, mixup_cfg.squash)

    mixup_mean = float(tri_losses.mean()) if tri_losses.size else 0.0
    total = nll + mixup_cfg.weight * mixup_mean
    breakdown = LossBreakdown(nll=nll, mixup=mixup_mean, total=total)

    internals = None
    if return_internals:
        internals = {
            "query_vectors": q_vecs.copy(),
            "doc_vectors": d_vecs.copy(),
            "query_variants": variants.copy() if side == "query" else q_vecs[:, None, :].copy(),
            "doc_variants": variants.copy() if side == "doc" else d_vecs[:, None, :].copy(),
            "n_triples": len(triples),
            "scores_shape": scores.shape,
        }

    if not compute_grads:
        return breakdown, None, internals

    # --- NLL gradients ---
    pos_grad = score_grad[rows, positive_cols].reshape(batch_size, n)
    base_grad = score_grad.copy()
    base_grad[rows, positive_cols] = 0.0
    base_grad = base_grad.reshape(batch_size, n, n_cols).sum(axis=1)  # (B, C)

    d_q = base_grad @ candidates
    d_candidates = base_grad.T @ q_vecs
    d_variants = np.zeros_like(variants)
    if side == "doc":
        d_q += np.einsum("ik,ikm->im", pos_grad, variants)
        d_variants += pos_grad[:, :, None] * q_vecs[:, None, :]
    else:
        d_variants += pos_grad[:, :, None] * d_vecs[:, None, :]
        d_candidates[:batch_size] += np.einsum("ik,ikm->im", pos_grad, variants)

    d_d = d_candidates[:batch_size]
    d_h = d_candidates[batch_size:]

    # --- mixup gradients ---
    if triples:
        coeff = (mixup_cfg.weight / len(triples)) * tri_dscores
        anchor_idx = np.array([t.anchor_index for t in triples])
        lams = np.array([t.lam for t in triples])
        d_anchor_pool = d_q if side == "doc" else d_d
        np.add.at(d_anchor_pool, anchor_idx, coeff[:, None] * tri_vecs)
        d_mixed = coeff[:, None] * anchors  # (T, m)
        var_flat = anchor_idx * n + np.array([t.variant_index for t in triples])
        np.add.at(d_variants.reshape(batch_size * n, out_dim), var_flat, lams[:, None] * d_mixed)
        neg_grad = (1.0 - lams)[:, None] * d_mixed
        pool_rows = np.array([t.negative_kind == "pool" for t in triples])
        neg_idx = np.array([t.negative_index for t in triples])
        if pool_rows.any():
            pool_target = d_d if side == "doc" else d_q
            np.add.at(pool_target, neg_idx[pool_rows], neg_grad[pool_rows])
        if (~pool_rows).any():
            starts = np.array([s for s, _ in batch.hard_slices])
            flat_hard = starts[anchor_idx[~pool_rows]] + neg_idx[~pool_rows]
            np.add.at(d_h, flat_hard, neg_grad[~pool_rows])

    # --- perturbation backward: route variant gradients to the raw vector ---
    mask_scale = masks / (1.0 - perturb_cfg.drop_rate) if perturb_cfg.rescale else masks
    varied_grad = (mask_scale * d_variants).sum(axis=1)  # (B, m)
    if side == "doc":
        d_d = d_d + varied_grad
    else:
        d_q = d_q + varied_grad

    recordings: list[tuple[EncoderTape, np.ndarray]] = [(q_tape, d_q), (d_tape, d_d)]
    if h_tape is not None:
        recordings.append((h_tape, d_h))
    grads = backward(recordings, params)
    return breakdown, grads, internals


def train_step(
    params: EncoderParams,
    opt_state: AdamState,
    batch: BatchData,
    step_seed: int,
    train_cfg: TrainConfig,
    perturb_cfg: PerturbConfig,
    mixup_cfg: MixupConfig,
) -> LossBreakdown:
    """One optimizer step; halts (raises) on a non-finite loss."""
    breakdown, grads, _ = batch_loss(params, batch, step_seed, perturb_cfg, mixup_cfg)
    if not np.isfinite(breakdown.total):
        raise TrainingError(
            f"non-finite loss at step {opt_state.t + 1}:"
            f" nll={breakdown.nll} mixup={breakdown.mixup}"
        )
    adam_step(params, grads, opt_state, train_cfg)
    return breakdown


@dataclass
class TrainResult:
    params: EncoderParams
    opt_state: AdamState
    history: list[dict]


def train(
    corpus: Corpus,
    examples: TrainingSet | Sequence[TrainingExample],
    train_cfg: TrainConfig,
    perturb_cfg: PerturbConfig | None = None,
    mixup_cfg: MixupConfig | None = None,
    hidden_dim: int = 64,
    output_dim: int = 64,
    checkpoint_path: str | Path | None = None,
    optimizer_path: str | Path | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    debug_hook: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the full training loop and return final parameters plus the loss log.

    Parameters are initialized from the config seed; epoch shuffling and all
    per-step noise derive from the same seed through separate child streams,
    so identical (seed, config, data) reproduce the final checkpoint exactly.
    ``debug_hook``, if given, receives the first step's encoded vectors and
    variants before any update (used by the CLI's debug dump).
    """
    if isinstance(examples, TrainingSet):
        examples = examples.examples
    examples = list(examples)
    if not examples:
        raise ValueError("training requires at least one example")
    perturb_cfg = perturb_cfg or PerturbConfig()
    mixup_cfg = mixup_cfg or MixupConfig()
    if mixup_cfg.enabled and train_cfg.batch_size < 2 and not train_cfg.hard_negatives:
        raise ValueError(
            "batch_size must be >= 2 when mixup is enabled without hard negatives"
        )

    seed_seq = np.random.SeedSequence(train_cfg.seed)
    params_seq, shuffle_seq, noise_seq = seed_seq.spawn(3)
    params = init_params(
        params_seq,
        vocab_dim=corpus.hash_config.vocab_dim,
        hidden_dim=hidden_dim,
        output_dim=output_dim,
    )
    shuffle_rng = np.random.default_rng(shuffle_seq)
    noise_rng = np.random.default_rng(noise_seq)
    opt_state = AdamState.zeros_like(params)

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    history: list[dict] = []
    try:
        n_examples = len(examples)
        batch_size = train_cfg.batch_size
        for epoch in range(1, train_cfg.epochs + 1):
            start = time.perf_counter()
            order = (
                shuffle_rng.permutation(n_examples)
                if train_cfg.shuffle
                else np.arange(n_examples)
            )
            sums = {"nll": 0.0, "mixup": 0.0, "total": 0.0}
            n_steps = 0
            for lo in range(0, n_examples, batch_size):
                chunk = [examples[i] for i in order[lo : lo + batch_size]]
                batch = BatchData.from_examples(chunk, corpus, train_cfg.hard_negatives)
                step_seed = int(noise_rng.integers(0, 2**63))
                if debug_hook is not None and opt_state.t == 0:
                    _, _, internals = batch_loss(
                        params, batch, step_seed, perturb_cfg, mixup_cfg,
                        compute_grads=False, return_internals=True,
                    )
                    debug_hook(internals)
                breakdown = train_step(
                    params, opt_state, batch, step_seed, train_cfg, perturb_cfg, mixup_cfg
                )
                sums["nll"] += breakdown.nll
                sums["mixup"] += breakdown.mixup
                sums["total"] += breakdown.total
                n_steps += 1
            record = {
                "epoch": epoch,
                "nll": sums["nll"] / n_steps,
                "mixup": sums["mixup"] / n_steps,
                "total": sums["total"] / n_steps,
                "seconds": time.perf_counter() - start,
            }
            history.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(record)
            cadence = train_cfg.checkpoint_every
            if checkpoint_path and cadence and epoch % cadence == 0:
                save_checkpoint(checkpoint_path, params, corpus.hash_config.seed)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, params, corpus.hash_config.seed)
            if optimizer_path:
                save_optimizer_state(optimizer_path, opt_state)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(params=params, opt_state=opt_state, history=history)


def save_optimizer_state(path: str | Path, state: AdamState) -> None:
    """Sibling file to a checkpoint: step count plus float64 moment arrays."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(OPTSTATE_MAGIC)
            fh.write(struct.pack("<IQI", OPTSTATE_VERSION, state.t, len(state.m)))
            for arr in state.m + state.v:
                shape = arr.shape
                fh.write(struct.pack("<I", len(shape)))
                fh.write(struct.pack(f"<{len(shape)}Q", *shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_optimizer_state(path: str | Path) -> AdamState:
    data = Path(path).read_bytes()
    if data[:4] != OPTSTATE_MAGIC:
        raise ValueError(f"{path}: not an optimizer-state file (bad magic)")
    version, t, n_arrays = struct.unpack_from("<IQI", data, 4)
    if version != OPTSTATE_VERSION:
        raise ValueError(f"{path}: unsupported optimizer-state version {version}")
    offset = 4 + 16
    arrays = []
    for _ in range(2 * n_arrays):
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        count = int(np.prod(shape))
        arrays.append(
            np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .copy()
        )
        offset += 8 * count
    return AdamState(m=arrays[:n_arrays], v=arrays[n_arrays:], t=t)
