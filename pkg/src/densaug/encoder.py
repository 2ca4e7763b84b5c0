"""Two-tower encoder over hashed sparse features, with exact analytic gradients.

Each tower maps a sparse count map to a dense vector:

    u = sum_i count_i * emb[i] / sum_i count_i      (mean-pooled embedding)
    v = u @ proj + bias

The query and document towers hold separate parameters. Forward passes can be
recorded on a tape so that :func:`backward` produces exact gradients of any
scalar loss with respect to every parameter entry.

All encoding paths compute one item at a time (a gather, a weighted mean, and
a single mat-vec) so results never depend on batch composition or on how work
is chunked across threads.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

TOWERS = ("query", "doc")

CHECKPOINT_MAGIC = b"DARC"
CHECKPOINT_VERSION = 1


@dataclass
class TowerParams:
    emb: np.ndarray  # (V, h)
    proj: np.ndarray  # (h, m)
    bias: np.ndarray  # (m,)


@dataclass
class EncoderParams:
    query: TowerParams
    doc: TowerParams

    def __post_init__(self) -> None:
        q, d = self.query, self.doc
        if q.emb.shape != d.emb.shape or q.proj.shape != d.proj.shape:
            raise ValueError("query and doc towers must have identical shapes")
        if q.emb.shape[1] != q.proj.shape[0] or q.proj.shape[1] != q.bias.shape[0]:
            raise ValueError(
                f"inconsistent tower shapes: emb {q.emb.shape}, proj {q.proj.shape},"
                f" bias {q.bias.shape}"
            )
        for tower in (q, d):
            for arr in (tower.emb, tower.proj, tower.bias):
                if not np.isfinite(arr).all():
                    raise ValueError("encoder parameters must be finite")

    @property
    def vocab_dim(self) -> int:
        return self.query.emb.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.query.emb.shape[1]

    @property
    def output_dim(self) -> int:
        return self.query.proj.shape[1]

    def tower(self, name: str) -> TowerParams:
        if name == "query":
            return self.query
        if name == "doc":
            return self.doc
        raise ValueError(f"unknown tower {name!r}, expected one of {TOWERS}")

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in the fixed checkpoint order."""
        return [
            self.query.emb,
            self.query.proj,
            self.query.bias,
            self.doc.emb,
            self.doc.proj,
            self.doc.bias,
        ]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            query=TowerParams(self.query.emb.copy(), self.query.proj.copy(), self.query.bias.copy()),
            doc=TowerParams(self.doc.emb.copy(), self.doc.proj.copy(), self.doc.bias.copy()),
        )


@dataclass
class TowerGrads:
    emb: np.ndarray
    proj: np.ndarray
    bias: np.ndarray


@dataclass
class EncoderGrads:
    query: TowerGrads
    doc: TowerGrads

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        def tower(p: TowerParams) -> TowerGrads:
            return TowerGrads(
                emb=np.zeros_like(p.emb),
                proj=np.zeros_like(p.proj),
                bias=np.zeros_like(p.bias),
            )

        return cls(query=tower(params.query), doc=tower(params.doc))

    def tower(self, name: str) -> TowerGrads:
        if name == "query":
            return self.query
        if name == "doc":
            return self.doc
        raise ValueError(f"unknown tower {name!r}, expected one of {TOWERS}")

    def arrays(self) -> list[np.ndarray]:
        return [
            self.query.emb,
            self.query.proj,
            self.query.bias,
            self.doc.emb,
            self.doc.proj,
            self.doc.bias,
        ]


def init_params(
    seed: int | np.random.SeedSequence,
    vocab_dim: int,
    hidden_dim: int = 64,
    output_dim: int = 64,
) -> EncoderParams:
    """Seeded uniform init: emb ~ U[-1/sqrt(h), 1/sqrt(h)], proj ~ U[-1/sqrt(m), 1/sqrt(m)], bias = 0."""
    if vocab_dim <= 0 or hidden_dim <= 0 or output_dim <= 0:
        raise ValueError("all encoder dimensions must be positive")
    rng = np.random.default_rng(seed)
    emb_bound = 1.0 / np.sqrt(hidden_dim)
    proj_bound = 1.0 / np.sqrt(output_dim)

    def tower() -> TowerParams:
        return TowerParams(
            emb=rng.uniform(-emb_bound, emb_bound, size=(vocab_dim, hidden_dim)),
            proj=rng.uniform(-proj_bound, proj_bound, size=(hidden_dim, output_dim)),
            bias=np.zeros(output_dim),
        )

    return EncoderParams(query=tower(), doc=tower())


@dataclass
class _TapeItem:
    indices: np.ndarray  # (k,) int64
    weights: np.ndarray  # (k,) count_i / total
    pooled: np.ndarray  # (h,) the pre-projection mean u


@dataclass
class EncoderTape:
    """Recorded forward passes for one tower, in call order."""

    tower: str
    items: list[_TapeItem] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def _pool(features: Mapping[int, int], emb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted mean of embedding rows; returns (indices, weights, pooled)."""
    vocab_dim, hidden_dim = emb.shape
    if not features:
        return (
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.float64),
            np.zeros(hidden_dim),
        )
    indices = np.fromiter(features.keys(), dtype=np.int64, count=len(features))
    counts = np.fromiter(features.values(), dtype=np.float64, count=len(features))
    if indices.min() < 0 or indices.max() >= vocab_dim:
        bad = int(indices.min()) if indices.min() < 0 else int(indices.max())
        raise ValueError(f"feature index {bad} out of range [0, {vocab_dim})")
    weights = counts / counts.sum()
    pooled = weights @ emb[indices]
    return indices, weights, pooled


def encode(features: Mapping[int, int], tower: str, params: EncoderParams) -> np.ndarray:
    """Encode one sparse count map into a dense vector (no recording)."""
    p = params.tower(tower)
    _, _, pooled = _pool(features, p.emb)
    return pooled @ p.proj + p.bias


def encode_batch(
    features_list: Sequence[Mapping[int, int]],
    tower: str,
    params: EncoderParams,
    tape: EncoderTape | None = None,
) -> tuple[np.ndarray, EncoderTape]:
    """Encode a sequence of feature maps, recording the forward pass.

    Pass an existing ``tape`` (same tower) to append more items to it.
    """
    p = params.tower(tower)
    if tape is None:
        tape = EncoderTape(tower=tower)
    elif tape.tower != tower:
        raise ValueError(f"tape records tower {tape.tower!r}, not {tower!r}")
    out = np.empty((len(features_list), params.output_dim))
    for row, features in enumerate(features_list):
        indices, weights, pooled = _pool(features, p.emb)
        tape.items.append(_TapeItem(indices=indices, weights=weights, pooled=pooled))
        out[row] = pooled @ p.proj + p.bias
    return out, tape


def backward(
    recordings: Sequence[tuple[EncoderTape, np.ndarray]],
    params: EncoderParams,
) -> EncoderGrads:
    """Exact parameter gradients from output-vector gradients.

    ``recordings`` pairs each tape with the gradient of the scalar loss at
    that tape's output vectors, shape (len(tape), m). Raises if no forward
    pass was recorded.
    """
    if not recordings or all(len(tape) == 0 for tape, _ in recordings):
        raise RuntimeError("backward called without a recorded forward pass")
    grads = EncoderGrads.zeros_like(params)
    for tape, out_grads in recordings:
        out_grads = np.asarray(out_grads, dtype=np.float64)
        if out_grads.shape != (len(tape), params.output_dim):
            raise ValueError(
                f"gradient shape {out_grads.shape} does not match tape"
                f" ({len(tape)} items, output_dim {params.output_dim})"
            )
        tower_p = params.tower(tape.tower)
        tower_g = grads.tower(tape.tower)
        for item, g in zip(tape.items, out_grads):
            tower_g.bias += g
            tower_g.proj += np.outer(item.pooled, g)
            if item.indices.size:
                pooled_grad = tower_p.proj @ g
                np.add.at(
                    tower_g.emb,
                    item.indices,
                    item.weights[:, None] * pooled_grad[None, :],
                )
    return grads


def similarity(q: np.ndarray, d: np.ndarray, metric: str = "dot") -> float:
    """Dot product or cosine similarity of two equal-length vectors."""
    q = np.asarray(q, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if q.shape != d.shape:
        raise ValueError(f"vector length mismatch: {q.shape} vs {d.shape}")
    if metric == "dot":
        return float(q @ d)
    if metric == "cosine":
        qn = float(np.linalg.norm(q))
        dn = float(np.linalg.norm(d))
        if qn == 0.0 or dn == 0.0:
            raise ValueError("cosine similarity is undefined for a zero vector")
        return float(q @ d) / (qn * dn)
    raise ValueError(f"unknown similarity metric {metric!r}")


def save_checkpoint(path: str | Path, params: EncoderParams, hash_seed: int) -> None:
    """Write the binary checkpoint: magic, version, dims, six float32 arrays, hash seed.

    Written via a temp file + rename so a failed write never leaves a partial
    checkpoint behind.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(
                struct.pack(
                    "<IIII",
                    CHECKPOINT_VERSION,
                    params.vocab_dim,
                    params.hidden_dim,
                    params.output_dim,
                )
            )
            for arr in params.arrays():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(struct.pack("<q", hash_seed))
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, int]:
    """Read a checkpoint back into float64 parameters; returns (params, hash_seed)."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, vocab_dim, hidden_dim, output_dim = struct.unpack_from("<IIII", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = [
        (vocab_dim, hidden_dim),
        (hidden_dim, output_dim),
        (output_dim,),
        (vocab_dim, hidden_dim),
        (hidden_dim, output_dim),
        (output_dim,),
    ]
    offset = 20
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays.append(
            np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset = end
    if offset + 8 != len(data):
        raise ValueError(f"{path}: unexpected checkpoint length")
    (hash_seed,) = struct.unpack_from("<q", data, offset)
    params = EncoderParams(
        query=TowerParams(emb=arrays[0], proj=arrays[1], bias=arrays[2]),
        doc=TowerParams(emb=arrays[3], proj=arrays[4], bias=arrays[5]),
    )
    return params, hash_seed
