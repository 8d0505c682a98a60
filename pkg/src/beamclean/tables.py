"""Embedding tables, token sequences, and the distance-based baseline attack.

The table is the only piece of model knowledge the attacker holds: a map from
every vocabulary token to its embedding row. Vectors are stored float32 (the
on-disk precision, see formats.py); all arithmetic is done in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ParameterError

_NN_CHUNK = 4096  # vocabulary rows per block when scoring distances


@dataclass
class EmbeddingTable:
    """Vocabulary-to-vector map: ``vectors[i]`` is the embedding of ``tokens[i]``."""

    vectors: np.ndarray          # (V, d) float32
    tokens: tuple[str, ...]
    table_id: str = "table"

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.tokens = tuple(self.tokens)
        if self.vectors.ndim != 2:
            raise ParameterError("vectors must be a V x d matrix")
        v, d = self.vectors.shape
        if v < 2:
            raise ParameterError("a table needs at least two rows (V >= 2)")
        if d < 1:
            raise ParameterError("embedding dimension must be >= 1")
        if len(self.tokens) != v:
            raise ParameterError(f"{v} rows but {len(self.tokens)} token strings")
        if not np.all(np.isfinite(self.vectors)):
            raise ParameterError("table contains non-finite entries")
        if len(set(self.tokens)) != v:
            raise ParameterError("token strings must be pairwise distinct")

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows64(self) -> np.ndarray:
        """Vectors as float64 for numeric work."""
        return self.vectors.astype(np.float64)


@dataclass(frozen=True)
class TokenSequence:
    """An ordered run of token ids; ids are indices into some table."""

    ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def validate_against(self, table: EmbeddingTable) -> None:
        for i in self.ids:
            if not 0 <= i < table.vocab_size:
                raise ParameterError(f"token id {i} out of range [0, {table.vocab_size})")


@dataclass
class ObfuscatedSequence:
    """The leaked T x d matrix of noisy embeddings.

    ``provenance`` is defender-side bookkeeping (mechanism spec + seed) and is
    never consulted by attack code.
    """

    values: np.ndarray           # (T, d) float32
    seq_id: str = ""
    provenance: Optional[tuple] = None   # (NoiseMechanismSpec, seed)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ParameterError("values must be a T x d matrix")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("obfuscated values contain non-finite entries")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def values64(self) -> np.ndarray:
        return self.values.astype(np.float64)


def generate_synthetic_table(
    v: int,
    d: int,
    seed: int,
    min_pairwise_gap: float = 0.0,
    table_id: Optional[str] = None,
) -> EmbeddingTable:
    """Draw a V x d table with spherical-normal rows, rejecting crowded rows.

    Rows are sampled one at a time from N(0, I_d) on a Philox stream keyed by
    ``seed`` and redrawn until each sits at least ``min_pairwise_gap`` (l2)
    away from every earlier row. Raises ParameterError after 10,000 redraws,
    which signals the gap is infeasible for this (V, d).
    """
    if v < 2:
        raise ParameterError("V must be >= 2")
    if d < 1:
        raise ParameterError("d must be >= 1")
    if min_pairwise_gap < 0:
        raise ParameterError("min_pairwise_gap must be >= 0")

    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    rows = np.empty((v, d), dtype=np.float32)
    budget = 10_000
    for i in range(v):
        while True:
            candidate = gen.standard_normal(d).astype(np.float32)
            if i == 0:
                rows[0] = candidate
                break
            gaps = np.linalg.norm(
                rows[:i].astype(np.float64) - candidate.astype(np.float64), axis=1
            )
            if gaps.min() >= min_pairwise_gap:
                rows[i] = candidate
                break
            budget -= 1
            if budget <= 0:
                raise ParameterError(
                    f"could not place {v} rows with gap {min_pairwise_gap} in "
                    f"{d} dims within the resample budget"
                )
    tokens = tuple(f"t{i}" for i in range(v))
    return EmbeddingTable(rows, tokens, table_id or f"synthetic-{seed}")


def embed_sequence(table: EmbeddingTable, w: TokenSequence | Sequence[int]) -> np.ndarray:
    """Look up the clean embedding rows for a token sequence (T x d, float64)."""
    ids = np.asarray(list(w), dtype=np.int64)
    if ids.size == 0:
        return np.empty((0, table.dim), dtype=np.float64)
    if ids.min() < 0 or ids.max() >= table.vocab_size:
        raise ParameterError("token id out of range")
    return table.rows64()[ids]


def _distance_block(y: np.ndarray, rows: np.ndarray, norm: str) -> np.ndarray:
    """Distances from every position in y (T, d) to every row (R, d) -> (T, R)."""
    if norm == "l2":
        # squared l2 is enough for argmin and cheaper than sqrt
        yy = np.einsum("td,td->t", y, y)[:, None]
        rr = np.einsum("rd,rd->r", rows, rows)[None, :]
        return yy + rr - 2.0 * (y @ rows.T)
    if norm == "l1":
        return np.abs(y[:, None, :] - rows[None, :, :]).sum(axis=2)
    raise ParameterError(f"unknown norm {norm!r} (expected 'l1' or 'l2')")


def nn_decode(table: EmbeddingTable, y: ObfuscatedSequence, norm: str = "l2") -> TokenSequence:
    """Per-position nearest-row decoding; ties go to the smaller token id.

    Positions are independent, so the result does not depend on evaluation
    order. Chunks over the vocabulary to bound memory for the l1 path.
    """
    if y.dim != table.dim:
        raise ParameterError(f"dimension mismatch: y has d={y.dim}, table d={table.dim}")
    t = y.length
    if t == 0:
        return TokenSequence(())
    yv = y.values64()
    rows = table.rows64()
    best = np.full(t, -1, dtype=np.int64)
    best_dist = np.full(t, np.inf)
    # the l1 path materializes a (T, chunk, d) block, so bound its size
    chunk = _NN_CHUNK if norm == "l2" else max(1, 2**25 // max(1, t * table.dim))
    for start in range(0, table.vocab_size, chunk):
        block = rows[start : start + chunk]
        dist = _distance_block(yv, block, norm)
        idx = dist.argmin(axis=1)
        d_block = dist[np.arange(t), idx]
        # strict < keeps the earlier (smaller-id) row on exact ties
        better = d_block < best_dist
        best[better] = idx[better] + start
        best_dist[better] = d_block[better]
    return TokenSequence(tuple(int(i) for i in best))


def table_sensitivity(table: EmbeddingTable, p: int = 2) -> float:
    """Max pairwise lp distance over the table: the one-token-substitution reach.

    Exact over all C(V,2) pairs; cost is quadratic in V.
    """
    if p not in (1, 2):
        raise ParameterError("p must be 1 or 2")
    rows = table.rows64()
    v = rows.shape[0]
    best = 0.0
    chunk = _NN_CHUNK if p == 2 else max(1, 2**25 // max(1, v * table.dim))
    for start in range(0, v, chunk):
        block = rows[start : start + chunk]
        if p == 2:
            d = _distance_block(block, rows, "l2")
            best = max(best, math.sqrt(max(float(d.max()), 0.0)))
        else:
            d = _distance_block(block, rows, "l1")
            best = max(best, float(d.max()))
    return best
