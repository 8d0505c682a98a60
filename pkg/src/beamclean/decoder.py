"""Causal beam search interleaved with adaptive noise-parameter estimation.

Per time-step: pre-prune the vocabulary to the candidates the current
surrogate finds most likely, refresh the surrogate on the current beam, score
every (hypothesis, candidate) extension as

    log s' = log s + surrogate_loglik(y_t | x(candidate)) + lambda * prior

and keep the top-k extensions. All scoring stays in the log domain (raw
density products underflow within a few steps at realistic dimensions), ties
break lexicographically by token-id sequence, and the whole procedure is
deterministic, independent of parallelism or evaluation order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DecodeAborted, ParameterError, PriorProtocolError
from .priors import MappedPrior, PriorModel, TokenMap
from .surrogate import (
    AdaptiveEstimator,
    SurrogateParams,
    init_params,
    loglik_rows,
)
from .tables import EmbeddingTable, ObfuscatedSequence, TokenSequence


@dataclass(frozen=True)
class BeamHypothesis:
    """A partial sequence and its cumulative log-score (empty prefix scores 0)."""

    ids: tuple[int, ...]
    log_score: float


@dataclass
class DecodeConfig:
    beam_width: int = 20
    candidate_pool: Optional[int] = None     # None means the full vocabulary
    prior_weight: float = 1.0
    estimation: str = "closed_form"          # fixed | closed_form | gradient
    family: str = "gaussian"
    mode: str = "isotropic"
    mu_estimation: bool = False
    seed: int = 0
    initial_params: Optional[SurrogateParams] = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ParameterError("beam_width must be >= 1")
        if self.candidate_pool is not None and self.candidate_pool < 1:
            raise ParameterError("candidate_pool must be >= 1")
        if self.prior_weight < 0:
            raise ParameterError("prior_weight must be >= 0")


@dataclass
class AttackResult:
    decoded: TokenSequence
    final_beam: list[BeamHypothesis]
    theta_trajectory: list[SurrogateParams]
    step_ms: list[float]
    prior_context_drops: int = 0

    def to_dict(self, table: Optional[EmbeddingTable] = None) -> dict:
        out = {
            "decoded_ids": list(self.decoded.ids),
            "final_beam": [
                {"ids": list(h.ids), "log_score": h.log_score} for h in self.final_beam
            ],
            "theta_trajectory": [p.to_dict() for p in self.theta_trajectory],
            "step_ms": self.step_ms,
            "prior_context_drops": self.prior_context_drops,
        }
        if table is not None:
            out["decoded_tokens"] = [table.tokens[i] for i in self.decoded.ids]
        return out


class _MemoPrior(PriorModel):
    """Per-decode memo so estimation and expansion share one query per context."""

    def __init__(self, base: PriorModel):
        self.base = base
        self.vocab_size = base.vocab_size
        self.kind = base.kind
        self._memo: dict = {}

    def next_token_logprobs(self, context):
        key = self.base.context_key(context)
        hit = self._memo.get(key)
        if hit is None:
            hit = self._memo[key] = self.base.next_token_logprobs(context)
        return hit

    def context_key(self, context):
        return self.base.context_key(context)


def candidate_pool(
    theta: SurrogateParams,
    y_t: np.ndarray,
    table: EmbeddingTable,
    pool_size: Optional[int] = None,
    allowed: Optional[np.ndarray] = None,
) -> np.ndarray:
    """The pool_size ids with highest surrogate log-likelihood, descending.

    Ties go to the smaller id; pool_size=None (or V) returns the whole
    vocabulary, ordered. ``allowed`` restricts the universe (token-map use).
    """
    ids = np.arange(table.vocab_size, dtype=np.int64) if allowed is None else np.asarray(allowed)
    ll = loglik_rows(theta, np.asarray(y_t, np.float64), table.rows64()[ids])
    c = len(ids) if pool_size is None else min(pool_size, len(ids))
    if c < 1:
        raise ParameterError("candidate pool is empty")
    order = np.lexsort((ids, -ll))
    return ids[order[:c]]


def _lex_ranks_from_sequences(seqs: list[tuple[int, ...]]) -> np.ndarray:
    order = sorted(range(len(seqs)), key=lambda i: seqs[i])
    ranks = np.empty(len(seqs), dtype=np.int64)
    for r, i in enumerate(order):
        ranks[i] = r
    return ranks


def _expand_arrays(
    ids_arr: np.ndarray,
    scores: np.ndarray,
    lex: np.ndarray,
    theta: SurrogateParams,
    y_t: np.ndarray,
    prior: PriorModel,
    table: EmbeddingTable,
    cands: np.ndarray,
    k: int,
    lam: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, c = ids_arr.shape[0], cands.size
    ll = loglik_rows(theta, y_t, table.rows64()[cands])
    prior_block = np.empty((b, c))
    for i in range(b):
        prior_block[i] = prior.next_token_logprobs(tuple(ids_arr[i]))[cands]
    flat = (scores[:, None] + ll[None, :] + lam * prior_block).ravel()
    parent_flat = np.repeat(lex, c)
    cand_flat = np.tile(cands, b)
    # primary: score descending; ties by lexicographic id sequence, which for
    # equal-length children reduces to (parent's lex rank, candidate id)
    order = np.lexsort((cand_flat, parent_flat, -flat))
    keep = order[: min(k, b * c)]
    parent_idx = keep // c
    new_ids = np.concatenate([ids_arr[parent_idx], cand_flat[keep][:, None]], axis=1)
    new_scores = flat[keep]
    sub = np.lexsort((cand_flat[keep], parent_flat[keep]))
    new_lex = np.empty(keep.size, dtype=np.int64)
    new_lex[sub] = np.arange(keep.size)
    return new_ids, new_scores, new_lex


def expand_beam(
    beam: Sequence[BeamHypothesis],
    y_t: np.ndarray,
    theta: SurrogateParams,
    prior: PriorModel,
    table: EmbeddingTable,
    config: DecodeConfig,
    candidates: Optional[np.ndarray] = None,
) -> list[BeamHypothesis]:
    """Score every (hypothesis, candidate) extension and keep the top-k."""
    if not beam:
        raise ParameterError("beam is empty")
    if candidates is None:
        candidates = candidate_pool(theta, y_t, table, config.candidate_pool)
    seqs = [tuple(h.ids) for h in beam]
    ids_arr = np.asarray(seqs, dtype=np.int64).reshape(len(beam), -1)
    scores = np.asarray([h.log_score for h in beam], dtype=np.float64)
    lex = _lex_ranks_from_sequences(seqs)
    new_ids, new_scores, _ = _expand_arrays(
        ids_arr,
        scores,
        lex,
        theta,
        np.asarray(y_t, np.float64),
        _MemoPrior(prior),
        table,
        np.asarray(candidates, dtype=np.int64),
        config.beam_width,
        config.prior_weight,
    )
    return [
        BeamHypothesis(tuple(int(t) for t in row), float(s))
        for row, s in zip(new_ids, new_scores)
    ]


def decode(
    y: ObfuscatedSequence,
    table: EmbeddingTable,
    prior: PriorModel,
    config: DecodeConfig,
    token_map: Optional[TokenMap] = None,
) -> AttackResult:
    """Run the full causal attack over y_1..y_T and return the best sequence.

    The candidate pool at step t is computed from the pre-update surrogate and
    shared by estimation and expansion, keeping line-4 style updates and the
    expansion loop consistent. Aborts with partial trajectory attached if an
    external prior fails mid-run.
    """
    if y.dim != table.dim:
        raise ParameterError(f"dimension mismatch: y d={y.dim}, table d={table.dim}")
    if token_map is None:
        if prior.vocab_size != table.vocab_size:
            raise ParameterError(
                f"prior vocabulary ({prior.vocab_size}) does not match the "
                f"table ({table.vocab_size}); supply a token map"
            )
        prior_eff: PriorModel = prior
        allowed = None
    else:
        if token_map.src_size != table.vocab_size:
            raise ParameterError("token map source side does not match the table")
        prior_eff = MappedPrior(prior, token_map)
        allowed = token_map.mapped_ids() if token_map.restricted else None
        if allowed is not None and allowed.size == 0:
            raise ParameterError("token map has no mapped ids to decode over")

    t_total = y.length
    if t_total == 0:
        traj = [config.initial_params] if config.initial_params is not None else []
        empty = BeamHypothesis((), 0.0)
        return AttackResult(TokenSequence(()), [empty], traj, [])

    theta = config.initial_params or init_params(config.family, y, table, config.mode)
    if theta.mu.shape[0] != table.dim:
        raise ParameterError("initial_params dimension does not match the table")
    estimator = AdaptiveEstimator(config.estimation, config.mu_estimation)
    memo = _MemoPrior(prior_eff)
    yv = y.values64()

    ids_arr = np.empty((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    lex = np.zeros(1, dtype=np.int64)
    trajectory = [theta]
    step_ms: list[float] = []

    for t in range(t_total):
        tic = time.perf_counter()
        y_t = yv[t]
        cands = candidate_pool(theta, y_t, table, config.candidate_pool, allowed)
        try:
            if config.estimation != "fixed":
                beam_view = [(tuple(row), float(s)) for row, s in zip(ids_arr, scores)]
                theta = estimator.step(
                    theta, beam_view, y_t, memo, table, cands, config.prior_weight
                )
            ids_arr, scores, lex = _expand_arrays(
                ids_arr, scores, lex, theta, y_t, memo, table, cands,
                config.beam_width, config.prior_weight,
            )
        except PriorProtocolError as exc:
            partial = _result(ids_arr, scores, trajectory, step_ms, prior_eff)
            raise DecodeAborted(f"prior failed at step {t + 1}: {exc}", partial) from exc
        trajectory.append(theta)
        step_ms.append((time.perf_counter() - tic) * 1000.0)

    return _result(ids_arr, scores, trajectory, step_ms, prior_eff)


def _result(ids_arr, scores, trajectory, step_ms, prior_eff) -> AttackResult:
    beam = [
        BeamHypothesis(tuple(int(t) for t in row), float(s))
        for row, s in zip(ids_arr, scores)
    ]
    decoded = TokenSequence(beam[0].ids) if beam else TokenSequence(())
    drops = prior_eff.context_drops if isinstance(prior_eff, MappedPrior) else 0
    return AttackResult(decoded, beam, trajectory, step_ms, prior_context_drops=drops)
