"""Language priors over token sequences, plus cross-vocabulary token maps.

Every prior answers one question: given a context w_1..w_{t-1}, what is the
log-probability vector over the next token? Vectors always normalize (their
exp sums to 1), and with add-alpha smoothing no entry is ever -inf, so beam
scores stay finite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Optional, Sequence

import numpy as np

from .errors import DataFormatError, ParameterError
from .tables import EmbeddingTable, TokenSequence


class PriorModel:
    """Interface: normalized next-token log-probabilities for any context."""

    vocab_size: int
    kind: str

    def next_token_logprobs(self, context: Sequence[int]) -> np.ndarray:
        raise NotImplementedError

    def context_key(self, context: Sequence[int]) -> Hashable:
        """Cache key capturing everything the prior reads from the context."""
        return tuple(context)


def uniform_logprobs(vocab_size: int) -> np.ndarray:
    if vocab_size < 1:
        raise ParameterError("vocab_size must be >= 1")
    return np.full(vocab_size, -math.log(vocab_size))


class UniformPrior(PriorModel):
    kind = "uniform"

    def __init__(self, vocab_size: int):
        if vocab_size < 1:
            raise ParameterError("vocab_size must be >= 1")
        self.vocab_size = vocab_size
        self._vec = uniform_logprobs(vocab_size)

    def next_token_logprobs(self, context: Sequence[int]) -> np.ndarray:
        return self._vec

    def context_key(self, context: Sequence[int]) -> Hashable:
        return ()


class NgramPrior(PriorModel):
    """Add-alpha n-gram model with shorten-until-seen context backoff.

    Counts are exact corpus frequencies at every order up to n. A query lands
    at the longest suffix of the context whose continuation count is nonzero
    (the empty context always qualifies), then applies
    (count(ctx, w) + alpha) / (count(ctx) + alpha * V).
    """

    kind = "ngram"

    def __init__(self, order: int, alpha: float, vocab_size: int):
        if order < 1:
            raise ParameterError("order must be >= 1")
        if alpha <= 0:
            raise ParameterError("alpha must be > 0")
        if vocab_size < 1:
            raise ParameterError("vocab_size must be >= 1")
        self.order = order
        self.alpha = alpha
        self.vocab_size = vocab_size
        # context tuple -> {token id: count}; context totals kept alongside
        self._counts: dict[tuple[int, ...], dict[int, int]] = {}
        self._totals: dict[tuple[int, ...], int] = {}

    def observe(self, seq: Sequence[int]) -> None:
        ids = [int(t) for t in seq]
        if any(not 0 <= t < self.vocab_size for t in ids):
            raise ParameterError("corpus contains out-of-range token ids")
        for pos, w in enumerate(ids):
            max_ctx = min(self.order - 1, pos)
            for clen in range(0, max_ctx + 1):
                ctx = tuple(ids[pos - clen : pos])
                bucket = self._counts.setdefault(ctx, {})
                bucket[w] = bucket.get(w, 0) + 1
                self._totals[ctx] = self._totals.get(ctx, 0) + 1

    def next_token_logprobs(self, context: Sequence[int]) -> np.ndarray:
        ctx = tuple(int(t) for t in context)[-(self.order - 1) :] if self.order > 1 else ()
        if any(not 0 <= t < self.vocab_size for t in ctx):
            raise ParameterError("context contains out-of-range token ids")
        while ctx and self._totals.get(ctx, 0) == 0:
            ctx = ctx[1:]
        total = self._totals.get(ctx, 0)
        probs = np.full(self.vocab_size, self.alpha)
        for w, c in self._counts.get(ctx, {}).items():
            probs[w] += c
        probs /= total + self.alpha * self.vocab_size
        return np.log(probs)

    def context_key(self, context: Sequence[int]) -> Hashable:
        if self.order == 1:
            return ()
        return tuple(int(t) for t in context[-(self.order - 1) :])

    def to_dict(self) -> dict:
        counts = {
            " ".join(map(str, ctx)): {str(w): c for w, c in sorted(bucket.items())}
            for ctx, bucket in sorted(self._counts.items())
        }
        return {
            "kind": self.kind,
            "order": self.order,
            "alpha": self.alpha,
            "vocab_size": self.vocab_size,
            "counts": counts,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NgramPrior":
        try:
            prior = cls(int(obj["order"]), float(obj["alpha"]), int(obj["vocab_size"]))
            for ctx_key, bucket in obj["counts"].items():
                ctx = tuple(int(t) for t in ctx_key.split()) if ctx_key else ()
                prior._counts[ctx] = {int(w): int(c) for w, c in bucket.items()}
                prior._totals[ctx] = sum(prior._counts[ctx].values())
        except (KeyError, ValueError, TypeError) as exc:
            raise DataFormatError(f"malformed n-gram prior payload: {exc}") from exc
        return prior


def train_ngram(
    corpus: Iterable[TokenSequence | Sequence[int]],
    order: int,
    alpha: float,
    vocab_size: int,
) -> NgramPrior:
    """Count exact n-gram frequencies over the corpus at all orders up to n."""
    prior = NgramPrior(order, alpha, vocab_size)
    n = 0
    for seq in corpus:
        prior.observe(list(seq))
        n += 1
    if n == 0:
        raise ParameterError("corpus is empty")
    return prior


def save_prior(prior: NgramPrior, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prior.to_dict(), fh, sort_keys=True)


def load_prior(path) -> NgramPrior:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    if obj.get("kind") != "ngram":
        raise DataFormatError(f"{path}: not an n-gram prior file")
    return NgramPrior.from_dict(obj)


@dataclass
class TokenMap:
    """Injective partial map between two vocabularies, by exact token string.

    ``restricted`` controls decoding: when True (the default), only mapped
    source ids are eligible beam candidates, mirroring the restricted-
    vocabulary setup for mismatched prior models.
    """

    src_to_dst: dict[int, int]
    src_size: int
    dst_size: int
    restricted: bool = True
    unmapped_src: tuple[int, ...] = ()

    def __post_init__(self):
        if len(set(self.src_to_dst.values())) != len(self.src_to_dst):
            raise ParameterError("token map must be injective")
        for s, d in self.src_to_dst.items():
            if not (0 <= s < self.src_size and 0 <= d < self.dst_size):
                raise ParameterError("token map contains out-of-range ids")

    @property
    def coverage(self) -> float:
        return len(self.src_to_dst) / self.src_size if self.src_size else 0.0

    def mapped_ids(self) -> np.ndarray:
        return np.array(sorted(self.src_to_dst), dtype=np.int64)


def build_token_map(
    src: EmbeddingTable,
    dst: EmbeddingTable,
    restrict_to: Optional[set[str]] = None,
    restricted: bool = True,
) -> TokenMap:
    """Match vocabularies on byte-identical token strings.

    ``restrict_to`` further intersects with an allow-set of token strings
    (e.g. the tokens actually present in some corpus).
    """
    dst_index = {tok: i for i, tok in enumerate(dst.tokens)}
    mapping: dict[int, int] = {}
    unmapped = []
    for i, tok in enumerate(src.tokens):
        if restrict_to is not None and tok not in restrict_to:
            unmapped.append(i)
            continue
        j = dst_index.get(tok)
        if j is None:
            unmapped.append(i)
        else:
            mapping[i] = j
    return TokenMap(
        src_to_dst=mapping,
        src_size=src.vocab_size,
        dst_size=dst.vocab_size,
        restricted=restricted,
        unmapped_src=tuple(unmapped),
    )


class MappedPrior(PriorModel):
    """Score source-vocabulary tokens through a prior over another vocabulary.

    Contexts are translated (unmappable positions dropped); the returned
    vector is indexed by *source* ids, gathering the base prior's value for
    each mapped token. Unmapped source ids score at the uniform floor
    -log(dst vocab size). This is a scoring adapter, not a distribution: the
    gather does not renormalize.
    """

    kind = "mapped"

    def __init__(self, base: PriorModel, token_map: TokenMap):
        if base.vocab_size != token_map.dst_size:
            raise ParameterError(
                f"prior covers {base.vocab_size} tokens but the map expects "
                f"{token_map.dst_size}"
            )
        self.base = base
        self.token_map = token_map
        self.vocab_size = token_map.src_size
        self.context_drops = 0
        self._src = token_map.mapped_ids()
        self._dst = np.array([token_map.src_to_dst[int(s)] for s in self._src], dtype=np.int64)
        self._floor = -math.log(token_map.dst_size)

    def next_token_logprobs(self, context: Sequence[int]) -> np.ndarray:
        translated, dropped = translate_context(self.token_map, context)
        self.context_drops += dropped
        base_vec = self.base.next_token_logprobs(list(translated))
        out = np.full(self.vocab_size, self._floor)
        out[self._src] = base_vec[self._dst]
        return out

    def context_key(self, context: Sequence[int]) -> Hashable:
        translated, _ = translate_context(self.token_map, context)
        return self.base.context_key(list(translated))


def translate_context(token_map: TokenMap, context: Sequence[int]) -> tuple[TokenSequence, int]:
    """Map a source-side context into the destination vocabulary.

    Positions with no mapping are dropped; the second return value counts the
    drops so callers can surface coverage in run metadata.
    """
    out = []
    dropped = 0
    for t in context:
        d = token_map.src_to_dst.get(int(t))
        if d is None:
            dropped += 1
        else:
            out.append(d)
    return TokenSequence(tuple(out)), dropped
