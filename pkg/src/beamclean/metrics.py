"""Attack scoring: token-level success rate and span-level PII recovery."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ParameterError
from .tables import TokenSequence


@dataclass
class PiiAnnotation:
    """Half-open [start, end) token ranges marking PII in the clean sequence."""

    seq_id: str
    spans: list[tuple[int, int]]

    def validate(self, length: int) -> None:
        ordered = sorted(self.spans)
        prev_end = 0
        for start, end in ordered:
            if not (0 <= start < end <= length):
                raise ParameterError(f"span [{start}, {end}) invalid for length {length}")
            if start < prev_end:
                raise ParameterError(f"span [{start}, {end}) overlaps an earlier span")
            prev_end = end


def asr(decoded: TokenSequence | Sequence[int], truth: TokenSequence | Sequence[int]) -> float:
    """Percent of positions where the decoded token id equals the true one."""
    dec = list(decoded)
    tru = list(truth)
    if len(dec) != len(tru):
        raise ParameterError(f"length mismatch: decoded {len(dec)} vs truth {len(tru)}")
    if not tru:
        raise ParameterError("sequences must be non-empty")
    hits = sum(1 for a, b in zip(dec, tru) if int(a) == int(b))
    return 100.0 * hits / len(tru)


def pii_recovery(
    decoded: TokenSequence | Sequence[int],
    truth: TokenSequence | Sequence[int],
    annotation: PiiAnnotation,
) -> Optional[float]:
    """Percent of PII spans decoded exactly (every token in the span correct).

    Returns None for sequences with no annotated spans; dataset means must
    exclude those rather than count them as 0 or 100.
    """
    dec = list(decoded)
    tru = list(truth)
    if len(dec) != len(tru):
        raise ParameterError(f"length mismatch: decoded {len(dec)} vs truth {len(tru)}")
    annotation.validate(len(tru))
    if not annotation.spans:
        return None
    recovered = 0
    for start, end in annotation.spans:
        if all(int(dec[i]) == int(tru[i]) for i in range(start, end)):
            recovered += 1
    return 100.0 * recovered / len(annotation.spans)
