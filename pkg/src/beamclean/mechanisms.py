"""Defender-side additive noise: Gaussian and Laplace mechanisms with DP calibration.

Calibration follows the classic closed forms:
    laplace   b     = sensitivity / epsilon                      (pure epsilon-DP)
    gaussian  sigma = sqrt(2 ln(1.25/delta)) * sensitivity / epsilon
The gaussian closed form is only valid for 0 < epsilon < 1; outside that range
epsilon is still *reported* via the same algebra (epsilon_from_scale /
scale_from_epsilon place no range restriction) because attack sweeps routinely
quote epsilon well above 1.

Sampling is reproducible bit-for-bit: uniforms come from NumPy's Philox
(counter-based, 4x64) keyed by the seed, consumed in row-major order, and both
families are drawn by inverse CDF. Uniforms are clamped to [2^-53, 1) so the
transforms stay finite.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtri

from .errors import ParameterError
from .tables import EmbeddingTable, ObfuscatedSequence, TokenSequence, embed_sequence

GAUSSIAN = "gaussian"
LAPLACE = "laplace"
FAMILIES = (GAUSSIAN, LAPLACE)

_DELTA_DEFAULT = 1e-5  # reporting default when a config leaves delta unset
_U_FLOOR = 2.0 ** -53


@dataclass(frozen=True)
class NoiseMechanismSpec:
    """Mechanism family + per-coordinate scale, with optional DP bookkeeping.

    ``scale`` is sigma (std-dev) for gaussian, b for laplace. epsilon/delta/
    sensitivity are report-only metadata unless calibrate_scale produced them.
    """

    family: str
    scale: float
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    sensitivity: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown family {self.family!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ParameterError("scale must be positive and finite")
        if self.family == LAPLACE and self.delta is not None:
            raise ParameterError("laplace never carries delta")
        if self.delta is not None and not (0 < self.delta < 1):
            raise ParameterError("delta must lie in (0, 1)")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ParameterError("epsilon must be positive")
        if self.family == GAUSSIAN and self.epsilon is not None and self.delta is None:
            raise ParameterError("gaussian with epsilon set requires delta")


def calibrate_scale(
    family: str,
    sensitivity: float,
    epsilon: float,
    delta: Optional[float] = None,
) -> float:
    """Noise scale achieving the requested DP budget.

    Enforces the gaussian closed form's validity range 0 < epsilon < 1 (and
    0 < delta < 1). Zero sensitivity legitimately yields scale 0.
    """
    if sensitivity < 0 or not math.isfinite(sensitivity):
        raise ParameterError("sensitivity must be finite and >= 0")
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise ParameterError("epsilon must be positive and finite")
    if family == LAPLACE:
        if delta is not None:
            raise ParameterError("laplace calibration takes no delta")
        return float(sensitivity) / float(epsilon)
    if family == GAUSSIAN:
        if delta is None:
            raise ParameterError("gaussian calibration requires delta")
        if not (0 < delta < 1):
            raise ParameterError("delta must lie in (0, 1)")
        if epsilon >= 1:
            raise ParameterError(
                "gaussian closed-form calibration is only valid for epsilon < 1"
            )
        return math.sqrt(2.0 * math.log(1.25 / delta)) * float(sensitivity) / float(epsilon)
    raise ParameterError(f"unknown family {family!r}")


def epsilon_from_scale(
    family: str,
    sensitivity: float,
    scale: float,
    delta: Optional[float] = None,
) -> float:
    """Report-only inverse of the calibration algebra (no range restriction)."""
    if scale <= 0 or not math.isfinite(scale):
        raise ParameterError("scale must be positive and finite")
    if sensitivity < 0 or not math.isfinite(sensitivity):
        raise ParameterError("sensitivity must be finite and >= 0")
    if family == LAPLACE:
        if delta is not None:
            raise ParameterError("laplace carries no delta")
        return float(sensitivity) / float(scale)
    if family == GAUSSIAN:
        d = _DELTA_DEFAULT if delta is None else delta
        if not (0 < d < 1):
            raise ParameterError("delta must lie in (0, 1)")
        return math.sqrt(2.0 * math.log(1.25 / d)) * float(sensitivity) / float(scale)
    raise ParameterError(f"unknown family {family!r}")


def scale_from_epsilon(
    family: str,
    sensitivity: float,
    epsilon: float,
    delta: Optional[float] = None,
) -> float:
    """Scale whose reported epsilon equals the given one (no range restriction).

    Same algebra as calibrate_scale but usable at epsilon >= 1, where the
    gaussian DP guarantee no longer holds and epsilon is purely an axis label.
    """
    if epsilon <= 0 or not math.isfinite(epsilon):
        raise ParameterError("epsilon must be positive and finite")
    if sensitivity < 0 or not math.isfinite(sensitivity):
        raise ParameterError("sensitivity must be finite and >= 0")
    if family == LAPLACE:
        return float(sensitivity) / float(epsilon)
    if family == GAUSSIAN:
        d = _DELTA_DEFAULT if delta is None else delta
        if not (0 < d < 1):
            raise ParameterError("delta must lie in (0, 1)")
        return math.sqrt(2.0 * math.log(1.25 / d)) * float(sensitivity) / float(epsilon)
    raise ParameterError(f"unknown family {family!r}")


def noise_matrix(family: str, scale: float, shape: tuple[int, int], seed: int) -> np.ndarray:
    """Draw i.i.d. zero-centered noise, one coordinate per uniform, row-major."""
    if family not in FAMILIES:
        raise ParameterError(f"unknown family {family!r}")
    if not math.isfinite(scale) or scale < 0:
        raise ParameterError("scale must be finite and >= 0")
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    u = np.maximum(gen.random(shape), _U_FLOOR)
    if family == GAUSSIAN:
        return scale * ndtri(u)
    # Laplace inverse CDF: b*ln(2u) on the left tail, -b*ln(2(1-u)) on the right
    return np.where(u < 0.5, scale * np.log(2.0 * u), -scale * np.log(2.0 * (1.0 - u)))


def derive_subseed(seed: int, seq_id: str) -> int:
    """Per-sequence sub-seed: seed XOR a stable 64-bit hash of the id."""
    return (int(seed) ^ stable_u64(seq_id)) & ((1 << 64) - 1)


def stable_u64(text: str) -> int:
    """Cross-run stable 64-bit hash (blake2b), unlike Python's salted hash()."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def obfuscate_sequence(
    table: EmbeddingTable,
    w: TokenSequence,
    spec: NoiseMechanismSpec,
    seed: int,
    seq_id: str = "",
) -> ObfuscatedSequence:
    """y_t = x(w_t) + n_t with i.i.d. per-coordinate noise from spec's family.

    Deterministic for fixed (seed, spec, w, table). Provenance (spec, seed) is
    recorded for defender-side audit; attack code never reads it.
    """
    x = embed_sequence(table, w)
    n = noise_matrix(spec.family, spec.scale, x.shape, seed)
    return ObfuscatedSequence((x + n).astype(np.float32), seq_id=seq_id, provenance=(spec, seed))
