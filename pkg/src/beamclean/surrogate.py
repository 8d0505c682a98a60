"""The attacker's parametric stand-in for the unknown noise mechanism.

A surrogate is a zero- or mu-centered Gaussian or per-coordinate Laplace
density with an isotropic or diagonal scale. Estimation interleaves with
decoding: at each time-step, responsibilities over (beam hypothesis,
candidate token) pairs weight the residuals y_t - x(candidate), and either a
single closed-form (EM) update or a short gradient ascent refreshes the
parameters. Sufficient statistics accumulate across steps, so the estimate at
step t uses all evidence seen so far.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ParameterError
from .priors import PriorModel
from .tables import EmbeddingTable, ObfuscatedSequence

GAUSSIAN = "gaussian"
LAPLACE = "laplace"

ISOTROPIC = "isotropic"
DIAGONAL = "diagonal"

SCALE_FLOOR = 1e-6

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SurrogateParams:
    """theta = (family, mean shift mu, isotropic or per-coordinate scale)."""

    family: str
    mu: np.ndarray               # (d,)
    scale: np.ndarray            # (1,) isotropic or (d,) diagonal
    mode: str = ISOTROPIC

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        if self.family not in (GAUSSIAN, LAPLACE):
            raise ParameterError(f"unknown surrogate family {self.family!r}")
        if self.mode not in (ISOTROPIC, DIAGONAL):
            raise ParameterError(f"unknown mode {self.mode!r}")
        if self.mode == ISOTROPIC and self.scale.shape != (1,):
            raise ParameterError("isotropic mode takes a single scale")
        if self.mode == DIAGONAL and self.scale.shape != self.mu.shape:
            raise ParameterError("diagonal mode needs one scale per coordinate")
        if not np.all(np.isfinite(self.mu)):
            raise ParameterError("mu must be finite")
        if not (np.all(np.isfinite(self.scale)) and np.all(self.scale > 0)):
            raise ParameterError("scales must be positive and finite")

    def copy(self) -> "SurrogateParams":
        return SurrogateParams(self.family, self.mu.copy(), self.scale.copy(), self.mode)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "mode": self.mode,
            "mu": [float(x) for x in self.mu],
            "scale": [float(x) for x in self.scale],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SurrogateParams":
        return cls(obj["family"], np.asarray(obj["mu"]), np.asarray(obj["scale"]), obj["mode"])

    @classmethod
    def isotropic(cls, family: str, dim: int, scale: float) -> "SurrogateParams":
        return cls(family, np.zeros(dim), np.array([scale]), ISOTROPIC)


def loglik_rows(theta: SurrogateParams, y: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Log-density of observation y under theta for each clean row (N,)."""
    e = y[None, :].astype(np.float64) - rows.astype(np.float64) - theta.mu[None, :]
    s = theta.scale  # broadcasts over coordinates in both modes
    d = e.shape[1]
    if theta.family == GAUSSIAN:
        if theta.mode == ISOTROPIC:
            norm = -0.5 * d * (_LOG_2PI + 2.0 * math.log(s[0]))
        else:
            norm = -0.5 * (d * _LOG_2PI + 2.0 * np.log(s).sum())
        return norm - 0.5 * np.einsum("nd,nd->n", e / s[None, :] ** 2, e)
    if theta.mode == ISOTROPIC:
        norm = -d * math.log(2.0 * s[0])
    else:
        norm = -np.log(2.0 * s).sum()
    return norm - (np.abs(e) / s[None, :]).sum(axis=1)


def surrogate_loglik(theta: SurrogateParams, y: np.ndarray, x: np.ndarray) -> float:
    """Exact log-density of one (noisy, clean) pair; positive values are fine."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape or y.shape != theta.mu.shape:
        raise ParameterError("dimension mismatch between theta, y, and x")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise ParameterError("non-finite inputs")
    return float(loglik_rows(theta, y, x[None, :])[0])


def init_params(
    family: str,
    y: ObfuscatedSequence | np.ndarray,
    table: EmbeddingTable,
    mode: str = ISOTROPIC,
) -> SurrogateParams:
    """Start from nearest-row residuals: sigma0^2 (or b0) from their moments.

    Nearest rows are taken in the family's own norm; the resulting scale is
    biased low (residuals to the *nearest* row understate the noise), which
    the adaptive updates correct within a few steps. Scales floor at 1e-6.
    """
    values = y.values64() if isinstance(y, ObfuscatedSequence) else np.asarray(y, np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ParameterError("need at least one observed position")
    from .tables import nn_decode  # local import to avoid cycle at module load

    norm = "l2" if family == GAUSSIAN else "l1"
    nn = nn_decode(table, ObfuscatedSequence(values.astype(np.float32)), norm=norm)
    resid = values - table.rows64()[np.asarray(nn.ids, dtype=np.int64)]
    d = values.shape[1]
    if family == GAUSSIAN:
        if mode == ISOTROPIC:
            scale = np.array([math.sqrt(float(np.mean(resid**2)))])
        else:
            scale = np.sqrt(np.mean(resid**2, axis=0))
    elif family == LAPLACE:
        if mode == ISOTROPIC:
            scale = np.array([float(np.mean(np.abs(resid)))])
        else:
            scale = np.mean(np.abs(resid), axis=0)
    else:
        raise ParameterError(f"unknown surrogate family {family!r}")
    return SurrogateParams(family, np.zeros(d), np.maximum(scale, SCALE_FLOOR), mode)


def _beam_items(beam) -> list[tuple[tuple[int, ...], float]]:
    items = []
    for h in beam:
        if hasattr(h, "ids") and hasattr(h, "log_score"):
            ids = tuple(h.ids.ids) if hasattr(h.ids, "ids") else tuple(h.ids)
            items.append((ids, float(h.log_score)))
        else:
            ids, score = h
            ids = tuple(ids.ids) if hasattr(ids, "ids") else tuple(ids)
            items.append((ids, float(score)))
    if not items:
        raise ParameterError("beam is empty")
    return items


def _pair_logscores(
    theta: SurrogateParams,
    beam,
    y_t: np.ndarray,
    prior: PriorModel,
    table: EmbeddingTable,
    candidates: Sequence[int],
    prior_weight: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores a[h, c] = hyp + loglik + w*prior; also returns residuals (C, d)."""
    cand = np.asarray(list(candidates), dtype=np.int64)
    if cand.size == 0:
        raise ParameterError("candidate set is empty")
    items = _beam_items(beam)
    rows = table.rows64()[cand]
    y = np.asarray(y_t, dtype=np.float64)
    ll = loglik_rows(theta, y, rows)
    scores = np.array([s for _, s in items])
    cache: dict = {}
    prior_block = np.empty((len(items), cand.size))
    for i, (ids, _) in enumerate(items):
        # contexts here are the hypotheses' full prefixes; for t=1 this is the
        # empty context, which n-gram priors serve via order-1 backoff
        key = prior.context_key(ids)
        if key not in cache:
            cache[key] = prior.next_token_logprobs(ids)
        prior_block[i] = cache[key][cand]
    a = scores[:, None] + ll[None, :] + prior_weight * prior_block
    resid = y[None, :] - rows
    return a, resid, cand


def step_marginal_loglik(
    theta: SurrogateParams,
    beam,
    y_t: np.ndarray,
    prior: PriorModel,
    table: EmbeddingTable,
    candidates: Sequence[int],
    prior_weight: float = 1.0,
) -> float:
    """log sum over (hypothesis, candidate) pairs of exp(hyp + loglik + prior).

    Computed wholly in the log domain; the result is always at least the
    largest single term.
    """
    a, _, _ = _pair_logscores(theta, beam, y_t, prior, table, candidates, prior_weight)
    out = float(logsumexp(a))
    if not math.isfinite(out):
        raise ParameterError("marginal log-likelihood is not finite")
    return out


def marginal_grad(
    theta: SurrogateParams,
    beam,
    y_t: np.ndarray,
    prior: PriorModel,
    table: EmbeddingTable,
    candidates: Sequence[int],
    prior_weight: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of step_marginal_loglik w.r.t. (mu, log scale).

    Responsibility-weighted sums of the per-pair density gradients; the
    Laplace mu-gradient uses sign(residual) with sign(0) = 0.
    """
    a, resid, _ = _pair_logscores(theta, beam, y_t, prior, table, candidates, prior_weight)
    gamma = np.exp(a - logsumexp(a)).sum(axis=0)  # (C,) responsibility per candidate
    e = resid - theta.mu[None, :]
    s = theta.scale
    if theta.family == GAUSSIAN:
        g_mu = (gamma[:, None] * e / s[None, :] ** 2).sum(axis=0)
        per_coord = (gamma[:, None] * (e**2 / s[None, :] ** 2 - 1.0)).sum(axis=0)
    else:
        g_mu = (gamma[:, None] * np.sign(e) / s[None, :]).sum(axis=0)
        per_coord = (gamma[:, None] * (np.abs(e) / s[None, :] - 1.0)).sum(axis=0)
    if theta.mode == ISOTROPIC:
        g_logscale = np.array([per_coord.sum()])
    else:
        g_logscale = per_coord
    return g_mu, g_logscale


@dataclass
class SufficientStats:
    """Responsibility-weighted residual moments, accumulated across steps."""

    weight: float
    resid_sum: np.ndarray
    sq_sum: np.ndarray
    abs_sum: np.ndarray

    @classmethod
    def zero(cls, dim: int) -> "SufficientStats":
        return cls(0.0, np.zeros(dim), np.zeros(dim), np.zeros(dim))

    def accumulate(self, gamma: np.ndarray, resid: np.ndarray) -> None:
        # np.sum reduces pairwise, keeping results order-independent to ~1e-16
        weighted = gamma[:, None] * resid
        self.weight += float(gamma.sum())
        self.resid_sum += weighted.sum(axis=0)
        self.sq_sum += (weighted * resid).sum(axis=0)
        self.abs_sum += np.abs(weighted).sum(axis=0)


class AdaptiveEstimator:
    """Carries estimation state (sufficient stats) through a decode run.

    method: "fixed" returns theta unchanged; "closed_form" applies one EM
    update per step using stats from all steps so far; "gradient" runs
    backtracking ascent on the current step's marginal log-likelihood.
    """

    METHODS = ("fixed", "closed_form", "gradient")

    def __init__(self, method: str = "closed_form", mu_estimation: bool = False):
        if method not in self.METHODS:
            raise ParameterError(f"unknown estimation method {method!r}")
        self.method = method
        self.mu_estimation = mu_estimation
        self.stats: Optional[SufficientStats] = None
        self.scale_clamped = False

    def step(
        self,
        theta_prev: SurrogateParams,
        beam,
        y_t: np.ndarray,
        prior: PriorModel,
        table: EmbeddingTable,
        candidates: Sequence[int],
        prior_weight: float = 1.0,
    ) -> SurrogateParams:
        if self.method == "fixed":
            return theta_prev
        if self.method == "closed_form":
            return self._closed_form(theta_prev, beam, y_t, prior, table, candidates, prior_weight)
        return self._gradient(theta_prev, beam, y_t, prior, table, candidates, prior_weight)

    def _closed_form(self, theta, beam, y_t, prior, table, candidates, prior_weight):
        if theta.family == LAPLACE and self.mu_estimation:
            raise ParameterError(
                "closed-form laplace updates pin mu at 0; use the gradient method"
            )
        a, resid, _ = _pair_logscores(theta, beam, y_t, prior, table, candidates, prior_weight)
        gamma = np.exp(a - logsumexp(a)).sum(axis=0)
        if self.stats is None:
            self.stats = SufficientStats.zero(resid.shape[1])
        self.stats.accumulate(gamma, resid)
        st = self.stats
        d = resid.shape[1]
        mu = st.resid_sum / st.weight if self.mu_estimation else np.zeros(d)
        if theta.family == GAUSSIAN:
            var_per_coord = st.sq_sum / st.weight - mu**2
            if theta.mode == ISOTROPIC:
                scale = np.array([math.sqrt(max(float(var_per_coord.mean()), 0.0))])
            else:
                scale = np.sqrt(np.maximum(var_per_coord, 0.0))
        else:
            if theta.mode == ISOTROPIC:
                scale = np.array([float(st.abs_sum.mean()) / st.weight])
            else:
                scale = st.abs_sum / st.weight
        return self._finish(theta, mu, scale)

    def _gradient(self, theta, beam, y_t, prior, table, candidates, prior_weight):
        def objective(th):
            return step_marginal_loglik(th, beam, y_t, prior, table, candidates, prior_weight)

        current = theta.copy()
        f_cur = objective(current)
        for _ in range(50):
            g_mu, g_ls = marginal_grad(
                current, beam, y_t, prior, table, candidates, prior_weight
            )
            step = 0.1
            accepted = None
            for _ in range(21):  # first try plus up to 20 halvings
                mu_try = current.mu + step * g_mu if self.mu_estimation else current.mu
                scale_try = np.exp(np.log(current.scale) + step * g_ls)
                trial = SurrogateParams(
                    current.family, mu_try, np.maximum(scale_try, SCALE_FLOOR), current.mode
                )
                f_try = objective(trial)
                if f_try >= f_cur:
                    accepted = (trial, f_try)
                    break
                step *= 0.5
            if accepted is None:
                break
            trial, f_try = accepted
            rel_change = abs(f_try - f_cur) / max(1.0, abs(f_cur))
            current, f_cur = trial, f_try
            if rel_change < 1e-6:
                break
        if not math.isfinite(f_cur):
            raise ParameterError("gradient objective became non-finite")
        return current

    def _finish(self, theta, mu, scale):
        if np.any(scale < SCALE_FLOOR):
            self.scale_clamped = True
            scale = np.maximum(scale, SCALE_FLOOR)
        return SurrogateParams(theta.family, mu, scale, theta.mode)


def estimate_step(
    theta_prev: SurrogateParams,
    beam,
    y_t: np.ndarray,
    prior: PriorModel,
    table: EmbeddingTable,
    candidates: Sequence[int],
    method: str = "closed_form",
    estimator: Optional[AdaptiveEstimator] = None,
    prior_weight: float = 1.0,
    mu_estimation: bool = False,
) -> SurrogateParams:
    """One parameter update; pass an AdaptiveEstimator to persist stats across steps."""
    est = estimator if estimator is not None else AdaptiveEstimator(method, mu_estimation)
    if estimator is not None and estimator.method != method:
        raise ParameterError("estimator method disagrees with the method argument")
    return est.step(theta_prev, beam, y_t, prior, table, candidates, prior_weight)
