"""Sweep orchestration: obfuscate -> attack -> score over a privacy-budget grid.

A sweep cell is one (noise level, method, sequence) triple. Noise seeds derive
from (master seed, level index, sequence id) only, so every attack method
faces the identical noise realization and the comparison is paired. Cells are
independent jobs; a bounded worker pool may run them in any order and the CSV
comes out sorted and reproducible regardless.

Results CSV columns (fixed order):
    mechanism, epsilon, scale, delta, method, seq_id,
    asr_percent, pii_recovery_percent, runtime_ms, failed
Per-cell rows come first (sorted by epsilon, method, seq_id), then one
aggregate row per (epsilon, method) with seq_id "__mean__", whose failed
field counts failed cells. runtime_ms is wall-clock unless the config sets
deterministic_runtime, which zeroes it so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional

from .decoder import AttackResult, BeamHypothesis, DecodeConfig, decode
from .errors import BeamcleanError, ParameterError
from .external import ExternalPrior
from .formats import CorpusEntry, load_corpus, load_table
from .mechanisms import (
    NoiseMechanismSpec,
    derive_subseed,
    epsilon_from_scale,
    obfuscate_sequence,
    scale_from_epsilon,
    stable_u64,
)
from .metrics import PiiAnnotation, asr, pii_recovery
from .priors import NgramPrior, PriorModel, TokenMap, UniformPrior, build_token_map, load_prior
from .tables import EmbeddingTable, ObfuscatedSequence, TokenSequence, nn_decode

CSV_COLUMNS = (
    "mechanism",
    "epsilon",
    "scale",
    "delta",
    "method",
    "seq_id",
    "asr_percent",
    "pii_recovery_percent",
    "runtime_ms",
    "failed",
)

AGGREGATE_ID = "__mean__"
METHODS = ("nn", "beamclean")


@dataclass
class SweepConfig:
    table: str
    corpus: str
    mechanism: str
    output: str
    methods: list[str] = field(default_factory=lambda: ["nn", "beamclean"])
    epsilons: Optional[list[float]] = None
    scales: Optional[list[float]] = None
    delta: Optional[float] = None
    seed: int = 0
    max_len: int = 32
    beam_width: int = 20
    candidate_pool: Optional[int] = None
    prior_weight: float = 1.0
    estimation: str = "closed_form"
    surrogate_family: Optional[str] = None   # default: match the mechanism family
    surrogate_mode: str = "isotropic"
    nn_norm: str = "l2"
    prior: dict = field(default_factory=lambda: {"kind": "uniform"})
    token_map: Optional[dict] = None         # {"prior_table": path, "restrict": bool}
    workers: int = 1
    deterministic_runtime: bool = False

    def __post_init__(self):
        if not self.methods:
            raise ParameterError("methods must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                raise ParameterError(f"unknown attack method {m!r}")
        if self.mechanism not in ("gaussian", "laplace"):
            raise ParameterError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "laplace" and self.delta is not None:
            raise ParameterError("laplace sweeps take no delta")
        if (self.epsilons is None) == (self.scales is None):
            raise ParameterError("exactly one of 'epsilons' or 'scales' must be given")
        grid = self.epsilons if self.epsilons is not None else self.scales
        if not grid or any(g <= 0 for g in grid):
            raise ParameterError("grid values must be positive and non-empty")
        if self.workers < 1:
            raise ParameterError("workers must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict) -> "SweepConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ParameterError(f"unknown sweep config fields: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepCell:
    mechanism: str
    epsilon: float
    scale: float
    delta: Optional[float]
    method: str
    seq_id: str
    asr_percent: Optional[float]
    pii_recovery_percent: Optional[float]
    runtime_ms: float
    failed: bool
    error: Optional[str] = None


@dataclass
class SweepOutcome:
    cells: list[SweepCell]
    aggregates: list[SweepCell]
    csv_path: str
    failed_cells: int


def make_prior(
    prior_cfg: dict,
    table: EmbeddingTable,
    prior_table: Optional[EmbeddingTable] = None,
) -> PriorModel:
    """Build the prior named by a config dict.

    kinds: {"kind": "uniform"}, {"kind": "ngram", "path": ...},
    {"kind": "external", "endpoint": "tcp:..."|"cmd:..."}. A uniform prior
    covers the prior-side vocabulary when a prior table is in play.
    """
    kind = prior_cfg.get("kind")
    if kind == "uniform":
        size = (prior_table or table).vocab_size
        return UniformPrior(size)
    if kind == "ngram":
        return load_prior(prior_cfg["path"])
    if kind == "external":
        return ExternalPrior(prior_cfg["endpoint"], timeout=prior_cfg.get("timeout", 30.0))
    raise ParameterError(f"unknown prior kind {kind!r}")


def resolve_token_map(
    cfg: Optional[dict], table: EmbeddingTable
) -> tuple[Optional[TokenMap], Optional[EmbeddingTable]]:
    if cfg is None:
        return None, None
    prior_table = load_table(cfg["prior_table"])
    token_map = build_token_map(
        table, prior_table, restricted=bool(cfg.get("restrict", True))
    )
    return token_map, prior_table


def attack_sequence(
    method: str,
    table: EmbeddingTable,
    y: ObfuscatedSequence,
    prior: Optional[PriorModel],
    decode_cfg: DecodeConfig,
    token_map: Optional[TokenMap] = None,
    nn_norm: str = "l2",
) -> AttackResult:
    """One attack on one sequence; nn results are wrapped as a 1-hypothesis beam."""
    if method == "nn":
        decoded = nn_decode(table, y, norm=nn_norm)
        return AttackResult(decoded, [BeamHypothesis(decoded.ids, 0.0)], [], [])
    if method == "beamclean":
        if prior is None:
            raise ParameterError("beamclean needs a prior")
        return decode(y, table, prior, decode_cfg, token_map=token_map)
    raise ParameterError(f"unknown attack method {method!r}")


def _grid(config: SweepConfig, sensitivity: float, delta) -> list[tuple[float, float]]:
    """(epsilon, scale) pairs; whichever axis is missing is derived."""
    pairs = []
    if config.epsilons is not None:
        for eps in config.epsilons:
            scale = scale_from_epsilon(config.mechanism, sensitivity, eps, delta)
            pairs.append((eps, scale))
    else:
        for scale in config.scales:
            eps = epsilon_from_scale(config.mechanism, sensitivity, scale, delta)
            pairs.append((eps, scale))
    return pairs


def run_sweep(config: SweepConfig) -> SweepOutcome:
    from .tables import table_sensitivity  # deferred: keeps import graph flat

    table = load_table(config.table)
    entries = load_corpus(config.corpus, max_len=config.max_len)
    if not entries:
        raise ParameterError("corpus is empty")
    token_map, prior_table = resolve_token_map(config.token_map, table)
    needs_prior = "beamclean" in config.methods
    prior = make_prior(config.prior, table, prior_table) if needs_prior else None

    p = 1 if config.mechanism == "laplace" else 2
    sensitivity = table_sensitivity(table, p=p)
    # gaussian reporting needs a delta; 1e-5 is the documented default
    delta = None
    if config.mechanism == "gaussian":
        delta = config.delta if config.delta is not None else 1e-5
    levels = _grid(config, sensitivity, delta)
    surrogate_family = config.surrogate_family or config.mechanism
    decode_cfg = DecodeConfig(
        beam_width=config.beam_width,
        candidate_pool=config.candidate_pool,
        prior_weight=config.prior_weight,
        estimation=config.estimation,
        family=surrogate_family,
        mode=config.surrogate_mode,
        seed=config.seed,
    )

    jobs = []
    for level_idx, (eps, scale) in enumerate(levels):
        spec = NoiseMechanismSpec(
            family=config.mechanism,
            scale=scale,
            epsilon=eps,
            delta=delta,
            sensitivity=sensitivity,
        )
        level_seed = stable_u64(f"{config.seed}:{level_idx}")
        for entry in entries:
            if len(entry.tokens) == 0:
                continue
            jobs.append((eps, scale, spec, level_seed, entry))

    def run_cell(job, method) -> SweepCell:
        eps, scale, spec, level_seed, entry = job
        cell_seed = derive_subseed(level_seed, entry.seq_id)
        start = time.perf_counter()
        try:
            y = obfuscate_sequence(table, entry.tokens, spec, cell_seed, seq_id=entry.seq_id)
            result = attack_sequence(
                method, table, y, prior, decode_cfg, token_map, config.nn_norm
            )
            score = asr(result.decoded, entry.tokens)
            pii = None
            if entry.pii_spans is not None:
                ann = PiiAnnotation(entry.seq_id, list(entry.pii_spans))
                pii = pii_recovery(result.decoded, entry.tokens, ann)
            runtime = (time.perf_counter() - start) * 1000.0
            return SweepCell(
                config.mechanism, eps, scale, delta, method, entry.seq_id,
                score, pii, 0.0 if config.deterministic_runtime else runtime, False,
            )
        except Exception as exc:  # a failed cell must not sink the sweep
            runtime = (time.perf_counter() - start) * 1000.0
            return SweepCell(
                config.mechanism, eps, scale, delta, method, entry.seq_id,
                None, None, 0.0 if config.deterministic_runtime else runtime, True,
                error=str(exc),
            )

    tasks = [(job, method) for job in jobs for method in config.methods]
    workers = config.workers
    if isinstance(prior, ExternalPrior):
        workers = 1  # provider sessions are serial per connection
    if workers == 1:
        cells = [run_cell(job, method) for job, method in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(lambda t: run_cell(*t), tasks))

    cells.sort(key=lambda c: (c.epsilon, c.method, c.seq_id))
    aggregates = _aggregate(cells, config, delta)
    _write_csv(config.output, cells + aggregates)
    failed = sum(1 for c in cells if c.failed)
    return SweepOutcome(cells, aggregates, config.output, failed)


def _aggregate(cells: list[SweepCell], config: SweepConfig, delta) -> list[SweepCell]:
    groups: dict[tuple[float, str], list[SweepCell]] = {}
    for c in cells:
        groups.setdefault((c.epsilon, c.method), []).append(c)
    out = []
    for (eps, method), members in sorted(groups.items()):
        ok = [c for c in members if not c.failed]
        asr_vals = [c.asr_percent for c in ok if c.asr_percent is not None]
        pii_vals = [c.pii_recovery_percent for c in ok if c.pii_recovery_percent is not None]
        out.append(
            SweepCell(
                config.mechanism,
                eps,
                members[0].scale,
                delta,
                method,
                AGGREGATE_ID,
                sum(asr_vals) / len(asr_vals) if asr_vals else None,
                sum(pii_vals) / len(pii_vals) if pii_vals else None,
                sum(c.runtime_ms for c in members) / len(members),
                False,
            )
        )
        out[-1].failed = sum(1 for c in members if c.failed)  # count, not flag
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr round-trips and is stable
    return str(value)


def _write_csv(path, cells: list[SweepCell]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for c in cells:
            writer.writerow(
                [
                    c.mechanism,
                    _fmt(c.epsilon),
                    _fmt(c.scale),
                    _fmt(c.delta),
                    c.method,
                    c.seq_id,
                    _fmt(c.asr_percent),
                    _fmt(c.pii_recovery_percent),
                    _fmt(c.runtime_ms),
                    _fmt(c.failed),
                ]
            )


def load_sweep_config(path) -> SweepConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
    return SweepConfig.from_dict(obj)
