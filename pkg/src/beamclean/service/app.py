"""FastAPI service wrapping the core package.

Stateless with respect to requests: artifacts live on disk and are referenced
by path. Loaded tables are memoized on (path, mtime, size) since attack
workloads hit the same table repeatedly.
"""

from __future__ import annotations

import json
import os
from typing import Optional

from fastapi import FastAPI, HTTPException

from .. import harness
from ..decoder import DecodeConfig
from ..errors import (
    BeamcleanError,
    DataFormatError,
    DecodeAborted,
    ParameterError,
    PriorProtocolError,
)
from ..formats import load_corpus, load_obfuscated, load_table, save_obfuscated, save_table
from ..mechanisms import (
    NoiseMechanismSpec,
    calibrate_scale,
    derive_subseed,
    epsilon_from_scale,
    obfuscate_sequence,
    scale_from_epsilon,
)
from ..metrics import PiiAnnotation, asr, pii_recovery
from ..tables import EmbeddingTable, generate_synthetic_table, table_sensitivity
from ..priors import save_prior, train_ngram
from . import models

app = FastAPI(title="beamclean", version="0.1.0")

_table_cache: dict[str, tuple[tuple, EmbeddingTable]] = {}


def _usage(message: str) -> HTTPException:
    return HTTPException(status_code=400, detail={"kind": "usage", "message": message})


def _data(message: str, status: int = 404) -> HTTPException:
    return HTTPException(status_code=status, detail={"kind": "data", "message": message})


def _cached_table(path: str) -> EmbeddingTable:
    try:
        st = os.stat(path)
    except OSError as exc:
        raise _data(f"table not readable: {exc}") from exc
    key = (st.st_mtime_ns, st.st_size)
    hit = _table_cache.get(path)
    if hit is not None and hit[0] == key:
        return hit[1]
    table = load_table(path)
    _table_cache[path] = (key, table)
    return table


@app.exception_handler(ParameterError)
async def _on_parameter_error(request, exc):
    from fastapi.responses import JSONResponse

    return JSONResponse(status_code=400, content={"detail": {"kind": "usage", "message": str(exc)}})


@app.exception_handler(DataFormatError)
async def _on_format_error(request, exc):
    from fastapi.responses import JSONResponse

    return JSONResponse(status_code=422, content={"detail": {"kind": "data", "message": str(exc)}})


@app.exception_handler(PriorProtocolError)
async def _on_protocol_error(request, exc):
    from fastapi.responses import JSONResponse

    return JSONResponse(status_code=502, content={"detail": {"kind": "data", "message": str(exc)}})


@app.exception_handler(FileNotFoundError)
async def _on_missing_file(request, exc):
    from fastapi.responses import JSONResponse

    return JSONResponse(status_code=404, content={"detail": {"kind": "data", "message": str(exc)}})


@app.get("/healthz")
def healthz():
    return {"status": "ok", "version": app.version}


@app.post("/api/tables/generate", response_model=models.GenTableResponse)
def gen_table(req: models.GenTableRequest):
    table = generate_synthetic_table(req.v, req.d, req.seed, req.min_pairwise_gap)
    save_table(table, req.out)
    return models.GenTableResponse(
        path=req.out, table_id=table.table_id, v=table.vocab_size, d=table.dim
    )


@app.post("/api/priors/train", response_model=models.TrainPriorResponse)
def train_prior(req: models.TrainPriorRequest):
    if req.vocab_size is not None:
        vocab = req.vocab_size
    elif req.table is not None:
        vocab = _cached_table(req.table).vocab_size
    else:
        raise _usage("supply either 'table' or 'vocab_size'")
    entries = load_corpus(req.corpus, max_len=req.max_len)
    for e in entries:
        for t in e.tokens:
            if not 0 <= t < vocab:
                raise _data(f"corpus token id {t} out of range for V={vocab}", status=422)
    prior = train_ngram([e.tokens for e in entries], req.order, req.alpha, vocab)
    save_prior(prior, req.out)
    return models.TrainPriorResponse(
        path=req.out, order=req.order, alpha=req.alpha, vocab_size=vocab,
        sequences=len(entries),
    )


def _resolve_sensitivity(req: models.CalibrateRequest) -> float:
    if req.sensitivity is not None:
        return req.sensitivity
    if req.table is not None:
        p = 1 if req.family == "laplace" else 2
        return table_sensitivity(_cached_table(req.table), p=p)
    raise _usage("supply either 'sensitivity' or 'table'")


@app.post("/api/calibrate", response_model=models.CalibrateResponse)
def calibrate(req: models.CalibrateRequest):
    sensitivity = _resolve_sensitivity(req)
    if (req.epsilon is None) == (req.scale is None):
        raise _usage("supply exactly one of 'epsilon' or 'scale'")
    if req.epsilon is not None:
        fn = calibrate_scale if req.strict else scale_from_epsilon
        scale = fn(req.family, sensitivity, req.epsilon, req.delta)
        epsilon = req.epsilon
    else:
        scale = req.scale
        epsilon = epsilon_from_scale(req.family, sensitivity, req.scale, req.delta)
    return models.CalibrateResponse(
        family=req.family, epsilon=epsilon, scale=scale, delta=req.delta,
        sensitivity=sensitivity,
    )


@app.post("/api/obfuscate", response_model=models.ObfuscateResponse)
def obfuscate(req: models.ObfuscateRequest):
    table = _cached_table(req.table)
    if (req.scale is None) == (req.epsilon is None):
        raise _usage("supply exactly one of 'scale' or 'epsilon'")
    delta = req.delta
    if req.family == "gaussian" and req.epsilon is not None and delta is None:
        delta = 1e-5  # reporting default
    if req.scale is None:
        p = 1 if req.family == "laplace" else 2
        sens = table_sensitivity(table, p=p)
        scale = scale_from_epsilon(req.family, sens, req.epsilon, delta)
    else:
        scale = req.scale
    spec = NoiseMechanismSpec(
        family=req.family,
        scale=scale,
        epsilon=req.epsilon,
        delta=delta if req.family == "gaussian" else None,
    )
    entries = load_corpus(req.corpus, max_len=req.max_len)
    records = []
    for e in entries:
        seed = derive_subseed(req.seed, e.seq_id)
        records.append(obfuscate_sequence(table, e.tokens, spec, seed, seq_id=e.seq_id))
    count = save_obfuscated(records, req.out)
    return models.ObfuscateResponse(path=req.out, sequences=count, scale=scale, epsilon=req.epsilon)


@app.post("/api/attack", response_model=models.AttackResponse)
def attack(req: models.AttackRequest):
    table = _cached_table(req.table)
    records = load_obfuscated(req.obfuscated)
    token_map, prior_table = harness.resolve_token_map(
        {"prior_table": req.token_map.prior_table, "restrict": req.token_map.restrict}
        if req.token_map
        else None,
        table,
    )
    prior = None
    if req.method == "beamclean":
        try:
            prior_cfg = req.prior.to_config()
        except ValueError as exc:
            raise _usage(str(exc)) from exc
        prior = harness.make_prior(prior_cfg, table, prior_table)
    cfg = DecodeConfig(
        beam_width=req.beam_width,
        candidate_pool=req.candidate_pool,
        prior_weight=req.prior_weight,
        estimation=req.estimation,
        family=req.family,
        mode=req.mode,
        seed=req.seed,
    )
    results = []
    try:
        for rec in records:
            res = harness.attack_sequence(
                req.method, table, rec, prior, cfg, token_map, req.nn_norm
            )
            payload = res.to_dict(table)
            results.append(
                models.SequenceAttack(
                    seq_id=rec.seq_id,
                    decoded_ids=payload["decoded_ids"],
                    decoded_tokens=payload["decoded_tokens"],
                    final_beam=payload["final_beam"],
                    theta_trajectory=payload["theta_trajectory"],
                    step_ms=payload["step_ms"],
                    prior_context_drops=payload["prior_context_drops"],
                )
            )
    except DecodeAborted as exc:
        raise HTTPException(
            status_code=502,
            detail={"kind": "data", "message": str(exc)},
        ) from exc
    finally:
        if prior is not None and hasattr(prior, "close"):
            prior.close()
    if req.out:
        with open(req.out, "w", encoding="utf-8") as fh:
            json.dump([r.model_dump() for r in results], fh, indent=1)
    return models.AttackResponse(method=req.method, results=results, path=req.out)


@app.post("/api/evaluate", response_model=models.EvaluateResponse)
def evaluate(req: models.EvaluateRequest):
    entries = {e.seq_id: e for e in load_corpus(req.truth)}
    if (req.results is None) == (req.decoded is None):
        raise _usage("supply exactly one of 'results' or 'decoded'")
    if req.results is not None:
        with open(req.results, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        decoded = {r["seq_id"]: r["decoded_ids"] for r in payload}
    else:
        decoded = req.decoded
    scores = []
    pii_vals = []
    for seq_id, ids in sorted(decoded.items()):
        entry = entries.get(seq_id)
        if entry is None:
            raise _data(f"sequence {seq_id!r} missing from the truth corpus", status=422)
        score = asr(ids, entry.tokens)
        pii = None
        if entry.pii_spans is not None:
            pii = pii_recovery(ids, entry.tokens, PiiAnnotation(seq_id, list(entry.pii_spans)))
        if pii is not None:
            pii_vals.append(pii)
        scores.append(models.SequenceScore(seq_id=seq_id, asr_percent=score, pii_recovery_percent=pii))
    if not scores:
        raise _data("no decoded sequences to evaluate", status=422)
    return models.EvaluateResponse(
        per_sequence=scores,
        mean_asr_percent=sum(s.asr_percent for s in scores) / len(scores),
        mean_pii_recovery_percent=sum(pii_vals) / len(pii_vals) if pii_vals else None,
        sequences=len(scores),
        annotated_sequences=len(pii_vals),
    )


@app.post("/api/sweep", response_model=models.SweepResponse)
def sweep(req: models.SweepRequest):
    if (req.config is None) == (req.config_path is None):
        raise _usage("supply exactly one of 'config' or 'config_path'")
    if req.config_path is not None:
        config = harness.load_sweep_config(req.config_path)
    else:
        config = harness.SweepConfig.from_dict(req.config)
    outcome = harness.run_sweep(config)
    aggregates = [
        models.SweepAggregate(
            epsilon=a.epsilon,
            scale=a.scale,
            method=a.method,
            mean_asr_percent=a.asr_percent,
            mean_pii_recovery_percent=a.pii_recovery_percent,
            failed_cells=int(a.failed),
        )
        for a in outcome.aggregates
    ]
    return models.SweepResponse(
        csv_path=outcome.csv_path,
        cells=len(outcome.cells),
        failed_cells=outcome.failed_cells,
        aggregates=aggregates,
    )
