"""Pydantic request/response models for the HTTP service.

Requests reference artifacts by filesystem path (the service and its clients
share a filesystem); numeric payloads that are small, like attack results and
metrics, ride inline in responses.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenTableRequest(BaseModel):
    v: int = Field(ge=2)
    d: int = Field(ge=1)
    seed: int = 0
    min_pairwise_gap: float = Field(default=0.0, ge=0.0)
    out: str


class GenTableResponse(BaseModel):
    path: str
    table_id: str
    v: int
    d: int


class TrainPriorRequest(BaseModel):
    corpus: str
    out: str
    order: int = Field(default=2, ge=1)
    alpha: float = Field(default=1.0, gt=0.0)
    table: Optional[str] = None
    vocab_size: Optional[int] = None
    max_len: Optional[int] = None


class TrainPriorResponse(BaseModel):
    path: str
    order: int
    alpha: float
    vocab_size: int
    sequences: int


class CalibrateRequest(BaseModel):
    family: Literal["gaussian", "laplace"]
    epsilon: Optional[float] = None
    scale: Optional[float] = None
    delta: Optional[float] = None
    sensitivity: Optional[float] = None
    table: Optional[str] = None          # compute sensitivity from this table
    strict: bool = True                  # epsilon->scale: enforce the DP validity range


class CalibrateResponse(BaseModel):
    family: str
    epsilon: float
    scale: float
    delta: Optional[float]
    sensitivity: float


class ObfuscateRequest(BaseModel):
    table: str
    corpus: str
    family: Literal["gaussian", "laplace"]
    out: str
    scale: Optional[float] = None
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    seed: int = 0
    max_len: Optional[int] = None


class ObfuscateResponse(BaseModel):
    path: str
    sequences: int
    scale: float
    epsilon: Optional[float]


class PriorSpec(BaseModel):
    kind: Literal["uniform", "ngram", "external"] = "uniform"
    path: Optional[str] = None
    endpoint: Optional[str] = None
    timeout: float = 30.0

    def to_config(self) -> dict:
        if self.kind == "ngram":
            if not self.path:
                raise ValueError("ngram prior needs a path")
            return {"kind": "ngram", "path": self.path}
        if self.kind == "external":
            if not self.endpoint:
                raise ValueError("external prior needs an endpoint")
            return {"kind": "external", "endpoint": self.endpoint, "timeout": self.timeout}
        return {"kind": "uniform"}


class TokenMapSpec(BaseModel):
    prior_table: str
    restrict: bool = True


class AttackRequest(BaseModel):
    table: str
    obfuscated: str
    method: Literal["nn", "beamclean"] = "beamclean"
    prior: PriorSpec = Field(default_factory=PriorSpec)
    beam_width: int = Field(default=20, ge=1)
    candidate_pool: Optional[int] = Field(default=None, ge=1)
    prior_weight: float = Field(default=1.0, ge=0.0)
    estimation: Literal["fixed", "closed_form", "gradient"] = "closed_form"
    family: Literal["gaussian", "laplace"] = "gaussian"
    mode: Literal["isotropic", "diagonal"] = "isotropic"
    nn_norm: Literal["l1", "l2"] = "l2"
    token_map: Optional[TokenMapSpec] = None
    seed: int = 0
    out: Optional[str] = None


class SequenceAttack(BaseModel):
    seq_id: str
    decoded_ids: list[int]
    decoded_tokens: list[str]
    final_beam: list[dict]
    theta_trajectory: list[dict]
    step_ms: list[float]
    prior_context_drops: int = 0


class AttackResponse(BaseModel):
    method: str
    results: list[SequenceAttack]
    path: Optional[str] = None


class EvaluateRequest(BaseModel):
    truth: str                            # corpus JSONL with token ids (and spans)
    results: Optional[str] = None         # path to an attack-results JSON file
    decoded: Optional[dict[str, list[int]]] = None   # or inline {seq_id: ids}


class SequenceScore(BaseModel):
    seq_id: str
    asr_percent: float
    pii_recovery_percent: Optional[float] = None


class EvaluateResponse(BaseModel):
    per_sequence: list[SequenceScore]
    mean_asr_percent: float
    mean_pii_recovery_percent: Optional[float]
    sequences: int
    annotated_sequences: int


class SweepRequest(BaseModel):
    config: Optional[dict] = None
    config_path: Optional[str] = None


class SweepAggregate(BaseModel):
    epsilon: float
    scale: float
    method: str
    mean_asr_percent: Optional[float]
    mean_pii_recovery_percent: Optional[float]
    failed_cells: int


class SweepResponse(BaseModel):
    csv_path: str
    cells: int
    failed_cells: int
    aggregates: list[SweepAggregate]


class ErrorBody(BaseModel):
    kind: Literal["usage", "data"]
    message: str
