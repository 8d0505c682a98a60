"""Portable file formats: EMBT tables, OBF1 obfuscated sequences, JSONL corpora.

EMBT (all integers little-endian):
    magic "EMBT" | u32 version=1 | u64 V | u64 d
    V*d float32 LE, row-major
    V token entries: u32 byte-length + UTF-8 bytes

OBF1:
    magic "OBF1" | u32 version=1 | u64 record count
    per record: u32 id-length + UTF-8 id | u32 T | u32 d | T*d float32 LE
                provenance block: u8 family (0=gaussian, 1=laplace, 255=absent)
                f64 scale | f64 epsilon (NaN if unset) | f64 delta (NaN if unset)
                u64 seed

Corpus: JSON Lines, one object per sequence:
    {"id": str, "tokens": [int], "pii_spans": [[start, end), ...]?, "text": str?}

Round-trips are bit-exact on vectors and token strings. Writers always emit
float32; in-memory tables/sequences hold float32 for that reason.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import DataFormatError
from .mechanisms import NoiseMechanismSpec
from .tables import EmbeddingTable, ObfuscatedSequence, TokenSequence

_EMBT_MAGIC = b"EMBT"
_OBF_MAGIC = b"OBF1"
_VERSION = 1
_FAMILY_CODE = {"gaussian": 0, "laplace": 1}
_FAMILY_FROM_CODE = {0: "gaussian", 1: "laplace"}


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"truncated file while reading {what}")
    return buf


def save_table(table: EmbeddingTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMBT_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<QQ", table.vocab_size, table.dim))
        fh.write(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())
        for tok in table.tokens:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_table(path) -> EmbeddingTable:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _EMBT_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected EMBT")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise DataFormatError(f"unsupported EMBT version {version}")
        v, d = struct.unpack("<QQ", _read_exact(fh, 16, "header"))
        raw = _read_exact(fh, 4 * v * d, "vector payload")
        vectors = np.frombuffer(raw, dtype="<f4").reshape(v, d).copy()
        tokens = []
        for i in range(v):
            (n,) = struct.unpack("<I", _read_exact(fh, 4, f"token {i} length"))
            tokens.append(_read_exact(fh, n, f"token {i}").decode("utf-8"))
        if fh.read(1):
            raise DataFormatError("trailing bytes after token section")
    if len(set(tokens)) != v:
        raise DataFormatError("duplicate token strings in table file")
    return EmbeddingTable(vectors, tuple(tokens), table_id=Path(path).stem)


def save_obfuscated(records: Iterable[ObfuscatedSequence], path) -> int:
    records = list(records)
    with open(path, "wb") as fh:
        fh.write(_OBF_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            raw_id = rec.seq_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<II", rec.length, rec.dim))
            fh.write(np.ascontiguousarray(rec.values, dtype="<f4").tobytes())
            if rec.provenance is not None:
                spec, seed = rec.provenance
                fh.write(struct.pack("<B", _FAMILY_CODE[spec.family]))
                fh.write(struct.pack("<d", spec.scale))
                fh.write(struct.pack("<d", np.nan if spec.epsilon is None else spec.epsilon))
                fh.write(struct.pack("<d", np.nan if spec.delta is None else spec.delta))
                fh.write(struct.pack("<Q", seed))
            else:
                fh.write(struct.pack("<B", 255))
                fh.write(struct.pack("<ddd", np.nan, np.nan, np.nan))
                fh.write(struct.pack("<Q", 0))
    return len(records)


def load_obfuscated(path) -> list[ObfuscatedSequence]:
    out = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != _OBF_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}, expected OBF1")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise DataFormatError(f"unsupported OBF1 version {version}")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "record count"))
        for i in range(count):
            (idlen,) = struct.unpack("<I", _read_exact(fh, 4, "id length"))
            seq_id = _read_exact(fh, idlen, "id").decode("utf-8")
            t, d = struct.unpack("<II", _read_exact(fh, 8, "record header"))
            raw = _read_exact(fh, 4 * t * d, f"record {i} payload")
            values = np.frombuffer(raw, dtype="<f4").reshape(t, d).copy()
            (fam_code,) = struct.unpack("<B", _read_exact(fh, 1, "family"))
            scale, epsilon, delta = struct.unpack("<ddd", _read_exact(fh, 24, "provenance"))
            (seed,) = struct.unpack("<Q", _read_exact(fh, 8, "seed"))
            if fam_code == 255:
                prov = None
            else:
                family = _FAMILY_FROM_CODE.get(fam_code)
                if family is None:
                    raise DataFormatError(f"unknown mechanism family code {fam_code}")
                spec = NoiseMechanismSpec(
                    family=family,
                    scale=scale,
                    epsilon=None if np.isnan(epsilon) else epsilon,
                    delta=None if np.isnan(delta) else delta,
                )
                prov = (spec, seed)
            out.append(ObfuscatedSequence(values, seq_id=seq_id, provenance=prov))
        if fh.read(1):
            raise DataFormatError("trailing bytes after last record")
    return out


@dataclass
class CorpusEntry:
    seq_id: str
    tokens: TokenSequence
    pii_spans: Optional[list[tuple[int, int]]] = None
    text: Optional[str] = None


def load_corpus(path, max_len: Optional[int] = None) -> list[CorpusEntry]:
    """Parse a JSONL corpus, optionally truncating each sequence to max_len."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if "id" not in obj or "tokens" not in obj:
                raise DataFormatError(f"{path}:{lineno}: missing 'id' or 'tokens'")
            tokens = [int(t) for t in obj["tokens"]]
            spans = obj.get("pii_spans")
            if max_len is not None and len(tokens) > max_len:
                tokens = tokens[:max_len]
                if spans:
                    spans = [s for s in spans if s[1] <= max_len]
            if spans is not None:
                spans = [(int(a), int(b)) for a, b in spans]
            entries.append(
                CorpusEntry(
                    seq_id=str(obj["id"]),
                    tokens=TokenSequence(tuple(tokens)),
                    pii_spans=spans,
                    text=obj.get("text"),
                )
            )
    return entries


def save_corpus(entries: Iterable[CorpusEntry], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            obj = {"id": e.seq_id, "tokens": list(e.tokens.ids)}
            if e.pii_spans is not None:
                obj["pii_spans"] = [[a, b] for a, b in e.pii_spans]
            if e.text is not None:
                obj["text"] = e.text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
            n += 1
    return n
