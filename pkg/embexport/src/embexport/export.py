"""Export model embedding tables and tokenized corpora to portable formats.

The table file is the toolkit's EMBT format (little-endian): magic "EMBT",
u32 version=1, u64 V, u64 d, V*d float32 row-major, then V token entries
(u32 byte length + UTF-8). Corpora are JSONL with {"id", "tokens", "text"}.
Embedding weights are narrowed to float32 on disk regardless of the source
precision; the manifest records the original dtype.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


class ExportError(Exception):
    pass


@dataclass
class ExportManifest:
    model: str
    vocab_size: int
    dim: int
    tokenizer_fingerprint: str
    table_path: str
    source_dtype: str

    def to_dict(self) -> dict:
        return asdict(self)


def _load_model_and_tokenizer(model_id: str):
    from transformers import AutoModel, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot resolve model {model_id!r}: {exc}") from exc
    return model, tokenizer


def _ordered_vocab(tokenizer) -> list[str]:
    vocab = tokenizer.get_vocab()
    inverse = {}
    for token, idx in vocab.items():
        if idx in inverse:
            raise ExportError(f"tokenizer maps two strings to id {idx}")
        inverse[idx] = token
    size = len(inverse)
    missing = [i for i in range(size) if i not in inverse]
    if missing:
        raise ExportError(f"tokenizer vocabulary has gaps at ids {missing[:5]}...")
    return [inverse[i] for i in range(size)]


def tokenizer_fingerprint(tokenizer) -> str:
    h = hashlib.blake2b(digest_size=16)
    for i, token in enumerate(_ordered_vocab(tokenizer)):
        h.update(f"{i}:{token}\n".encode("utf-8"))
    return h.hexdigest()


def write_embt(path, vectors: np.ndarray, tokens: list[str]) -> None:
    if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
        raise ExportError("vectors and token list disagree in shape")
    with open(path, "wb") as fh:
        fh.write(b"EMBT")
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<QQ", vectors.shape[0], vectors.shape[1]))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
        for token in tokens:
            raw = token.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def export_table(model_id: str, out_path, manifest_path=None) -> ExportManifest:
    """Write the model's input-embedding matrix and vocabulary as an EMBT file.

    Fails if the embedding row count disagrees with the tokenizer vocabulary
    (padded or truncated embedding matrices would silently misalign ids).
    """
    model, tokenizer = _load_model_and_tokenizer(model_id)
    weight = model.get_input_embeddings().weight.detach().cpu()
    tokens = _ordered_vocab(tokenizer)
    if weight.shape[0] != len(tokens):
        raise ExportError(
            f"embedding matrix has {weight.shape[0]} rows but the tokenizer "
            f"defines {len(tokens)} tokens"
        )
    vectors = weight.numpy()
    write_embt(out_path, vectors.astype(np.float32), tokens)
    manifest = ExportManifest(
        model=str(model_id),
        vocab_size=len(tokens),
        dim=int(weight.shape[1]),
        tokenizer_fingerprint=tokenizer_fingerprint(tokenizer),
        table_path=str(out_path),
        source_dtype=str(weight.dtype).replace("torch.", ""),
    )
    if manifest_path is not None:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
    return manifest


def tokenize_corpus(model_id: str, text_path, out_path, max_len: int = 32) -> int:
    """Tokenize one document per line into the toolkit's JSONL corpus format.

    Ids are truncated to max_len. Undecodable lines are skipped and counted;
    the return value is the number of sequences written.
    """
    if max_len < 1:
        raise ExportError("max_len must be >= 1")
    from transformers import AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
    except (OSError, ValueError) as exc:
        raise ExportError(f"cannot resolve model {model_id!r}: {exc}") from exc

    written = 0
    skipped = 0
    with open(text_path, "rb") as src, open(out_path, "w", encoding="utf-8") as dst:
        for lineno, raw in enumerate(src):
            try:
                line = raw.decode("utf-8").rstrip("\n")
            except UnicodeDecodeError:
                skipped += 1
                continue
            if not line.strip():
                continue
            ids = tokenizer(line, add_special_tokens=False)["input_ids"][:max_len]
            if not ids:
                continue
            obj = {"id": f"line{lineno:06d}", "tokens": ids, "text": line}
            dst.write(json.dumps(obj, ensure_ascii=False) + "\n")
            written += 1
    if skipped:
        print(f"skipped {skipped} undecodable line(s)")
    return written
