import json

import numpy as np
import pytest

from beamclean import EmbeddingTable, TokenSequence, generate_synthetic_table


@pytest.fixture
def small_table():
    return generate_synthetic_table(50, 8, seed=11, min_pairwise_gap=0.5)


@pytest.fixture
def tiny_table():
    # fixed rows so distances are hand-checkable
    vectors = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], dtype=np.float32)
    return EmbeddingTable(vectors, ("a", "b", "c"), table_id="tiny")


def random_sequence(rng, vocab_size, length):
    return TokenSequence(tuple(int(t) for t in rng.integers(0, vocab_size, size=length)))


def write_corpus(path, entries):
    """entries: list of (seq_id, token list, optional spans)."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            obj = {"id": entry[0], "tokens": list(entry[1])}
            if len(entry) > 2 and entry[2] is not None:
                obj["pii_spans"] = [list(s) for s in entry[2]]
            fh.write(json.dumps(obj) + "\n")
    return path
