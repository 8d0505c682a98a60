import json

import numpy as np
import pytest

# the attack toolkit's reference loader validates exported files through the
# published EMBT file contract
from beamclean import load_corpus, load_table, save_table

from embexport import ExportError, export_table, tokenize_corpus
from embexport.cli import main

from conftest import SAMPLE_LINES


class TestExportTable:
    def test_export_loads_with_matching_shape(self, tiny_model_dir, tmp_path):
        out = tmp_path / "tiny.embt"
        manifest = export_table(tiny_model_dir, out, manifest_path=tmp_path / "m.json")
        table = load_table(out)
        assert (table.vocab_size, table.dim) == (manifest.vocab_size, manifest.dim)
        assert manifest.vocab_size == 320
        assert manifest.dim == 16
        recorded = json.loads((tmp_path / "m.json").read_text())
        assert recorded["vocab_size"] == table.vocab_size
        assert recorded["tokenizer_fingerprint"] == manifest.tokenizer_fingerprint

    def test_vectors_match_model_weights(self, tiny_model_dir, tmp_path):
        from transformers import AutoModel

        out = tmp_path / "tiny.embt"
        export_table(tiny_model_dir, out)
        table = load_table(out)
        weight = AutoModel.from_pretrained(tiny_model_dir).get_input_embeddings().weight
        assert np.array_equal(table.vectors, weight.detach().numpy().astype(np.float32))

    def test_token_strings_come_from_tokenizer(self, tiny_model_dir, tmp_path):
        from transformers import AutoTokenizer

        out = tmp_path / "tiny.embt"
        export_table(tiny_model_dir, out)
        table = load_table(out)
        tok = AutoTokenizer.from_pretrained(tiny_model_dir)
        vocab = tok.get_vocab()
        for idx in (0, 7, 200, len(vocab) - 1):
            assert vocab[table.tokens[idx]] == idx

    def test_round_trip_bit_exact(self, tiny_model_dir, tmp_path):
        out = tmp_path / "tiny.embt"
        export_table(tiny_model_dir, out)
        resaved = tmp_path / "resaved.embt"
        save_table(load_table(out), resaved)
        assert out.read_bytes() == resaved.read_bytes()

    def test_export_is_idempotent(self, tiny_model_dir, tmp_path):
        a, b = tmp_path / "a.embt", tmp_path / "b.embt"
        export_table(tiny_model_dir, a)
        export_table(tiny_model_dir, b)
        assert a.read_bytes() == b.read_bytes()

    def test_unresolvable_model(self, tmp_path):
        with pytest.raises(ExportError, match="cannot resolve"):
            export_table(str(tmp_path / "missing"), tmp_path / "x.embt")

    def test_shape_mismatch_detected(self, tiny_model_dir, tmp_path):
        # re-save the model with extra embedding rows the tokenizer lacks
        from transformers import AutoModelForCausalLM

        model = AutoModelForCausalLM.from_pretrained(tiny_model_dir)
        model.resize_token_embeddings(330)
        broken = tmp_path / "broken"
        model.save_pretrained(broken)
        from transformers import AutoTokenizer

        AutoTokenizer.from_pretrained(tiny_model_dir).save_pretrained(broken)
        with pytest.raises(ExportError, match="rows"):
            export_table(str(broken), tmp_path / "x.embt")


class TestTokenizeCorpus:
    def test_ids_are_valid_against_exported_table(self, tiny_model_dir, tmp_path):
        table_path = tmp_path / "t.embt"
        export_table(tiny_model_dir, table_path)
        table = load_table(table_path)
        text = tmp_path / "docs.txt"
        text.write_text("\n".join(SAMPLE_LINES), encoding="utf-8")
        out = tmp_path / "c.jsonl"
        count = tokenize_corpus(tiny_model_dir, text, out, max_len=32)
        assert count == len(SAMPLE_LINES)
        entries = load_corpus(out)
        assert len(entries) == count
        for entry in entries:
            assert len(entry.tokens) >= 1
            assert all(0 <= t < table.vocab_size for t in entry.tokens)

    def test_empty_file(self, tiny_model_dir, tmp_path):
        text = tmp_path / "empty.txt"
        text.write_text("")
        assert tokenize_corpus(tiny_model_dir, text, tmp_path / "c.jsonl") == 0

    def test_max_len_truncates(self, tiny_model_dir, tmp_path):
        text = tmp_path / "docs.txt"
        text.write_text("\n".join(SAMPLE_LINES), encoding="utf-8")
        out = tmp_path / "c.jsonl"
        tokenize_corpus(tiny_model_dir, text, out, max_len=1)
        for entry in load_corpus(out):
            assert len(entry.tokens) == 1

    def test_detokenize_retokenize_round_trip(self, tiny_model_dir, tmp_path):
        from transformers import AutoTokenizer

        text = tmp_path / "docs.txt"
        text.write_text("\n".join(SAMPLE_LINES), encoding="utf-8")
        out = tmp_path / "c.jsonl"
        tokenize_corpus(tiny_model_dir, text, out, max_len=64)
        tok = AutoTokenizer.from_pretrained(tiny_model_dir)
        for entry in load_corpus(out):
            decoded = tok.decode(list(entry.tokens))
            again = tok(decoded, add_special_tokens=False)["input_ids"]
            assert tuple(again) == entry.tokens.ids

    def test_undecodable_lines_skipped(self, tiny_model_dir, tmp_path):
        text = tmp_path / "docs.txt"
        with open(text, "wb") as fh:
            fh.write(b"good line one\n")
            fh.write(b"\xff\xfe broken \xff\n")
            fh.write(b"good line two\n")
        out = tmp_path / "c.jsonl"
        assert tokenize_corpus(tiny_model_dir, text, out) == 2


class TestCli:
    def test_table_command(self, tiny_model_dir, tmp_path, capsys):
        out = tmp_path / "t.embt"
        rc = main(["table", tiny_model_dir, str(out), "--manifest", str(tmp_path / "m.json")])
        assert rc == 0
        body = json.loads(capsys.readouterr().out)
        assert body["vocab_size"] == 320
        assert load_table(out).dim == body["dim"]

    def test_corpus_command(self, tiny_model_dir, tmp_path, capsys):
        text = tmp_path / "d.txt"
        text.write_text("jackdaws love my big sphinx\n")
        rc = main(["corpus", tiny_model_dir, str(text), str(tmp_path / "c.jsonl")])
        assert rc == 0
        assert json.loads(capsys.readouterr().out)["sequences"] == 1

    def test_bad_model_exit_code(self, tmp_path):
        assert main(["table", str(tmp_path / "none"), str(tmp_path / "x.embt")]) == 2
