import json
import logging

import numpy as np
import pytest

from rereadnet.data import (CheckpointChecksumError, CheckpointError, CheckpointManifestError,
                            CheckpointTaskError, CheckpointTruncatedError, CheckpointVersionError,
                            DatasetError, EncodingError, EncodingRecord, Featurizer, PairExample,
                            batch_pad, check_encoding_coverage, load_checkpoint,
                            load_precomputed_encodings, make_batch, parse_dataset, save_checkpoint,
                            write_encodings)
from rereadnet.embedding import Vocab
from rereadnet.heads import NLI_LABELS


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


ROWS = [{"sentence1": "A man sleeps", "sentence2": "a man rests", "gold_label": "entailment"},
        {"sentence1": "Dogs run", "sentence2": "dogs sit", "gold_label": "contradiction"},
        {"sentence1": "She reads", "sentence2": "she reads a novel", "gold_label": "neutral"}]


class TestParse:
    def test_jsonl(self, tmp_path):
        ex = parse_dataset(write_jsonl(tmp_path / "d.jsonl", ROWS))
        assert len(ex) == 3
        assert ex[0].tokens_a == ["a", "man", "sleeps"] and ex[0].label == "entailment"
        assert ex[1].pair_id == "2"

    def test_dash_dropped(self, tmp_path, caplog):
        rows = ROWS + [{"sentence1": "x", "sentence2": "y", "gold_label": "-"}]
        with caplog.at_level(logging.INFO):
            ex = parse_dataset(write_jsonl(tmp_path / "d.jsonl", rows))
        assert len(ex) == 3 and "dropped 1" in caplog.text

    def test_tsv_matches_jsonl(self, tmp_path):
        tsv = tmp_path / "d.tsv"
        tsv.write_text("label\tsentence_a\tsentence_b\n" + "".join(
            f"{r['gold_label']}\t{r['sentence1']}\t{r['sentence2']}\n" for r in ROWS))
        a = parse_dataset(tsv)
        b = parse_dataset(write_jsonl(tmp_path / "d.jsonl", ROWS))
        for x, y in zip(a, b):
            assert (x.tokens_a, x.tokens_b, x.label) == (y.tokens_a, y.tokens_b, y.label)

    def test_pos_columns(self, tmp_path):
        tsv = tmp_path / "d.tsv"
        tsv.write_text("entailment\tdogs run\tdogs move\tNNS VBP\tNNS VBP\n")
        assert parse_dataset(tsv)[0].pos_a == ["NNS", "VBP"]
        tsv.write_text("entailment\tdogs run\tdogs move\tNNS\tNNS VBP\n")
        with pytest.raises(DatasetError, match="POS"):
            parse_dataset(tsv)

    def test_missing_key_names_line(self, tmp_path):
        rows = ROWS[:2] + [{"sentence1": "x", "gold_label": "neutral"}]
        with pytest.raises(DatasetError, match=r"d.jsonl:3: missing keys \['sentence2'\]"):
            parse_dataset(write_jsonl(tmp_path / "d.jsonl", rows))

    def test_bad_json_and_columns(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(json.dumps(ROWS[0]) + "\n{oops\n")
        with pytest.raises(DatasetError, match=":2:"):
            parse_dataset(p)
        t = tmp_path / "d.tsv"
        t.write_text("entailment\tonly two\n")
        with pytest.raises(DatasetError, match=":1:.*columns"):
            parse_dataset(t)

    def test_bad_label_and_empty(self, tmp_path):
        with pytest.raises(DatasetError, match="label"):
            parse_dataset(write_jsonl(tmp_path / "a.jsonl", [dict(ROWS[0], gold_label="maybe")]))
        with pytest.raises(DatasetError, match="empty sentence"):
            parse_dataset(write_jsonl(tmp_path / "b.jsonl", [dict(ROWS[0], sentence2="  ")]))
        (tmp_path / "c.jsonl").write_text("\n")
        with pytest.raises(DatasetError, match="no usable"):
            parse_dataset(tmp_path / "c.jsonl")

    def test_pi_aliases(self, tmp_path):
        t = tmp_path / "p.tsv"
        t.write_text("1\ta b\ta c\n0\ta b\td e\nYes\tx\ty\n")
        assert [e.label for e in parse_dataset(t, task="pi")] == ["yes", "no", "yes"]

    def test_truncation_warns(self, tmp_path, caplog):
        long = " ".join(["w"] * 70)
        with caplog.at_level(logging.WARNING):
            ex = parse_dataset(write_jsonl(tmp_path / "d.jsonl", [dict(ROWS[0], sentence1=long)]))
        assert len(ex[0].tokens_a) == 64 and "truncating" in caplog.text


def featurizer(examples):
    vocab = Vocab.from_tokens(t for ex in examples for t in (*ex.tokens_a, *ex.tokens_b))
    return Featurizer(vocab, Featurizer.char_vocab_from(examples))


class TestBatch:
    EX = [PairExample(["a", "b", "c"], ["x"], "neutral"),
          PairExample(["a", "b", "c", "d", "e"], ["y", "z"], "entailment")]

    def test_padding_law(self):
        b = make_batch(self.EX, featurizer(self.EX), NLI_LABELS)
        assert b.a["ids"].shape == (2, 5)
        assert b.a["mask"][0].tolist() == [True, True, True, False, False]
        assert not b.a["ids"][0, 3:].any()
        assert b.lengths[0].tolist() == [3, 5] and b.labels.tolist() == [2, 0]

    def test_single_batch_boundary(self):
        assert len(batch_pad(self.EX, 10, featurizer(self.EX))) == 1
        assert [bt.size for bt in batch_pad(self.EX * 3, 4, featurizer(self.EX))] == [4, 2]

    def test_seeded_order(self):
        ex = [PairExample([str(i)], ["w"], "neutral") for i in range(20)]
        feat = featurizer(ex)
        order = lambda s, e: [t for bt in batch_pad(ex, 5, feat, seed=s, epoch=e)
                              for t in bt.a["ids"][:, 0]]
        assert order(3, 1) == order(3, 1)
        assert order(3, 1) != order(3, 2)
        assert sorted(order(3, 1)) == sorted(order(None, 0))


class TestCheckpoint:
    PARAMS = {"w": np.arange(6.0).reshape(2, 3) / 7, "b": np.array([np.pi, -0.0, 1e-300])}

    def save(self, path, task="nli"):
        save_checkpoint(path, self.PARAMS, {"task": task, "model": "drrnet"}, 7, {"labels": [1]})
        return path

    def test_round_trip_bit_exact(self, tmp_path):
        ck = load_checkpoint(self.save(tmp_path / "c.ckpt"), task="nli")
        for k, v in self.PARAMS.items():
            assert ck.params[k].tobytes() == v.tobytes()
        assert ck.seed == 7 and ck.meta == {"labels": [1]} and ck.config["model"] == "drrnet"

    def test_version(self, tmp_path):
        raw = bytearray(self.save(tmp_path / "c.ckpt").read_bytes())
        raw[8] = 9
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        raw = self.save(tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(raw[:-5])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_corrupted_payload(self, tmp_path):
        raw = bytearray(self.save(tmp_path / "c.ckpt").read_bytes())
        raw[-3] ^= 0x40
        (tmp_path / "c.ckpt").write_bytes(bytes(raw))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_manifest_conflict(self, tmp_path):
        raw = self.save(tmp_path / "c.ckpt").read_bytes()
        bad = raw.replace(b'"shape": [2, 3]', b'"shape": [3, 3]')
        assert bad != raw and len(bad) == len(raw)
        (tmp_path / "c.ckpt").write_bytes(bad)
        with pytest.raises(CheckpointManifestError):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_task_mismatch(self, tmp_path):
        with pytest.raises(CheckpointTaskError, match="2 classes.*3 classes"):
            load_checkpoint(self.save(tmp_path / "c.ckpt", task="pi"), task="nli")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello world, not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_little_endian_layout(self, tmp_path):
        raw = self.save(tmp_path / "c.ckpt").read_bytes()
        assert raw[:8] == b"RRNCKPT\x00" and raw[8:16] == (1).to_bytes(8, "little")
        assert raw[-24:] == self.PARAMS["b"].astype("<f8").tobytes()


class TestEncodings:
    def records(self, rng):
        return {"p1": EncodingRecord(rng.normal(size=(2, 3, 4)), rng.normal(size=4)),
                "p2": EncodingRecord(rng.normal(size=(2, 5, 4)), rng.normal(size=4))}

    def test_round_trip(self, tmp_path, rng):
        recs = self.records(rng)
        write_encodings(tmp_path / "e.bin", recs)
        back = load_precomputed_encodings(tmp_path / "e.bin", d_enc=4, n_layers=2)
        for k in recs:
            assert back[k].layers.tobytes() == recs[k].layers.tobytes()
            assert back[k].cls.tobytes() == recs[k].cls.tobytes()
        write_encodings(tmp_path / "f.bin", back)
        assert (tmp_path / "e.bin").read_bytes() == (tmp_path / "f.bin").read_bytes()

    def test_dim_mismatch(self, tmp_path, rng):
        write_encodings(tmp_path / "e.bin", self.records(rng))
        with pytest.raises(EncodingError, match="d_enc"):
            load_precomputed_encodings(tmp_path / "e.bin", d_enc=5)
        with pytest.raises(EncodingError, match="layers"):
            load_precomputed_encodings(tmp_path / "e.bin", n_layers=3)

    def test_truncated(self, tmp_path, rng):
        write_encodings(tmp_path / "e.bin", self.records(rng))
        raw = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "e.bin").write_bytes(raw[:-1])
        with pytest.raises(EncodingError, match="truncated"):
            load_precomputed_encodings(tmp_path / "e.bin")

    def test_coverage_names_pair(self, rng):
        ex = [PairExample(["a"], ["b"], "neutral", pair_id="p1"),
              PairExample(["a"], ["b"], "neutral", pair_id="p9")]
        with pytest.raises(EncodingError, match="p9"):
            check_encoding_coverage(ex, self.records(rng))

    def test_batched_padding(self, rng):
        recs = self.records(rng)
        ex = [PairExample(["a"], ["b"], "neutral", pair_id=k) for k in ("p1", "p2")]
        b = make_batch(ex, featurizer(ex), NLI_LABELS, encodings=recs)
        assert b.encodings["layers"].shape == (2, 2, 5, 4)
        assert b.encodings["mask"].sum(axis=1).tolist() == [3, 5]
        assert not b.encodings["layers"][0, :, 3:].any()
