"""Dataset parsing, featurisation, padded batches and binary file formats.

Binary layouts (all integers unsigned 64-bit little-endian, all floats
IEEE-754 float64 little-endian):

Checkpoint::

    magic      8 bytes  b"RRNCKPT\\0"
    version    u64
    header_len u64
    header     header_len bytes of UTF-8 JSON:
               {"version", "manifest": [{"name", "shape", "offset", "count"}],
                "config", "seed", "meta", "checksum": sha256 hex of payload}
    count      u64      number of floats in the payload
    payload    count * 8 bytes

Precomputed encodings::

    magic      8 bytes  b"RRNENC\\0\\0"
    version    u64
    n_records  u64
    n_records times:  id_len u64, id bytes (UTF-8), L u64, l_ab u64, d_enc u64
    then for every record in the same order:
               L * l_ab * d_enc floats (layer-major), then d_enc floats (cls)
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import POS_TAGS, Vocab, syntactic_features
from .heads import labels_for

log = logging.getLogger(__name__)

MAX_LEN = 64
MAX_CHARS = 20
_U64 = struct.Struct("<Q")

CHECKPOINT_MAGIC = b"RRNCKPT\x00"
CHECKPOINT_VERSION = 1
ENCODING_MAGIC = b"RRNENC\x00\x00"
ENCODING_VERSION = 1

_PI_ALIASES = {"0": "no", "1": "yes", "false": "no", "true": "yes", "no": "no", "yes": "yes"}


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointTaskError(CheckpointError):
    pass


class EncodingError(ValueError):
    pass


@dataclass
class PairExample:
    tokens_a: list[str]
    tokens_b: list[str]
    label: str
    pos_a: list[str] | None = None
    pos_b: list[str] | None = None
    pair_id: str | None = None


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def normalize_label(raw: str, task: str) -> str:
    label = raw.strip().lower()
    if task == "pi":
        label = _PI_ALIASES.get(label, label)
    return label


def _truncate(tokens: list[str], pos: list[str] | None, where: str, max_len: int):
    if len(tokens) > max_len:
        log.warning("%s: truncating sentence of %d tokens to %d", where, len(tokens), max_len)
        tokens = tokens[:max_len]
        pos = pos[:max_len] if pos is not None else None
    return tokens, pos


def _make_example(a: str, b: str, label: str, task: str, where: str, pos_a=None, pos_b=None,
                  pair_id=None, max_len: int = MAX_LEN) -> PairExample | None:
    label = normalize_label(label, task)
    if label == "-":
        return None
    if label not in labels_for(task):
        raise DatasetError(f"{where}: label {label!r} not in {labels_for(task)}")
    ta, tb = tokenize(a), tokenize(b)
    if not ta or not tb:
        raise DatasetError(f"{where}: empty sentence")
    pa = pos_a.split() if isinstance(pos_a, str) else pos_a
    pb = pos_b.split() if isinstance(pos_b, str) else pos_b
    for pos, toks, name in ((pa, ta, "a"), (pb, tb, "b")):
        if pos is not None and len(pos) != len(toks):
            raise DatasetError(f"{where}: {len(pos)} POS tags for {len(toks)} tokens in sentence {name}")
    ta, pa = _truncate(ta, pa, where, max_len)
    tb, pb = _truncate(tb, pb, where, max_len)
    return PairExample(ta, tb, label, pa, pb, None if pair_id is None else str(pair_id))


def parse_dataset(path: str | Path, fmt: str | None = None, task: str = "nli",
                  max_len: int = MAX_LEN) -> list[PairExample]:
    """Read JSONL (``sentence1``, ``sentence2``, ``gold_label``) or TSV
    (``label``, ``sentence_a``, ``sentence_b`` [, ``pos_a``, ``pos_b``]) pairs.

    Optional JSONL keys: ``pair_id``/``pairID``, ``sentence1_pos``/``sentence2_pos``.
    Pairs labelled ``-`` are dropped; any malformed line raises with its number.
    """
    path = Path(path)
    if fmt is None:
        fmt = "tsv" if path.suffix.lower() in (".tsv", ".txt") else "jsonl"
    if fmt not in ("jsonl", "tsv"):
        raise DatasetError(f"unknown dataset format {fmt!r}")
    examples: list[PairExample] = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{path}:{lineno}"
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{where}: invalid JSON ({exc.msg})") from exc
                missing = [k for k in ("sentence1", "sentence2", "gold_label") if k not in rec]
                if missing:
                    raise DatasetError(f"{where}: missing keys {missing}")
                pair_id = rec.get("pair_id", rec.get("pairID", lineno))
                ex = _make_example(rec["sentence1"], rec["sentence2"], str(rec["gold_label"]),
                                   task, where, rec.get("sentence1_pos"), rec.get("sentence2_pos"),
                                   pair_id, max_len)
                if ex is None:
                    dropped += 1
                else:
                    examples.append(ex)
        else:
            reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
            for lineno, row in enumerate(reader, 1):
                if not row or not any(cell.strip() for cell in row):
                    continue
                if lineno == 1 and row[0].strip().lower() == "label":
                    continue
                where = f"{path}:{lineno}"
                if len(row) not in (3, 5):
                    raise DatasetError(f"{where}: expected 3 or 5 tab-separated columns, got {len(row)}")
                pos_a, pos_b = (row[3], row[4]) if len(row) == 5 else (None, None)
                ex = _make_example(row[1], row[2], row[0], task, where, pos_a, pos_b, lineno,
                                   max_len)
                if ex is None:
                    dropped += 1
                else:
                    examples.append(ex)
    if dropped:
        log.info("%s: dropped %d unlabelled pairs", path, dropped)
    if not examples:
        raise DatasetError(f"{path}: no usable examples")
    return examples


class Featurizer:
    """Turns token lists into the padded index and feature arrays the embedder reads."""

    def __init__(self, vocab: Vocab, char_vocab: Vocab,
                 antonyms: Mapping[str, set[str]] | None = None, max_chars: int = MAX_CHARS):
        self.vocab = vocab
        self.char_vocab = char_vocab
        self.antonyms = antonyms or {}
        self.max_chars = max_chars

    @staticmethod
    def char_vocab_from(examples: Iterable[PairExample]) -> Vocab:
        return Vocab.from_tokens(
            c for ex in examples for tok in (*ex.tokens_a, *ex.tokens_b) for c in tok)

    def sentence_arrays(self, sentences: Sequence[Sequence[str]],
                        others: Sequence[Sequence[str]],
                        pos: Sequence[Sequence[str] | None] | None = None,
                        pad_to: int | None = None) -> dict[str, np.ndarray]:
        n = max(len(s) for s in sentences)
        if pad_to is not None:
            n = max(n, pad_to)
        b = len(sentences)
        longest = max(len(tok) for s in sentences for tok in s)
        c = max(1, min(self.max_chars, longest))
        ids = np.zeros((b, n), dtype=np.int64)
        chars = np.zeros((b, n, c), dtype=np.int64)
        char_mask = np.zeros((b, n, c), dtype=bool)
        syn = np.zeros((b, n, len(POS_TAGS) + 2))
        mask = np.zeros((b, n), dtype=bool)
        for i, (sent, other) in enumerate(zip(sentences, others)):
            tags = pos[i] if pos is not None else None
            other_set = set(other)
            for j, tok in enumerate(sent):
                ids[i, j] = self.vocab.index(tok)
                mask[i, j] = True
                word = tok[: self.max_chars]
                chars[i, j, : len(word)] = [self.char_vocab.index(ch) for ch in word]
                char_mask[i, j, : len(word)] = True
                syn[i, j] = syntactic_features(tok, tags[j] if tags is not None else None,
                                               other_set, self.antonyms)
        return {"ids": ids, "chars": chars, "char_mask": char_mask, "syn": syn, "mask": mask}


@dataclass
class Batch:
    a: dict[str, np.ndarray]
    b: dict[str, np.ndarray]
    labels: np.ndarray
    examples: list[PairExample]
    encodings: dict[str, np.ndarray] | None = None

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def lengths(self) -> tuple[np.ndarray, np.ndarray]:
        return self.a["mask"].sum(axis=1), self.b["mask"].sum(axis=1)


def make_batch(examples: Sequence[PairExample], featurizer: Featurizer,
               labels: Sequence[str] | None = None, pad_a: int | None = None,
               pad_b: int | None = None,
               encodings: Mapping[str, "EncodingRecord"] | None = None) -> Batch:
    ta = [ex.tokens_a for ex in examples]
    tb = [ex.tokens_b for ex in examples]
    has_pos = any(ex.pos_a is not None or ex.pos_b is not None for ex in examples)
    a = featurizer.sentence_arrays(ta, tb, [ex.pos_a for ex in examples] if has_pos else None,
                                   pad_a)
    b = featurizer.sentence_arrays(tb, ta, [ex.pos_b for ex in examples] if has_pos else None,
                                   pad_b)
    if labels is None:
        gold = np.full(len(examples), -1, dtype=np.int64)
    else:
        gold = np.array([labels.index(ex.label) if ex.label in labels else -1
                         for ex in examples], dtype=np.int64)
    enc = stack_encodings(examples, encodings) if encodings is not None else None
    return Batch(a, b, gold, list(examples), enc)


def batch_pad(examples: Sequence[PairExample], batch_size: int, featurizer: Featurizer,
              labels: Sequence[str] | None = None, seed: int | None = None, epoch: int = 0,
              encodings: Mapping[str, "EncodingRecord"] | None = None) -> list[Batch]:
    """Split into batches padded to their own longest sentence.

    With a ``seed`` the order is a permutation drawn from ``(seed, epoch)``;
    without one the input order is kept.
    """
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    return [make_batch([examples[i] for i in order[s:s + batch_size]], featurizer, labels,
                       encodings=encodings)
            for s in range(0, len(examples), batch_size)]


# -- precomputed encodings ------------------------------------------------

@dataclass
class EncodingRecord:
    layers: np.ndarray  # [L, l_ab, d_enc]
    cls: np.ndarray  # [d_enc]


def write_encodings(path: str | Path, records: Mapping[str, EncodingRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(ENCODING_MAGIC)
        fh.write(_U64.pack(ENCODING_VERSION))
        fh.write(_U64.pack(len(records)))
        for pid, rec in records.items():
            raw = pid.encode("utf-8")
            layers = np.asarray(rec.layers, dtype=np.float64)
            if layers.ndim != 3 or rec.cls.shape != (layers.shape[2],):
                raise EncodingError(f"record {pid!r}: inconsistent shapes")
            fh.write(_U64.pack(len(raw)) + raw)
            for dim in layers.shape:
                fh.write(_U64.pack(dim))
        for rec in records.values():
            fh.write(np.ascontiguousarray(rec.layers, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(rec.cls, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EncodingError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_precomputed_encodings(path: str | Path, d_enc: int | None = None,
                               n_layers: int | None = None) -> dict[str, EncodingRecord]:
    r = _Reader(Path(path).read_bytes(), str(path))
    if r.take(8) != ENCODING_MAGIC:
        raise EncodingError(f"{path}: not an encoding file")
    version = r.u64()
    if version != ENCODING_VERSION:
        raise EncodingError(f"{path}: unsupported version {version}")
    heads = []
    for _ in range(r.u64()):
        pid = r.take(r.u64()).decode("utf-8")
        heads.append((pid, r.u64(), r.u64(), r.u64()))
    out: dict[str, EncodingRecord] = {}
    for pid, n_l, l_ab, d in heads:
        if d_enc is not None and d != d_enc:
            raise EncodingError(f"pair {pid!r}: d_enc {d} does not match configured {d_enc}")
        if n_layers is not None and n_l != n_layers:
            raise EncodingError(f"pair {pid!r}: {n_l} layers, configured {n_layers}")
        layers = r.floats(n_l * l_ab * d).reshape(n_l, l_ab, d)
        out[pid] = EncodingRecord(layers, r.floats(d))
    return out


def check_encoding_coverage(examples: Iterable[PairExample],
                            encodings: Mapping[str, EncodingRecord]) -> None:
    for ex in examples:
        if ex.pair_id not in encodings:
            raise EncodingError(f"no precomputed encoding for pair_id {ex.pair_id!r}")


def stack_encodings(examples: Sequence[PairExample],
                    encodings: Mapping[str, EncodingRecord]) -> dict[str, np.ndarray]:
    check_encoding_coverage(examples, encodings)
    recs = [encodings[ex.pair_id] for ex in examples]
    n_l, _, d = recs[0].layers.shape
    n = max(r.layers.shape[1] for r in recs)
    layers = np.zeros((len(recs), n_l, n, d))
    mask = np.zeros((len(recs), n), dtype=bool)
    for i, r in enumerate(recs):
        if r.layers.shape[0] != n_l or r.layers.shape[2] != d:
            raise EncodingError(f"pair {examples[i].pair_id!r}: shape {r.layers.shape} differs")
        layers[i, :, : r.layers.shape[1]] = r.layers
        mask[i, : r.layers.shape[1]] = True
    return {"layers": layers, "cls": np.stack([r.cls for r in recs]), "mask": mask}


# -- checkpoints ----------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict
    seed: int
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], config: dict,
                    seed: int, meta: dict | None = None) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = {"version": CHECKPOINT_VERSION, "manifest": manifest, "config": config,
              "seed": int(seed), "meta": meta or {},
              "checksum": hashlib.sha256(payload).hexdigest()}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_U64.pack(CHECKPOINT_VERSION))
        fh.write(_U64.pack(len(raw)))
        fh.write(raw)
        fh.write(_U64.pack(offset))
        fh.write(payload)


def load_checkpoint(path: str | Path, task: str | None = None) -> Checkpoint:
    """Read and validate a checkpoint.

    Distinct exceptions report a version mismatch, truncation, an inconsistent
    manifest, a payload checksum failure, and (when ``task`` is given) a
    class-count mismatch against that task.
    """
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = _U64.unpack_from(data, 8)[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    header_len = _U64.unpack_from(data, 16)[0]
    start = 24 + header_len
    if start + 8 > len(data):
        raise CheckpointTruncatedError(f"{path}: header truncated")
    header = json.loads(data[24:start].decode("utf-8"))
    count = _U64.unpack_from(data, start)[0]
    payload = data[start + 8:]
    if len(payload) != 8 * count:
        raise CheckpointTruncatedError(
            f"{path}: payload has {len(payload)} bytes, header promises {8 * count}")
    cursor = 0
    for entry in header["manifest"]:
        if entry["offset"] != cursor or entry["count"] != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointManifestError(f"{path}: manifest entry {entry['name']!r} is inconsistent")
        cursor += entry["count"]
    if cursor != count:
        raise CheckpointManifestError(f"{path}: manifest covers {cursor} of {count} floats")
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    params = {e["name"]: flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
              for e in header["manifest"]}
    config = header["config"]
    if task is not None and config.get("task") != task:
        want = len(labels_for(task))
        have = len(labels_for(config.get("task", task)))
        raise CheckpointTaskError(
            f"{path}: checkpoint trained for task {config.get('task')!r} ({have} classes), "
            f"requested {task!r} ({want} classes)")
    return Checkpoint(params, config, header["seed"], header.get("meta", {}), version)
