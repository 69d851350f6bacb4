"""Word, character and syntactic token features followed by a highway network."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

PAD, OOV = 0, 1
SPECIALS = ("<pad>", "<oov>")

# Coarse tag slots; fine-grained Penn and universal tags are folded onto them.
POS_TAGS = ("NN", "VB", "JJ", "RB", "PRP", "DT", "IN", "CD", "CC", "PUNCT")
_TAG_ALIASES = {
    "NOUN": "NN", "PROPN": "NN", "VERB": "VB", "AUX": "VB", "MD": "VB", "ADJ": "JJ",
    "ADV": "RB", "PRON": "PRP", "WP": "PRP", "WP$": "PRP", "EX": "PRP", "DET": "DT",
    "PDT": "DT", "WDT": "DT", "ADP": "IN", "TO": "IN", "NUM": "CD", "CONJ": "CC",
    "CCONJ": "CC", "SCONJ": "CC", ".": "PUNCT", ",": "PUNCT", ":": "PUNCT",
    "``": "PUNCT", "''": "PUNCT", "-LRB-": "PUNCT", "-RRB-": "PUNCT",
}
_warned_tags: set[str] = set()


def coarse_tag(tag: str) -> str | None:
    if tag in POS_TAGS:
        return tag
    if tag in _TAG_ALIASES:
        return _TAG_ALIASES[tag]
    for prefix in ("NN", "VB", "JJ", "RB", "PRP"):
        if tag.startswith(prefix):
            return prefix
    return None


@dataclass
class Vocab:
    """Index map with ``<pad>`` at 0 and ``<oov>`` at 1."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.itos[:2]) != SPECIALS:
            raise ValueError("vocab must start with the <pad>, <oov> specials")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> Vocab:
        """Entries in order of first appearance."""
        seen = dict.fromkeys(t for t in tokens if t not in SPECIALS)
        return cls([*SPECIALS, *seen])

    def __len__(self) -> int:
        return len(self.itos)

    def index(self, token: str) -> int:
        return self.stoi.get(token, OOV)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index(t) for t in tokens]


@dataclass
class GloveTable:
    vectors: dict[str, np.ndarray]
    dim: int
    skipped: int = 0


def load_glove(path: str | Path) -> GloveTable:
    """Parse GloVe-format text: a token followed by whitespace-separated floats.

    Lines whose arity differs from the first well-formed line, or whose
    numbers do not parse, are skipped and counted.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split()
            if len(parts) < 2:
                skipped += bool(parts)
                continue
            if dim is None:
                dim = len(parts) - 1
            if len(parts) - 1 != dim:
                skipped += 1
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                skipped += 1
                continue
            vectors[parts[0]] = vec
    if not vectors:
        raise ValueError(f"no usable embedding lines in {path}")
    if skipped:
        log.warning("skipped %d malformed embedding lines in %s", skipped, path)
    return GloveTable(vectors, dim, skipped)


def build_vocab(
    sentences: Iterable[Sequence[str]],
    glove: GloveTable | None,
    rng: np.random.Generator,
    word_dim: int = 300,
) -> tuple[Vocab, Tensor]:
    """Vocabulary plus word table; pretrained and ``<pad>`` rows are frozen.

    Rows for tokens missing from ``glove`` (and the shared ``<oov>`` row) are
    drawn uniform in +-sqrt(6 / (1 + word_dim)) and stay trainable.
    """
    sentences = list(sentences)
    if not sentences:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    vocab = Vocab.from_tokens(tok for sent in sentences for tok in sent)
    if glove is not None:
        word_dim = glove.dim
    bound = T.glorot_bound(1, word_dim)
    table = np.zeros((len(vocab), word_dim))
    frozen = np.zeros(len(vocab), dtype=bool)
    frozen[PAD] = True
    for i, tok in enumerate(vocab.itos):
        if i == PAD:
            continue
        if glove is not None and tok in glove.vectors:
            table[i] = glove.vectors[tok]
            frozen[i] = True
        else:
            table[i] = rng.uniform(-bound, bound, word_dim)
    emb = Tensor(table, requires_grad=True)
    emb.update_mask = ~frozen[:, None]
    return vocab, emb


class CharCNN(Module):
    """Character embeddings, a length-preserving conv, then max-pool over positions."""

    def __init__(self, n_chars: int, char_emb_dim: int, channels: int, width: int,
                 rng: np.random.Generator):
        a = T.glorot_bound(1, char_emb_dim)
        table = rng.uniform(-a, a, (n_chars, char_emb_dim))
        table[PAD] = 0.0
        self.table = Tensor(table, requires_grad=True)
        # the conv window reaches past a word's last character into pad slots, which must
        # stay zero so features do not depend on the longest word in the batch
        self.table.update_mask = (np.arange(n_chars) != PAD)[:, None]
        self.kernel = T.glorot((width, char_emb_dim, channels), rng,
                               fan_in=width * char_emb_dim, fan_out=width * channels)
        self.bias = T.zeros_param((channels,))

    def __call__(self, char_ids: np.ndarray, char_mask: np.ndarray) -> Tensor:
        emb = self.table[char_ids]
        return T.pool("max", T.conv1d_same(emb, self.kernel, self.bias), char_mask)


def char_cnn_features(token: str, char_vocab: Vocab, cnn: CharCNN) -> Tensor:
    """``[channels]`` feature vector for one token."""
    if not token:
        raise ValueError("empty token")
    ids = np.array([char_vocab.index(c) for c in token])
    return cnn(ids, np.ones(len(ids), dtype=bool))


def syntactic_features(
    token: str,
    pos_tag: str | None,
    other_tokens: Iterable[str],
    antonyms: Mapping[str, set[str]] | None = None,
) -> np.ndarray:
    """One-hot coarse POS, exact-match bit, antonym bit (``len(POS_TAGS) + 2`` wide)."""
    out = np.zeros(len(POS_TAGS) + 2)
    if pos_tag is not None:
        slot = coarse_tag(pos_tag)
        if slot is None:
            if pos_tag not in _warned_tags:
                _warned_tags.add(pos_tag)
                log.warning("unknown POS tag %r; POS block left empty", pos_tag)
        else:
            out[POS_TAGS.index(slot)] = 1.0
    other = set(other_tokens)
    if token in other:
        out[-2] = 1.0
    if antonyms and antonyms.get(token, set()) & other:
        out[-1] = 1.0
    return out


def load_antonyms(path: str | Path) -> dict[str, set[str]]:
    """Symmetric lexicon from ``word<TAB>word`` lines."""
    lex: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.strip().split("\t")
            if len(parts) != 2:
                continue
            a, b = parts[0].lower(), parts[1].lower()
            lex.setdefault(a, set()).add(b)
            lex.setdefault(b, set()).add(a)
    return lex


class Highway(Module):
    """Two highway layers: y = g * relu(W x + b) + (1 - g) * x, g = sig(W_g x + b_g)."""

    def __init__(self, dim: int, rng: np.random.Generator, n_layers: int = 2,
                 gate_bias: float = -1.0):
        self.layers = [HighwayLayer(dim, rng, gate_bias) for _ in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        return highway2(x, self)


class HighwayLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator, gate_bias: float):
        self.w = T.glorot((dim, dim), rng)
        self.b = T.zeros_param((dim,))
        self.w_gate = T.glorot((dim, dim), rng)
        self.b_gate = T.build_tensor((dim,), "values", values=np.full(dim, gate_bias),
                                     requires_grad=True)


def highway2(x: Tensor, params: Highway) -> Tensor:
    for layer in params.layers:
        if layer.w.shape != (x.shape[-1], x.shape[-1]):
            raise ValueError(f"highway weight {layer.w.shape} does not fit input {x.shape}")
        gate = T.sigmoid(T.linear(x, layer.w_gate, layer.b_gate))
        h = T.relu(T.linear(x, layer.w, layer.b))
        x = x + gate * (h - x)
    return x


@dataclass
class EmbeddedSentence:
    features: Tensor
    mask: np.ndarray
    tokens: list[str]


class Embedder(Module):
    """Per-token ``[word; char; syntactic]`` features passed through the highway net.

    ``forward`` takes the padded index arrays produced by batching and returns
    ``[B, len, d_w]`` with pad rows exactly zero.
    """

    def __init__(self, word_table: Tensor, n_chars: int, rng: np.random.Generator,
                 char_dim: int = 100, char_emb_dim: int = 20, char_width: int = 3,
                 syn_dim: int = len(POS_TAGS) + 2):
        self.word = word_table
        self.chars = CharCNN(n_chars, char_emb_dim, char_dim, char_width, rng)
        self.syn_dim = syn_dim
        self.dim = word_table.shape[1] + char_dim + syn_dim
        self.highway = Highway(self.dim, rng)

    def __call__(self, word_ids: np.ndarray, char_ids: np.ndarray, char_mask: np.ndarray,
                 syn: np.ndarray, mask: np.ndarray) -> Tensor:
        keep = np.asarray(mask, dtype=np.float64)[..., None]
        # pad tokens have no characters; give them one dummy slot and zero them after
        char_mask = char_mask.copy()
        char_mask[..., 0] |= ~np.asarray(mask, dtype=bool)
        feats = T.concat([self.word[word_ids], self.chars(char_ids, char_mask),
                          Tensor(syn)], axis=-1)
        return highway2(feats * keep, self.highway) * keep


def embed_sentence(tokens: Sequence[str], featurizer, embedder: Embedder,
                   other_tokens: Sequence[str] = (), pos: Sequence[str] | None = None
                   ) -> EmbeddedSentence:
    """Embed one sentence (no padding) against its partner ``other_tokens``."""
    if not tokens:
        raise ValueError("cannot embed an empty sentence")
    arrays = featurizer.sentence_arrays([list(tokens)], [list(other_tokens)],
                                        [pos] if pos is not None else None)
    feats = embedder(arrays["ids"], arrays["chars"], arrays["char_mask"], arrays["syn"],
                     arrays["mask"])
    return EmbeddedSentence(feats[0], arrays["mask"][0], list(tokens))
