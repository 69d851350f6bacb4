"""DRr-Net and LadRa-Net forward passes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import Batch
from .drr import DrrState, DynamicReread, drr_read
from .embedding import POS_TAGS, Embedder
from .encoder import StackGRU, StackOutput, self_attn_pool
from .heads import FusionGate, heuristic_match
from .ladra import (DsaState, LayerFusion, LocalEncoding, MultiLayerEncoding, PhraseConv,
                    SequentialAttention, dsa_read, local_self_attn_pool, pcnn_forward,
                    weighted_layer_sum)
from .nn import MLP, AttnPool, Module
from .tensor import Tensor

SEP_TOKEN = "[SEP]"


@dataclass
class ModelConfig:
    model: str = "drrnet"
    n_classes: int = 3
    word_dim: int = 300
    char_dim: int = 100
    char_emb_dim: int = 20
    char_width: int = 3
    syn_dim: int = len(POS_TAGS) + 2
    d_g: int = 256
    d_a: int = 200
    l_s: int = 3
    t1: int = 6
    t2: int = 5
    beta: float = 100.0
    pcnn_kernels: tuple[int, ...] = (2, 3)
    pcnn_inner: int = 500
    mlp_hidden: int = 300
    encoder: str = "internal"
    d_enc: int | None = None
    n_enc_layers: int = 1
    use_coverage: bool = True

    @property
    def d_w(self) -> int:
        return self.word_dim + self.char_dim + self.syn_dim

    @property
    def d_stack(self) -> int:
        return self.d_w + self.l_s * self.d_g

    def to_dict(self) -> dict:
        out = asdict(self)
        out["pcnn_kernels"] = list(self.pcnn_kernels)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in raw.items() if k in known}
        if "pcnn_kernels" in kw:
            kw["pcnn_kernels"] = tuple(kw["pcnn_kernels"])
        return cls(**kw)


@dataclass
class ModelOutput:
    probs: Tensor
    extras: dict = field(default_factory=dict)


class DrrNet(Module):
    """Embedding, stacked GRU, attention pooling, dynamic re-read, matching and gated fusion."""

    def __init__(self, cfg: ModelConfig, word_table: Tensor, n_chars: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.embedder = Embedder(word_table, n_chars, rng, cfg.char_dim, cfg.char_emb_dim,
                                 cfg.char_width, cfg.syn_dim)
        self.stack = StackGRU(self.embedder.dim, cfg.d_g, cfg.l_s, rng)
        d = self.stack.d_out
        self.pool = AttnPool(d, cfg.d_a, rng)
        self.reread = DynamicReread(d, cfg.d_g, cfg.d_a, rng)
        self.mlp_global = MLP(4 * d, [cfg.mlp_hidden, cfg.mlp_hidden], cfg.n_classes, rng)
        self.mlp_reread = MLP(4 * cfg.d_g, [cfg.mlp_hidden, cfg.mlp_hidden], cfg.n_classes, rng)
        self.gate = FusionGate(cfg.n_classes, [cfg.mlp_hidden], rng)

    def encode(self, arrays: dict[str, np.ndarray]) -> StackOutput:
        x = self.embedder(arrays["ids"], arrays["chars"], arrays["char_mask"], arrays["syn"],
                          arrays["mask"])
        return self.stack(x, arrays["mask"])

    def __call__(self, batch: Batch) -> ModelOutput:
        return drrnet_forward(batch, self)


def drrnet_forward(batch: Batch, model: DrrNet) -> ModelOutput:
    cfg = model.cfg
    enc_a, enc_b = model.encode(batch.a), model.encode(batch.b)
    h_a = self_attn_pool(enc_a, model.pool)
    h_b = self_attn_pool(enc_b, model.pool)
    v_a, state_a = drr_read(enc_a, h_a, h_b, model.reread, cfg.t1, cfg.beta)
    v_b, state_b = drr_read(enc_b, h_b, h_a, model.reread, cfg.t1, cfg.beta)
    match_h = heuristic_match(h_a, h_b)
    match_v = heuristic_match(v_a, v_b)
    p_h = model.mlp_global(match_h)
    p_v = model.mlp_reread(match_v)
    a_h, a_v = model.gate.gates(p_h, p_v)
    probs = model.gate.mlp(a_h * p_h + a_v * p_v)
    extras = {"stack_a": enc_a, "stack_b": enc_b, "h_a": h_a, "h_b": h_b,
              "match_h": match_h, "match_v": match_v, "p_h": p_h, "p_v": p_v,
              "gate_h": a_h, "gate_v": a_v, "reread_a": state_a, "reread_b": state_b}
    return ModelOutput(probs, extras)


class InternalEncoder(Module):
    """Stacked-GRU stand-in for a pretrained encoder over the packed pair ``a [SEP] b``."""

    def __init__(self, cfg: ModelConfig, word_table: Tensor, n_chars: int,
                 rng: np.random.Generator):
        self.embedder = Embedder(word_table, n_chars, rng, cfg.char_dim, cfg.char_emb_dim,
                                 cfg.char_width, cfg.syn_dim)
        d_w = self.embedder.dim
        a = T.glorot_bound(1, d_w)
        self.sep = T.build_tensor((d_w,), "uniform", lo=-a, hi=a, rng=rng, requires_grad=True)
        self.stack = StackGRU(d_w, cfg.d_g, cfg.l_s, rng)
        self.pool = AttnPool(self.stack.d_out, cfg.d_a, rng)

    @property
    def d_enc(self) -> int:
        return self.stack.d_out

    def __call__(self, batch: Batch) -> MultiLayerEncoding:
        ea = self.embedder(batch.a["ids"], batch.a["chars"], batch.a["char_mask"], batch.a["syn"],
                           batch.a["mask"])
        eb = self.embedder(batch.b["ids"], batch.b["chars"], batch.b["char_mask"], batch.b["syn"],
                           batch.b["mask"])
        idx, mask = pack_indices(batch.a["mask"], batch.b["mask"])
        bsz, _, d = ea.shape
        sep = T.reshape(self.sep, (1, 1, d)) * np.ones((bsz, 1, 1))
        full = T.concat([ea, sep, eb, T.Tensor(np.zeros((bsz, 1, d)))], axis=1)
        packed = full[np.arange(bsz)[:, None], idx]
        out = self.stack(packed, mask)
        cls = self_attn_pool(out, self.pool)
        return MultiLayerEncoding(T.expand_dims(out.states, 1), cls, mask)


def pack_indices(mask_a: np.ndarray, mask_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gather indices into ``[a | sep | b | zero]`` that left-align ``a [SEP] b``."""
    la_max, lb_max = mask_a.shape[1], mask_b.shape[1]
    len_a, len_b = mask_a.sum(axis=1), mask_b.sum(axis=1)
    total = len_a + 1 + len_b
    n = int(total.max())
    zero_row = la_max + 1 + lb_max
    idx = np.full((len(len_a), n), zero_row, dtype=np.int64)
    for i, (la, lb) in enumerate(zip(len_a, len_b)):
        idx[i, :la] = np.arange(la)
        idx[i, la] = la_max
        idx[i, la + 1: la + 1 + lb] = la_max + 1 + np.arange(lb)
    mask = np.arange(n)[None, :] < total[:, None]
    return idx, mask


def packed_tokens(tokens_a: list[str], tokens_b: list[str]) -> list[str]:
    return [*tokens_a, SEP_TOKEN, *tokens_b]


class LadraNet(Module):
    """Layer fusion, phrase CNN, local pooling, sequential attention with coverage, MLP."""

    def __init__(self, cfg: ModelConfig, word_table: Tensor | None, n_chars: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        if cfg.encoder == "internal":
            self.encoder = InternalEncoder(cfg, word_table, n_chars, rng)
            d_enc = self.encoder.d_enc
            n_layers = 1
        elif cfg.encoder == "precomputed":
            if cfg.d_enc is None:
                raise ValueError("precomputed encoder mode needs d_enc")
            self.encoder = None
            d_enc = cfg.d_enc
            n_layers = cfg.n_enc_layers
        else:
            raise ValueError(f"unknown encoder mode {cfg.encoder!r}")
        self.d_enc = d_enc
        self.fusion = LayerFusion(n_layers)
        self.pcnn = [PhraseConv(k, d_enc, cfg.pcnn_inner, rng) for k in cfg.pcnn_kernels]
        self.pools = [AttnPool(d_enc, cfg.d_a, rng) for _ in cfg.pcnn_kernels]
        self.dsa = SequentialAttention(d_enc, cfg.d_g, cfg.d_a, len(cfg.pcnn_kernels) + 1, rng)
        self.mlp = MLP(cfg.d_g, [cfg.mlp_hidden], cfg.n_classes, rng)

    def encode(self, batch: Batch) -> MultiLayerEncoding:
        if self.encoder is not None:
            return self.encoder(batch)
        if batch.encodings is None:
            raise ValueError("batch carries no precomputed encodings")
        enc = batch.encodings
        return MultiLayerEncoding(Tensor(enc["layers"]), Tensor(enc["cls"]), enc["mask"])

    def __call__(self, batch: Batch) -> ModelOutput:
        return ladranet_forward(batch, self)


def ladranet_forward(batch: Batch, model: LadraNet) -> ModelOutput:
    cfg = model.cfg
    enc = model.encode(batch)
    h0 = weighted_layer_sum(enc, model.fusion)
    grans = [h0, *pcnn_forward(h0, enc.mask, model.pcnn)]
    pooled, h_ab = local_self_attn_pool(grans, enc.mask, enc.cls, model.pools)
    local = LocalEncoding(grans, enc.mask, pooled, h_ab)
    hiddens, state = dsa_read(local, model.dsa, cfg.t2, cfg.beta, cfg.use_coverage)
    v = T.stack(hiddens, axis=0).mean(axis=0)
    probs = model.mlp(v)
    return ModelOutput(probs, {"encoding": enc, "local": local, "dsa": state, "v": v,
                               "n_averaged": len(hiddens)})


def build_model(cfg: ModelConfig, word_table: Tensor | None, n_chars: int, seed: int):
    rng = np.random.default_rng(seed)
    if cfg.model == "drrnet":
        return DrrNet(cfg, word_table, n_chars, rng)
    if cfg.model == "ladranet":
        return LadraNet(cfg, word_table, n_chars, rng)
    raise ValueError(f"unknown model {cfg.model!r}")
