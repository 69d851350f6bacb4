"""Finite-difference checks for every differentiable op and both full models.

Each registered check builds a tiny seeded instance, reduces the op output to
a scalar with fixed random weights, and returns ``grad_check``'s worst
relative error. Inputs are drawn away from relu kinks and pool ties.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Featurizer, PairExample, make_batch
from .drr import DynamicReread, drr_read, drr_select
from .embedding import CharCNN, Highway, build_vocab, highway2
from .encoder import StackGRU, StackOutput, self_attn_pool
from .heads import NLI_LABELS, FusionGate, fusion_gate, heuristic_match
from .ladra import (LayerFusion, LocalEncoding, MultiLayerEncoding, PhraseConv,
                    SequentialAttention, coverage_scale, dsa_fuse_step, dsa_read, dsa_select,
                    local_self_attn_pool, pcnn_forward, weighted_layer_sum)
from .models import ModelConfig, build_model
from .nn import MLP, AttnPool, GRUCell
from .tensor import Tensor
from .training import cross_entropy

THRESHOLD = 1e-4
REGISTRY: dict[str, Callable[[np.random.Generator], float]] = {}


def register(name: str):
    def deco(fn):
        REGISTRY[name] = fn
        return fn
    return deco


def _leaf(rng, *shape, away_from_zero: bool = False) -> Tensor:
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05 + x, x)
    return Tensor(x, requires_grad=True)


def _reduce(out: Tensor, rng_seed: int = 99) -> Tensor:
    weights = np.random.default_rng(rng_seed).normal(size=out.shape)
    return (out * weights).sum()


def _check(fn, tensors) -> float:
    return T.grad_check(lambda: _reduce(fn()), tensors)


def _params(module) -> list[Tensor]:
    return module.parameters()


def _stack_output(rng, b=2, n=3, d=4) -> tuple[StackOutput, Tensor]:
    states = _leaf(rng, b, n, d)
    mask = np.ones((b, n), dtype=bool)
    mask[1, -1] = False
    return StackOutput(states, mask), states


# -- primitive ops --------------------------------------------------------

@register("matmul")
def _(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return _check(lambda: T.matmul(a, b), [a, b])


@register("linear")
def _(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5)
    return _check(lambda: T.linear(x, w, b), [x, w, b])


@register("add")
def _(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    return _check(lambda: T.add(a, b), [a, b])


@register("sub")
def _(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    return _check(lambda: T.sub(a, b), [a, b])


@register("mul")
def _(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    return _check(lambda: T.mul(a, b), [a, b])


@register("div")
def _(rng):
    a = _leaf(rng, 3, 4)
    b = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    return _check(lambda: T.div(a, b), [a, b])


@register("tanh")
def _(rng):
    x = _leaf(rng, 3, 4)
    return _check(lambda: T.tanh(x), [x])


@register("sigmoid")
def _(rng):
    x = _leaf(rng, 3, 4)
    return _check(lambda: T.sigmoid(x), [x])


@register("relu")
def _(rng):
    x = _leaf(rng, 3, 4, away_from_zero=True)
    return _check(lambda: T.relu(x), [x])


@register("exp")
def _(rng):
    x = _leaf(rng, 3, 4)
    return _check(lambda: T.exp(x), [x])


@register("log")
def _(rng):
    x = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True)
    return _check(lambda: T.log(x), [x])


@register("clip")
def _(rng):
    x = Tensor(rng.uniform(-0.5, 1.5, (4, 5)), requires_grad=True)
    x.data[np.abs(x.data) < 0.05] += 0.1
    x.data[np.abs(x.data - 1) < 0.05] += 0.1
    return _check(lambda: T.clip(x, 0.0, 1.0), [x])


@register("sum")
def _(rng):
    x = _leaf(rng, 3, 4)
    return _check(lambda: T.tsum(x, axis=1), [x])


@register("mean")
def _(rng):
    x = _leaf(rng, 3, 4)
    return _check(lambda: T.mean(x, axis=0, keepdims=True), [x])


@register("reshape_transpose")
def _(rng):
    x = _leaf(rng, 2, 3, 4)
    return _check(lambda: T.transpose(T.reshape(x, (6, 4)), (1, 0)), [x])


@register("getitem")
def _(rng):
    x = _leaf(rng, 5, 3)
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    return _check(lambda: x[idx], [x])


@register("concat")
def _(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    return _check(lambda: T.concat([a, b], axis=-1), [a, b])


@register("stack")
def _(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return _check(lambda: T.stack([a, b], axis=1), [a, b])


@register("softmax_sharp")
def _(rng):
    # logits scaled so beta * spread stays O(1): a saturated softmax has no gradient to check
    x = Tensor(rng.normal(size=(3, 5)) * 0.02, requires_grad=True)
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    return _check(lambda: T.softmax_sharp(x, 100.0, mask), [x])


@register("conv1d_same_k2")
def _(rng):
    x, k, b = _leaf(rng, 2, 4, 3), _leaf(rng, 2, 3, 2), _leaf(rng, 2)
    return _check(lambda: T.conv1d_same(x, k, b), [x, k, b])


@register("conv1d_same_k3")
def _(rng):
    x, k, b = _leaf(rng, 2, 4, 3), _leaf(rng, 3, 3, 2), _leaf(rng, 2)
    return _check(lambda: T.conv1d_same(x, k, b), [x, k, b])


@register("pool_max")
def _(rng):
    x = Tensor(rng.permutation(24).reshape(2, 4, 3) * 0.1, requires_grad=True)
    mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    return _check(lambda: T.pool("max", x, mask), [x])


@register("pool_avg")
def _(rng):
    x = _leaf(rng, 2, 4, 3)
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    return _check(lambda: T.pool("avg", x, mask), [x])


@register("nll")
def _(rng):
    logits = _leaf(rng, 4, 3)
    gold = np.array([0, 2, 1, 1])
    return T.grad_check(lambda: T.nll(T.softmax(logits), gold), [logits])


# -- architecture units ---------------------------------------------------

@register("char_cnn")
def _(rng):
    cnn = CharCNN(6, 3, 4, 3, rng)
    ids = np.array([[2, 3, 4, 0], [5, 2, 0, 0]])
    mask = ids > 0
    return _check(lambda: cnn(ids, mask), _params(cnn))


@register("highway2")
def _(rng):
    hw = Highway(4, rng)
    x = _leaf(rng, 2, 3, 4)
    return _check(lambda: highway2(x, hw), [x, *_params(hw)])


@register("gru_cell")
def _(rng):
    cell = GRUCell(3, 4, rng)
    x, h = _leaf(rng, 2, 3), Tensor(np.tanh(rng.normal(size=(2, 4))), requires_grad=True)
    return _check(lambda: cell(x, h), [x, h, *_params(cell)])


@register("stack_gru")
def _(rng):
    stack = StackGRU(3, 2, 2, rng)
    x = _leaf(rng, 2, 3, 3)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    return _check(lambda: stack(x, mask).states, [x, *_params(stack)])


@register("self_attn_pool")
def _(rng):
    out, states = _stack_output(rng)
    pool = AttnPool(4, 3, rng)
    return _check(lambda: self_attn_pool(out, pool), [states, *_params(pool)])


@register("drr_select")
def _(rng):
    out, states = _stack_output(rng)
    unit = DynamicReread(4, 3, 3, rng)
    h, g = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    return _check(lambda: drr_select(out, h, g, unit.attn, beta=1.0)[0],
                  [states, h, g, *_params(unit.attn)])


@register("drr_read")
def _(rng):
    # two tokens, two steps
    states = _leaf(rng, 1, 2, 4)
    out = StackOutput(states, np.ones((1, 2), dtype=bool))
    unit = DynamicReread(4, 3, 3, rng)
    ha, hb = _leaf(rng, 1, 4), _leaf(rng, 1, 4)
    return _check(lambda: drr_read(out, ha, hb, unit, steps=2, beta=1.0)[0],
                  [states, ha, hb, *_params(unit)])


@register("weighted_layer_sum")
def _(rng):
    layers = _leaf(rng, 2, 3, 4, 5)
    enc = MultiLayerEncoding(layers, Tensor(np.zeros((2, 5))), np.ones((2, 4), dtype=bool))
    fusion = LayerFusion(3)
    fusion.logits.data[:] = rng.normal(size=3)
    return _check(lambda: weighted_layer_sum(enc, fusion), [layers, fusion.logits])


@register("pcnn")
def _(rng):
    convs = [PhraseConv(2, 3, 4, rng), PhraseConv(3, 3, 4, rng)]
    x = _leaf(rng, 1, 4, 3)
    mask = np.ones((1, 4), dtype=bool)
    params = [p for c in convs for p in _params(c)]
    return _check(lambda: T.concat(pcnn_forward(x, mask, convs), axis=-1), [x, *params])


@register("local_self_attn_pool")
def _(rng):
    grans = [_leaf(rng, 2, 3, 4) for _ in range(3)]
    cls = _leaf(rng, 2, 4)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    pools = [AttnPool(4, 3, rng) for _ in range(2)]
    params = [p for pl in pools for p in _params(pl)]
    return _check(lambda: local_self_attn_pool(grans, mask, cls, pools)[1],
                  [*grans, cls, *params])


@register("dsa_select")
def _(rng):
    dsa = SequentialAttention(4, 3, 3, 2, rng)
    unit = dsa.units[1]
    states = _leaf(rng, 2, 3, 4)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
    h, hab, prior = _leaf(rng, 2, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 4)
    cov = Tensor(rng.uniform(0.3, 0.9, (2, 3)), requires_grad=True)

    def fn():
        phi = coverage_scale(states, mask, unit, 2)
        picked, _, new_cov = dsa_select(states, mask, h, hab, [prior], cov, unit, 1.0, phi)
        return T.concat([picked, new_cov], axis=-1)

    return _check(fn, [states, h, hab, prior, cov, *_params(unit)])


@register("dsa_fuse_step")
def _(rng):
    dsa = SequentialAttention(4, 3, 3, 3, rng)
    cands = [_leaf(rng, 2, 4) for _ in range(3)]
    return _check(lambda: dsa_fuse_step(cands, dsa), [*cands, dsa.w_f, dsa.omega_f])


@register("dsa_read")
def _(rng):
    # three tokens, two steps, one phrase granularity
    grans = [_leaf(rng, 1, 3, 4) for _ in range(2)]
    hab = _leaf(rng, 1, 4)
    mask = np.ones((1, 3), dtype=bool)
    dsa = SequentialAttention(4, 3, 3, 2, rng)

    def fn():
        local = LocalEncoding(grans, mask, [hab], hab)
        hiddens, _ = dsa_read(local, dsa, steps=2, beta=1.0)
        return T.concat(hiddens, axis=-1)

    return _check(fn, [*grans, hab, *_params(dsa)])


@register("heuristic_match")
def _(rng):
    x, y = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
    return _check(lambda: heuristic_match(x, y), [x, y])


@register("mlp")
def _(rng):
    mlp = MLP(4, [5, 5], 3, rng)
    for layer in mlp.layers:
        layer.bias.data[:] = rng.normal(size=layer.bias.shape) * 0.1
    x = _leaf(rng, 2, 4)
    return _check(lambda: mlp(x), [x, *_params(mlp)])


@register("fusion_gate")
def _(rng):
    gate = FusionGate(3, [4], rng)
    ph = T.softmax(_leaf(rng, 2, 3))
    pv = T.softmax(_leaf(rng, 2, 3))
    a, b = Tensor(ph.data, requires_grad=True), Tensor(pv.data, requires_grad=True)
    return _check(lambda: fusion_gate(a, b, gate), [a, b, *_params(gate)])


# -- full models ----------------------------------------------------------

# The per-entry error is |a - n| / max(|a|, |n|, 1e-8) and central differences
# at h = 1e-5 carry about 1e-11 of absolute rounding noise from an O(1) loss, so
# a nonzero gradient below ~1e-7 fails on noise alone. These instances were
# picked so every nonzero gradient clears 3e-7 and no relu layer is dead;
# beta = 10 keeps beta * (score spread) near 1 at these widths.
MODEL_SEEDS = {"drrnet": 96, "ladranet": 57}


def tiny_config(model: str) -> ModelConfig:
    return ModelConfig(model=model, word_dim=3, char_dim=2, char_emb_dim=2, d_g=2, d_a=2,
                       l_s=2, t1=2, t2=2, beta=10.0, pcnn_inner=3, mlp_hidden=6)


def tiny_pair_batch(rng: np.random.Generator, cfg: ModelConfig):
    # one tag per token plus a shared word and an antonym pair, so no
    # syntactic feature column is identically zero (its gradients would sit
    # at the finite-difference noise floor)
    examples = [PairExample(["a", "red", "shirt"], ["red", "top"], "entailment",
                            ["DT", "JJ", "NN"], ["VB", "RB"]),
                PairExample(["dogs", "run"], ["she", "and", "sleeps"], "neutral",
                            ["CD", "IN"], ["PRP", "CC", "PUNCT"])]
    sents = [s for ex in examples for s in (ex.tokens_a, ex.tokens_b)]
    vocab, table = build_vocab(sents, None, rng, cfg.word_dim)
    antonyms = {"run": {"sleeps"}, "sleeps": {"run"}}
    feat = Featurizer(vocab, Featurizer.char_vocab_from(examples), antonyms)
    return make_batch(examples, feat, NLI_LABELS), table, len(feat.char_vocab)


def tiny_model(kind: str):
    """The fixed tiny model and batch used for the end-to-end check."""
    rng = np.random.default_rng(MODEL_SEEDS[kind])
    cfg = tiny_config(kind)
    batch, table, n_chars = tiny_pair_batch(rng, cfg)
    model = build_model(cfg, table, n_chars, int(rng.integers(1 << 31)))
    params = model.parameters()
    # zero-initialised biases put a fully dead relu layer's successors exactly on the kink
    for p in params:
        if not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    return model, batch


def _model_check(kind: str) -> float:
    model, batch = tiny_model(kind)
    return T.grad_check(lambda: cross_entropy(model(batch).probs, batch.labels),
                        model.parameters())


@register("drrnet")
def _(rng):
    return _model_check("drrnet")


@register("ladranet")
def _(rng):
    return _model_check("ladranet")


def run_gradcheck(seed: int = 0, names=None) -> dict[str, dict]:
    """Run the registered checks; returns ``{name: {"error", "seconds"}}``."""
    report = {}
    for name, fn in REGISTRY.items():
        if names is not None and name not in names:
            continue
        start = time.perf_counter()
        err = fn(np.random.default_rng([seed, len(report)]))
        report[name] = {"error": float(err), "seconds": time.perf_counter() - start}
    return report
