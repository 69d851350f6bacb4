"""Encoder-layer fusion, phrase CNN, local pooling and dynamic sequential attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .drr import DEFAULT_BETA, TraceStep, trace_step
from .nn import AttnPool, GRUCell, Linear, Module, weighted_sum
from .tensor import Tensor


@dataclass
class MultiLayerEncoding:
    layers: Tensor  # [B, L, len, d_enc]
    cls: Tensor  # [B, d_enc]
    mask: np.ndarray  # [B, len]

    @property
    def n_layers(self) -> int:
        return self.layers.shape[1]


@dataclass
class LocalEncoding:
    granularities: list[Tensor]  # r = 0..l_r, each [B, len, d_enc]
    mask: np.ndarray
    pooled: list[Tensor]  # [cls-derived h^0, h^1, ..., h^{l_r}]
    h_ab: Tensor


class LayerFusion(Module):
    def __init__(self, n_layers: int):
        self.logits = T.zeros_param((n_layers,))


def weighted_layer_sum(enc: MultiLayerEncoding, fusion: LayerFusion) -> Tensor:
    """Convex combination of encoder layers with softmax-normalised trainable weights."""
    n = enc.n_layers
    if fusion.logits.shape != (n,):
        raise ValueError(f"{fusion.logits.shape[0]} layer weights for {n} layers")
    alpha = T.softmax(fusion.logits)
    return (enc.layers * alpha.reshape(1, n, 1, 1)).sum(axis=1)


class PhraseConv(Module):
    """Two stacked length-preserving convolutions of one kernel size."""

    def __init__(self, width: int, d_enc: int, d_inner: int, rng: np.random.Generator):
        if width < 1:
            raise ValueError("kernel width must be positive")
        self.width = width
        self.k1 = T.glorot((width, d_enc, d_inner), rng, fan_in=width * d_enc,
                           fan_out=width * d_inner)
        self.b1 = T.zeros_param((d_inner,))
        self.k2 = T.glorot((width, d_inner, d_enc), rng, fan_in=width * d_inner,
                           fan_out=width * d_enc)
        self.b2 = T.zeros_param((d_enc,))

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        # pad rows are re-zeroed so every layer sees the same zero boundary
        keep = np.asarray(mask, dtype=np.float64)[..., None]
        hidden = T.relu(T.conv1d_same(x * keep, self.k1, self.b1)) * keep
        return T.conv1d_same(hidden, self.k2, self.b2) * keep


def pcnn_forward(h0: Tensor, mask: np.ndarray, kernels: list[PhraseConv]) -> list[Tensor]:
    """One ``[B, len, d_enc]`` token tensor per kernel."""
    return [conv(h0, mask) for conv in kernels]


def local_self_attn_pool(granularities: list[Tensor], mask: np.ndarray, cls: Tensor,
                         pools: list[AttnPool]) -> tuple[list[Tensor], Tensor]:
    """Attention-pool each phrase granularity; average them with the cls vector.

    ``granularities[0]`` is the fused encoder output and is represented by
    ``cls``; ``pools[r - 1]`` serves ``granularities[r]``.
    """
    if len(pools) != len(granularities) - 1:
        raise ValueError("need one pooling unit per phrase granularity")
    pooled = [cls] + [pool(g, mask) for pool, g in zip(pools, granularities[1:])]
    h_ab = pooled[0] if len(pooled) == 1 else T.stack(pooled, axis=0).mean(axis=0)
    return pooled, h_ab


class SelectUnit(Module):
    """Additive choosing function for one granularity, plus its coverage scale."""

    def __init__(self, d_enc: int, d_hidden: int, d_att: int, rng: np.random.Generator):
        self.w_rd = T.glorot((d_att, d_enc), rng)
        self.u_rd = T.glorot((d_att, d_hidden), rng)
        self.m_rd = T.glorot((d_att, d_enc), rng)
        self.v_rd = T.glorot((d_att, d_enc), rng)
        self.omega_rd = T.glorot((d_att,), rng, fan_in=d_att, fan_out=1)
        self.w_phi = T.glorot((d_enc,), rng, fan_in=d_enc, fan_out=1)


class SequentialAttention(Module):
    """Per-granularity choosing units, the fusion scorer, and the reader GRU."""

    def __init__(self, d_enc: int, d_hidden: int, d_att: int, n_granularities: int,
                 rng: np.random.Generator):
        self.units = [SelectUnit(d_enc, d_hidden, d_att, rng) for _ in range(n_granularities)]
        self.w_f = T.glorot((d_att, d_enc), rng)
        self.omega_f = T.glorot((d_att,), rng, fan_in=d_att, fan_out=1)
        self.cell = GRUCell(d_enc, d_hidden, rng)
        self.init = Linear(d_enc, d_hidden, rng)

    def initial_state(self, h_ab: Tensor) -> Tensor:
        return T.tanh(self.init(h_ab))


def coverage_scale(states: Tensor, mask: np.ndarray, unit: SelectUnit, steps: int) -> Tensor:
    """phi = steps * sigmoid(w_phi . mean of unmasked token states), one scalar per row."""
    m = np.asarray(mask, dtype=np.float64)
    mean_state = (states * m[..., None]).sum(axis=-2) * (1.0 / m.sum(axis=-1, keepdims=True))
    return T.sigmoid(mean_state @ T.expand_dims(unit.w_phi, -1)) * float(steps)


def dsa_select(states: Tensor, mask: np.ndarray, h_prev: Tensor, h_ab: Tensor,
               priors: list[Tensor], coverage: Tensor | None, unit: SelectUnit,
               beta: float = DEFAULT_BETA, phi: Tensor | None = None,
               proj_states: Tensor | None = None
               ) -> tuple[Tensor, Tensor, Tensor | None]:
    """Pick from one granularity; returns (selection, weights, updated coverage).

    Scores are multiplied by the coverage vector before the sharpened softmax.
    The coverage then loses ``weights / phi`` and is clamped to [0, 1]. With
    ``coverage=None`` the scores are used as-is and no coverage is returned.
    """
    if coverage is not None:
        c = coverage.data
        if (c < 0).any() or (c > 1).any():
            raise ValueError("coverage entries must lie in [0, 1]")
    if proj_states is None:
        proj_states = T.linear(states, unit.w_rd)
    cond = T.linear(h_prev, unit.u_rd) + T.linear(h_ab, unit.m_rd)
    if priors:
        total = priors[0]
        for p in priors[1:]:
            total = total + p
        cond = cond + T.linear(total, unit.v_rd)
    act = T.tanh(proj_states + T.expand_dims(cond, -2))
    scores = (act @ T.expand_dims(unit.omega_rd, -1))[..., 0]
    if coverage is not None:
        scores = scores * coverage
    weights = T.softmax_sharp(scores, beta, mask)
    picked = weighted_sum(weights, states)
    if coverage is None:
        return picked, weights, None
    if phi is None:
        raise ValueError("coverage update needs phi")
    new_cov = T.clip(coverage - weights / phi, 0.0, 1.0)
    return picked, weights, new_cov


def dsa_fuse_step(candidates: list[Tensor], params: SequentialAttention) -> Tensor:
    """softmax_r(w_f . tanh(W_f a^r)) weighted sum of the per-granularity picks."""
    if len(candidates) == 1:
        return candidates[0]
    cands = T.stack(candidates, axis=-2)
    scores = (T.tanh(T.linear(cands, params.w_f)) @ T.expand_dims(params.omega_f, -1))[..., 0]
    return weighted_sum(T.softmax(scores), cands)


@dataclass
class DsaState:
    hiddens: list[Tensor] = field(default_factory=list)
    fused: list[Tensor] = field(default_factory=list)
    picks: list[list[Tensor]] = field(default_factory=list)
    weights: list[list[np.ndarray]] = field(default_factory=list)
    coverage: list[list[np.ndarray]] = field(default_factory=list)

    def trace(self, row: int = 0) -> list[list[TraceStep]]:
        """Per step, one argmax report per granularity."""
        return [[trace_step(t + 1, w[row]) for w in step] for t, step in enumerate(self.weights)]


def dsa_read(local: LocalEncoding, params: SequentialAttention, steps: int = 5,
             beta: float = DEFAULT_BETA, use_coverage: bool = True
             ) -> tuple[list[Tensor], DsaState]:
    """Unroll ``steps`` reading steps over all granularities.

    Returns ``[h_0, h_1, ..., h_T]`` where ``h_0`` is the reader's initial
    state derived from ``h_ab``; coverage persists across steps.
    """
    if steps < 1:
        raise ValueError("reading length must be >= 1")
    grans = local.granularities
    if len(grans) != len(params.units):
        raise ValueError(f"{len(grans)} granularities for {len(params.units)} choosing units")
    b, n = local.mask.shape
    projs = [T.linear(g, u.w_rd) for g, u in zip(grans, params.units)]
    phis = [coverage_scale(g, local.mask, u, steps) if use_coverage else None
            for g, u in zip(grans, params.units)]
    covs = [Tensor(np.ones((b, n))) if use_coverage else None for _ in grans]
    hidden = params.initial_state(local.h_ab)
    state = DsaState(hiddens=[hidden])
    for _ in range(steps):
        picks: list[Tensor] = []
        step_weights = []
        for r, (g, unit) in enumerate(zip(grans, params.units)):
            picked, w, covs[r] = dsa_select(g, local.mask, hidden, local.h_ab, picks, covs[r],
                                            unit, beta, phis[r], projs[r])
            picks.append(picked)
            step_weights.append(w.data)
        fused = dsa_fuse_step(picks, params)
        hidden = params.cell(fused, hidden)
        state.picks.append(picks)
        state.weights.append(step_weights)
        state.fused.append(fused)
        state.hiddens.append(hidden)
        if use_coverage:
            state.coverage.append([c.data.copy() for c in covs])
    return state.hiddens, state
