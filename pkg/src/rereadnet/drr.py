"""Dynamic re-read: pick one token per step with a sharpened softmax, feed it to a GRU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import StackOutput
from .nn import GRUCell, Linear, Module, weighted_sum
from .tensor import Tensor

DEFAULT_BETA = 100.0
SOFT_SELECTION = 0.9


@dataclass
class TraceStep:
    step: int
    index: int
    weight: float

    @property
    def soft(self) -> bool:
        return self.weight < SOFT_SELECTION


def trace_step(step: int, weights: np.ndarray) -> TraceStep:
    """Argmax report for one attention vector; ties go to the lowest index."""
    idx = int(np.argmax(weights))
    return TraceStep(step, idx, float(weights[idx]))


@dataclass
class DrrState:
    hidden: Tensor
    hiddens: list[Tensor] = field(default_factory=list)
    selected: list[Tensor] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)

    def trace(self, row: int = 0) -> list[TraceStep]:
        return [trace_step(t + 1, w[row]) for t, w in enumerate(self.weights)]


class DrrAttention(Module):
    """Scores ``w_d . tanh(W_d h_i + U_d h_prev + M_d guide)`` (no bias terms)."""

    def __init__(self, d_in: int, d_hidden: int, d_guide: int, d_att: int,
                 rng: np.random.Generator):
        self.w_d = T.glorot((d_att, d_in), rng)
        self.u_d = T.glorot((d_att, d_hidden), rng)
        self.m_d = T.glorot((d_att, d_guide), rng)
        self.omega_d = T.glorot((d_att,), rng, fan_in=d_att, fan_out=1)

    def project_states(self, states: Tensor) -> Tensor:
        return T.linear(states, self.w_d)

    def scores(self, proj_states: Tensor, condition: Tensor) -> Tensor:
        act = T.tanh(proj_states + T.expand_dims(condition, -2))
        return (act @ T.expand_dims(self.omega_d, -1))[..., 0]


class DynamicReread(Module):
    """Attention unit, reader GRU and the map from a sentence vector to its initial state.

    The reader's hidden size differs from the sentence-vector width, so the
    initial state is ``tanh(W_0 h + b_0)`` rather than ``h`` itself.
    """

    def __init__(self, d_in: int, d_hidden: int, d_att: int, rng: np.random.Generator,
                 d_guide: int | None = None, d_global: int | None = None):
        d_guide = d_in if d_guide is None else d_guide
        d_global = d_in if d_global is None else d_global
        self.attn = DrrAttention(d_in, d_hidden, d_guide, d_att, rng)
        self.cell = GRUCell(d_in, d_hidden, rng)
        self.init = Linear(d_global, d_hidden, rng)

    def initial_state(self, h_global: Tensor) -> Tensor:
        return T.tanh(self.init(h_global))


def drr_select(h: StackOutput, h_prev: Tensor, guide: Tensor, params: DrrAttention,
               beta: float = DEFAULT_BETA, proj_states: Tensor | None = None
               ) -> tuple[Tensor, Tensor]:
    """Sharpened-attention pick; returns the selected vector and its weights."""
    if proj_states is None:
        proj_states = params.project_states(h.states)
    cond = T.linear(h_prev, params.u_d) + T.linear(guide, params.m_d)
    weights = T.softmax_sharp(params.scores(proj_states, cond), beta, h.mask)
    return weighted_sum(weights, h.states), weights


def drr_read(h: StackOutput, h_self_global: Tensor, h_other_global: Tensor,
             params: DynamicReread, steps: int = 6, beta: float = DEFAULT_BETA
             ) -> tuple[Tensor, DrrState]:
    """Unroll ``steps`` selections starting from the sentence's own global vector.

    The partner's global vector conditions every selection. Returns the final
    reader state and the per-step record.
    """
    if steps < 1:
        raise ValueError("re-read length must be >= 1")
    proj = params.attn.project_states(h.states)
    hidden = params.initial_state(h_self_global)
    state = DrrState(hidden, [hidden])
    for _ in range(steps):
        picked, weights = drr_select(h, hidden, h_other_global, params.attn, beta, proj)
        hidden = params.cell(picked, hidden)
        state.selected.append(picked)
        state.weights.append(weights.data)
        state.hiddens.append(hidden)
    state.hidden = hidden
    return hidden, state
