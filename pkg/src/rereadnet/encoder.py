"""Stacked GRU with input concatenation and self-attention pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import AttnPool, GRUCell, Module
from .tensor import Tensor


@dataclass
class StackOutput:
    states: Tensor  # [B, len, d_in + n_layers * d_hidden]
    mask: np.ndarray  # [B, len]


class StackGRU(Module):
    """Layer ``l`` reads ``[h^{l-1}; x^{l-1}]``; the output is ``[h^L; x^L]``.

    Each layer therefore widens its input by ``d_hidden``, and the final
    states keep every lower layer and the original embedding.
    """

    def __init__(self, d_in: int, d_hidden: int, n_layers: int, rng: np.random.Generator):
        if n_layers < 1:
            raise ValueError("need at least one GRU layer")
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.cells = [GRUCell(d_in + i * d_hidden, d_hidden, rng) for i in range(n_layers)]

    @property
    def d_out(self) -> int:
        return self.d_in + len(self.cells) * self.d_hidden

    def __call__(self, x: Tensor, mask: np.ndarray) -> StackOutput:
        return stack_gru_forward(x, mask, self)


def run_gru(cell: GRUCell, x: Tensor, mask: np.ndarray, h0: Tensor | None = None) -> Tensor:
    """Unroll ``cell`` over ``[B, len, d]``; masked steps carry the state unchanged."""
    b, n = x.shape[0], x.shape[1]
    h = h0 if h0 is not None else Tensor(np.zeros((b, cell.d_hidden)))
    m = np.asarray(mask, dtype=np.float64)
    outs = []
    for t in range(n):
        h_new = cell.step(cell.project_input(x[:, t, :]), h)
        mt = m[:, t:t + 1]
        if mt.all():
            h = h_new
        else:
            h = h_new * mt + h * (1.0 - mt)
        outs.append(h)
    return T.stack(outs, axis=1)


def stack_gru_forward(x: Tensor, mask: np.ndarray, params: StackGRU) -> StackOutput:
    inp = x
    for cell in params.cells:
        h = run_gru(cell, inp, mask)
        inp = T.concat([h, inp], axis=-1)
    return StackOutput(inp, np.asarray(mask, dtype=bool))


def self_attn_pool(h: StackOutput, params: AttnPool) -> Tensor:
    """Softmax-weighted sum of the unmasked states."""
    return params(h.states, h.mask)
