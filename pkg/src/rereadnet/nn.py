"""Parameter containers and the small layers shared by both models."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter container.

    Parameters are the ``Tensor`` attributes of a module and its sub-modules
    (including lists of sub-modules), named by dotted attribute path in
    definition order. That order is the checkpoint manifest order.
    """

    def named_tensors(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_tensors(path + "."))
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    out.update(sub.named_tensors(f"{path}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.named_tensors().items())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_tensors()
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, t in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data[...] = arr

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = T.glorot((d_out, d_in), rng)
        self.bias = T.zeros_param((d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class GRUCell(Module):
    """GRU with fused gate weights ordered [update, reset, candidate]."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_hidden = d_hidden
        a_x = T.glorot_bound(d_in, d_hidden)
        a_h = T.glorot_bound(d_hidden, d_hidden)
        self.w_x = T.Tensor(np.concatenate(
            [rng.uniform(-a_x, a_x, (d_hidden, d_in)) for _ in range(3)]), requires_grad=True)
        self.w_h_gates = T.Tensor(np.concatenate(
            [rng.uniform(-a_h, a_h, (d_hidden, d_hidden)) for _ in range(2)]), requires_grad=True)
        self.w_h_cand = T.build_tensor((d_hidden, d_hidden), "uniform", lo=-a_h, hi=a_h,
                                       rng=rng, requires_grad=True)
        self.b = T.zeros_param((3 * d_hidden,))

    def project_input(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w_x, self.b)

    def step(self, x_proj: Tensor, h: Tensor) -> Tensor:
        """One step given a precomputed input projection ``W_x x + b``."""
        d = self.d_hidden
        hh = T.linear(h, self.w_h_gates)
        gates = T.sigmoid(x_proj[..., : 2 * d] + hh)
        z = gates[..., :d]
        r = gates[..., d:]
        cand = T.tanh(x_proj[..., 2 * d:] + T.linear(r * h, self.w_h_cand))
        return h + z * (cand - h)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in or h.shape[-1] != self.d_hidden:
            raise ValueError(
                f"gru_cell expects input {self.d_in} / hidden {self.d_hidden}, "
                f"got {x.shape} / {h.shape}")
        return self.step(self.project_input(x), h)


def gru_cell(x: Tensor, h_prev: Tensor, params: GRUCell) -> Tensor:
    """z = sig(.), r = sig(.), cand = tanh(.), h' = (1 - z) * h + z * cand."""
    return params(x, h_prev)


class AttnPool(Module):
    """Additive self-attention pooling: softmax(w . tanh(W h_i + b)) weighted sum."""

    def __init__(self, d_in: int, d_att: int, rng: np.random.Generator):
        self.w = T.glorot((d_att, d_in), rng)
        self.b = T.zeros_param((d_att,))
        self.omega = T.glorot((d_att,), rng, fan_in=d_att, fan_out=1)

    def weights(self, states: Tensor, mask) -> Tensor:
        scores = T.tanh(T.linear(states, self.w, self.b)) @ T.expand_dims(self.omega, -1)
        return T.softmax(scores[..., 0], mask=mask)

    def __call__(self, states: Tensor, mask) -> Tensor:
        return weighted_sum(self.weights(states, mask), states)


def weighted_sum(weights: Tensor, states: Tensor) -> Tensor:
    """sum_i weights[..., i] * states[..., i, :]."""
    return (T.expand_dims(weights, -1) * states).sum(axis=-2)


class MLP(Module):
    """ReLU hidden layers followed by a softmax output layer."""

    def __init__(self, d_in: int, hidden: list[int], n_out: int, rng: np.random.Generator):
        dims = [d_in, *hidden, n_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def logits(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = T.relu(layer(x))
        return self.layers[-1](x)

    def __call__(self, x: Tensor) -> Tensor:
        return T.softmax(self.logits(x))


def mlp_forward(x: Tensor, params: MLP) -> Tensor:
    return params(x)
