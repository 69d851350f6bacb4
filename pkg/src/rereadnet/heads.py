"""Heuristic matching and the gated fusion of two class distributions."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .tensor import Tensor

NLI_LABELS = ("entailment", "contradiction", "neutral")
PI_LABELS = ("no", "yes")


def labels_for(task: str) -> tuple[str, ...]:
    if task == "nli":
        return NLI_LABELS
    if task == "pi":
        return PI_LABELS
    raise ValueError(f"unknown task {task!r}")


def heuristic_match(x: Tensor, y: Tensor) -> Tensor:
    """``[x; y; y * x; y - x]`` along the last axis."""
    if x.shape != y.shape:
        raise ValueError(f"cannot match shapes {x.shape} and {y.shape}")
    return T.concat([x, y, y * x, y - x], axis=-1)


class FusionGate(Module):
    """Scalar sigmoid gates on each distribution, then an MLP over their gated sum."""

    def __init__(self, n_classes: int, hidden: list[int], rng: np.random.Generator):
        self.w_h = T.glorot((n_classes,), rng, fan_in=n_classes, fan_out=1)
        self.b_h = T.zeros_param((1,))
        self.w_v = T.glorot((n_classes,), rng, fan_in=n_classes, fan_out=1)
        self.b_v = T.zeros_param((1,))
        self.mlp = MLP(n_classes, hidden, n_classes, rng)

    def gates(self, p_h: Tensor, p_v: Tensor) -> tuple[Tensor, Tensor]:
        a_h = T.sigmoid(p_h @ T.expand_dims(self.w_h, -1) + self.b_h)
        a_v = T.sigmoid(p_v @ T.expand_dims(self.w_v, -1) + self.b_v)
        return a_h, a_v

    def mixed(self, p_h: Tensor, p_v: Tensor) -> Tensor:
        a_h, a_v = self.gates(p_h, p_v)
        return a_h * p_h + a_v * p_v


def fusion_gate(p_h: Tensor, p_v: Tensor, params: FusionGate) -> Tensor:
    if p_h.shape != p_v.shape:
        raise ValueError(f"class distributions differ in shape: {p_h.shape} vs {p_v.shape}")
    return params.mlp(params.mixed(p_h, p_v))
