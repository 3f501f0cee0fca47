"""Gated aggregation of expert outputs and inference."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import ExpertNetwork, GatingMaps, GatingNetwork, MultiResLogits, as_input
from .tensor import Tensor


@dataclass
class AggregatedLogits:
    levels: list[Tensor]

    def __len__(self):
        return len(self.levels)


def mix(logits: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``out[c, v] = sum_i logits[i][c, v] * weights[i, v]``.

    One weight per voxel and expert, shared by every class channel.
    """
    n = len(logits)
    if weights.shape[0] != n:
        raise ContractError(f"gating map has {weights.shape[0]} experts, got {n} expert outputs")
    shape = logits[0].shape
    for i, e in enumerate(logits):
        if e.shape != shape:
            raise DimensionError(f"expert {i} output shape {e.shape} != {shape}")
    if weights.shape[1:] != shape[1:]:
        raise DimensionError(f"gating map spatial dims {weights.shape[1:]} != logits {shape[1:]}")
    e = np.stack([t.data for t in logits])           # [N, C, ...]
    g = weights.data[:, None]                         # [N, 1, ...]
    out = (e * g).sum(axis=0)

    def back(grad):
        ge = g * grad[None]
        gg = (e * grad[None]).sum(axis=1)
        return (*ge, gg)

    return T.make_op(out, (*logits, weights), back)


def aggregate(experts_out: Sequence[MultiResLogits], gates: GatingMaps) -> AggregatedLogits:
    n_levels = len(gates)
    for i, e in enumerate(experts_out):
        if len(e) != n_levels:
            raise ContractError(f"expert {i} has {len(e)} levels, gating has {n_levels}")
    return AggregatedLogits([
        mix([e.levels[l] for e in experts_out], gates.levels[l]) for l in range(n_levels)])


class MoME:
    """Experts (ordered by modality code) plus a gating network."""

    def __init__(self, experts: Sequence[ExpertNetwork], gate: GatingNetwork):
        if len(experts) != gate.num_experts:
            raise ContractError(f"gate expects {gate.num_experts} experts, got {len(experts)}")
        self.experts = list(experts)
        self.gate = gate

    def parameters(self) -> list[Tensor]:
        params = [p for e in self.experts for p in e.parameters()]
        return params + self.gate.parameters()

    def num_parameters(self) -> int:
        return sum(e.num_parameters() for e in self.experts) + self.gate.num_parameters()

    def forward(self, x) -> tuple[list[MultiResLogits], GatingMaps, AggregatedLogits]:
        x = as_input(x)
        outs = [e(x) for e in self.experts]
        gates = self.gate(x, [o.shallow for o in outs])
        return outs, gates, aggregate(outs, gates)

    __call__ = forward


def segment(level1_logits: Tensor) -> np.ndarray:
    """Argmax over classes of the softmax; ties go to the lower class index."""
    prob = T.softmax(level1_logits, axis=0).data
    return np.argmax(prob, axis=0).astype(np.uint8)


def infer(experts: Sequence[ExpertNetwork], gate: GatingNetwork, x) -> np.ndarray:
    """Label mask from the full-resolution aggregated output only."""
    with T.no_grad():
        _, _, agg = MoME(experts, gate).forward(x)
    return segment(agg.levels[0])
