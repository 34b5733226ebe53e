"""Expert subspace projections of the short prompt and their softmax gate.

Each expert is a two-layer map ``d -> m -> d`` with a ReLU in between; the
gate scores every expert per prompt token and the amended prompt is the
gate-weighted sum of expert outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError


@dataclass
class ExpertStack:
    w_down: np.ndarray  # (n, d, m)
    b_down: np.ndarray  # (n, 1, m)
    w_up: np.ndarray  # (n, m, d)
    b_up: np.ndarray  # (n, 1, d)

    @property
    def n_experts(self) -> int:
        return self.w_down.shape[0]

    @classmethod
    def init(cls, n_experts: int, d: int, m: int, rng: np.random.Generator) -> "ExpertStack":
        if n_experts < 1:
            raise ContractError(f"need at least one expert, got {n_experts}")
        lim_d, lim_m = 1.0 / np.sqrt(d), 1.0 / np.sqrt(m)
        return cls(
            w_down=rng.uniform(-lim_d, lim_d, size=(n_experts, d, m)),
            b_down=np.zeros((n_experts, 1, m)),
            w_up=rng.uniform(-lim_m, lim_m, size=(n_experts, m, d)),
            b_up=np.zeros((n_experts, 1, d)),
        )


@dataclass
class GateNet:
    weight: np.ndarray  # (d, n): column i scores expert i
    bias: np.ndarray  # (1, n)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, n_experts: int, d: int, rng: np.random.Generator) -> "GateNet":
        lim = 1.0 / np.sqrt(d)
        return cls(rng.uniform(-lim, lim, size=(d, n_experts)), np.zeros((1, n_experts)))


@ad.differentiable
def expert_forward(p_short, stack: ExpertStack, i: int):
    """Output of expert ``i`` (0-based), shape ``(s, d)``."""
    if not 0 <= i < stack.n_experts:
        raise IndexError(f"expert index {i} out of range for {stack.n_experts} experts")
    hidden = ad.relu(ad.add(ad.matmul(p_short, stack.w_down[i]), stack.b_down[i]))
    return ad.add(ad.matmul(hidden, stack.w_up[i]), stack.b_up[i])


@ad.differentiable
def expert_outputs(p_short, stack: ExpertStack):
    """All experts at once, shape ``(n, s, d)``."""
    hidden = ad.relu(ad.add(ad.matmul(p_short, stack.w_down), stack.b_down))
    return ad.add(ad.matmul(hidden, stack.w_up), stack.b_up)


@ad.differentiable
def gate_weights(p_short, gate: GateNet):
    """Per-token softmax over experts, shape ``(s, n)``."""
    return ad.softmax(ad.add(ad.matmul(p_short, gate.weight), gate.bias), axis=1)


@ad.differentiable
def amend(p_short, stack: ExpertStack, gate: GateNet):
    if stack.n_experts != gate.n_experts:
        raise ContractError(f"{stack.n_experts} experts but {gate.n_experts} gate heads")
    outs = expert_outputs(p_short, stack)
    g = gate_weights(p_short, gate)
    n, s = g.shape[1], g.shape[0]
    g = ad.reshape(ad.transpose(g), (n, s, 1))
    return ad.sum_(ad.mul(g, outs), axis=0)
