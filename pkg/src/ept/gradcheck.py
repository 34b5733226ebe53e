"""Random small EPT instances for end-to-end gradient checks.

The objective is the classification loss of ``[P_new; E + A @ B]`` through a
randomly initialised (unpretrained) encoder whose width matches the case.
At width 2 the encoder skips its final layer norm: normalising two numbers
leaves only their sign, and the resulting gradients (of order the norm's
epsilon) sit below what central differences can resolve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decomposition import PromptBudget
from .fusion import FusionVariant
from .pipeline import EptParams, build_params, forward
from .toy_plm import EncoderConfig, FrozenEncoder, classify, init_weights


@dataclass
class GradCase:
    params: EptParams
    encoder: FrozenEncoder
    e_batch: np.ndarray
    labels: np.ndarray

    def shape_tuple(self):
        p = self.params
        return {"s": p.s, "m": p.m, "d": p.d, "r": p.r, "n_experts": p.experts.n_experts}


def make_case(s, m, d, r, n_experts, variant=FusionVariant.CROSS_ATTENTION, seed=0,
              batch=2, use_fusion=True, use_projection=True, n_layers=1) -> GradCase:
    rng = np.random.default_rng(seed)
    l = s + math.ceil((m + d) * r / d)
    budget = PromptBudget(l, s, r, m, d, mode="floor")
    params = build_params(rng.normal(size=(l, d)), budget, n_experts, seed, variant,
                          use_fusion, use_projection)
    # exercise non-zero biases too
    params.experts.b_down = rng.normal(0, 0.1, size=params.experts.b_down.shape)
    params.experts.b_up = rng.normal(0, 0.1, size=params.experts.b_up.shape)
    params.gate.bias = rng.normal(0, 0.1, size=params.gate.bias.shape)
    cfg = EncoderConfig(d_model=d, n_layers=n_layers, n_heads=2 if d % 2 == 0 else 1,
                        ffn_width=2 * d, vocab_size=max(8, m), max_seq=m, n_classes=3,
                        seed=seed + 1, final_norm=d > 2)
    enc = FrozenEncoder(cfg, init_weights(cfg))
    e_batch = rng.normal(size=(batch, m, d))
    labels = rng.integers(0, 3, size=batch)
    return GradCase(params, enc, e_batch, labels)


def random_case(rng: np.random.Generator, variant=FusionVariant.CROSS_ATTENTION) -> GradCase:
    """Shapes s, m, d, r, n_experts drawn from [2, 8] (r capped at min(m, d))."""
    s, m, d, n = (int(x) for x in rng.integers(2, 9, size=4))
    r = int(rng.integers(2, min(m, d) + 1))
    return make_case(s, m, d, r, n, variant, seed=int(rng.integers(0, 2**31)))


def ept_objective(case: GradCase):
    """``(f, params)`` suitable for :func:`ept.autodiff.grad_check`."""

    def f(values):
        x = forward(case.params, case.e_batch, values=values)
        return classify(case.encoder, x, case.labels)[1]

    return f, case.params.registry()
