"""Attention between the short prompt and the low-rank product ``A @ B``.

Two readings of the fused prompt are supported:

``cross_attention`` (default)
    softmax over the ``m`` low-rank rows, ``P_f = P_s + W @ (A @ B)``.
``literal_einsum``
    the ``'bpl,bpd->bpd'`` contraction of ``W`` with ``P_s`` taken at face
    value: each prompt row is scaled by its summed weights,
    ``P_f[p] = P_s[p] * (1 + sum_j W[p, j])``. The softmax runs over the
    ``s`` prompt rows here, otherwise the gate would be identically 1.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError


class FusionVariant(str, enum.Enum):
    CROSS_ATTENTION = "cross_attention"
    LITERAL_EINSUM = "literal_einsum"


def _softmax_axis(variant: FusionVariant) -> int:
    return 1 if FusionVariant(variant) is FusionVariant.CROSS_ATTENTION else 0


def _check_shapes(p_short, a, b):
    if a.shape[1] != b.shape[0] or p_short.shape[1] != b.shape[1]:
        raise ShapeError(f"incompatible fusion shapes: P_s {p_short.shape}, "
                         f"A {a.shape}, B {b.shape}")


@ad.differentiable
def attention_weights(p_short, a, b, variant=FusionVariant.CROSS_ATTENTION):
    """``softmax(P_s (A B)^T / sqrt(d))``, shape ``(s, m)``."""
    _check_shapes(p_short, a, b)
    d = p_short.shape[1]
    low_rank = ad.matmul(a, b)
    logits = ad.matmul(p_short, ad.transpose(low_rank)) * (1.0 / math.sqrt(d))
    return ad.softmax(logits, axis=_softmax_axis(variant))


@ad.differentiable
def fuse(p_short, w, a, b, variant=FusionVariant.CROSS_ATTENTION):
    _check_shapes(p_short, a, b)
    variant = FusionVariant(variant)
    wv = w.value if isinstance(w, ad.Var) else np.asarray(w)
    if wv.shape != (p_short.shape[0], a.shape[0]):
        raise ShapeError(f"weights {wv.shape} do not match (s, m) = "
                         f"{(p_short.shape[0], a.shape[0])}")
    # non-finite weights come from a diverging run; the trainer reports that
    if wv.size and np.isfinite(wv).all() and not np.allclose(wv.sum(axis=_softmax_axis(variant)), 1.0, atol=1e-9):
        raise ContractError(f"attention weights were not normalised for variant {variant.value}")
    if variant is FusionVariant.CROSS_ATTENTION:
        return ad.add(p_short, ad.matmul(w, ad.matmul(a, b)))
    gate = ad.sum_(w, axis=1, keepdims=True)
    return ad.add(p_short, ad.mul(gate, p_short))
