"""Splitting a long soft prompt into a short prompt plus low-rank factors.

The trainable budget of a length-``l`` prompt (``l * d`` numbers) is spent on
a short prompt of ``s`` rows and factors ``A (m x r)``, ``B (r x d)``:

    l * d == s * d + (m + d) * r

``A @ B`` is added to the frozen input-token embeddings, so ``m`` is the
maximum input sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BudgetError, DataError, IntegralityError, ShapeError
from .tensor_core import as_matrix, truncated_svd

VOCAB_POOL = 5000


def _valid_exact_s(l, m, d):
    return [s for s in range(l + 1)
            if ((l - s) * d) % (m + d) == 0 and ((l - s) * d) // (m + d) <= min(m, d)]


def solve_rank(l: int, s: int, m: int, d: int, mode: str = "exact") -> int:
    """Rank ``r`` that keeps a length-``l`` prompt budget after shortening to ``s``.

    In ``"floor"`` mode the rank is rounded down and the unspent parameters
    show up as :attr:`PromptBudget.slack`.
    """
    if not 0 <= s <= l:
        raise BudgetError(f"need 0 <= s <= l, got s={s}, l={l}")
    if m <= 0 or d <= 0:
        raise BudgetError(f"m and d must be positive, got m={m}, d={d}")
    num, den = (l - s) * d, m + d
    if mode == "floor":
        return num // den
    if mode != "exact":
        raise BudgetError(f"unknown budget mode {mode!r}")
    if num % den:
        valid = _valid_exact_s(l, m, d)
        below = [v for v in valid if v < s]
        above = [v for v in valid if v > s]
        nearest = ([below[-1]] if below else []) + ([above[0]] if above else [])
        raise IntegralityError(
            f"no integral rank for l={l}, s={s}, m={m}, d={d}: "
            f"(l-s)*d/(m+d) = {num / den:.4f}; nearest valid s: {nearest}",
            nearest_s=nearest)
    return num // den


@dataclass(frozen=True)
class PromptBudget:
    l: int
    s: int
    r: int
    m: int
    d: int
    mode: str = "exact"

    def __post_init__(self):
        l, s, r, m, d = self.l, self.s, self.r, self.m, self.d
        if s < 0 or r < 0 or m <= 0 or d <= 0:
            raise BudgetError(f"negative or empty budget entry in {self.as_tuple()}")
        if not (0 < s <= l or (s == 0 and r > 0)):
            raise BudgetError(f"need 0 < s <= l, or s == 0 with r > 0; got {self.as_tuple()}")
        if r > min(m, d):
            raise BudgetError(f"rank {r} exceeds min(m, d) = {min(m, d)}")
        if self.mode == "exact" and l * d != s * d + (m + d) * r:
            raise BudgetError(
                f"budget mismatch: l*d = {l * d} but s*d + (m+d)*r = {s * d + (m + d) * r}")
        if self.mode == "floor" and self.slack < 0:
            raise BudgetError(f"budget overspent by {-self.slack} parameters")

    @classmethod
    def from_lengths(cls, l: int, s: int, m: int, d: int, mode: str = "exact") -> "PromptBudget":
        return cls(l, s, solve_rank(l, s, m, d, mode), m, d, mode)

    def as_tuple(self):
        return (self.l, self.s, self.r, self.m, self.d)

    @property
    def trainable(self) -> int:
        return self.s * self.d + self.m * self.r + self.r * self.d

    @property
    def vanilla(self) -> int:
        return self.l * self.d

    @property
    def slack(self) -> int:
        return self.vanilla - self.trainable


@dataclass
class DecomposedPrompt:
    p_short: np.ndarray  # (s, d)
    a: np.ndarray  # (m, r)
    b: np.ndarray  # (r, d)

    @property
    def parameter_count(self) -> int:
        return self.p_short.size + self.a.size + self.b.size


def init_source_prompt(vocab_embeddings, l: int, seed: int) -> np.ndarray:
    """Draw ``l`` distinct rows from the first 5000 vocabulary embeddings.

    Uses a seeded partial Fisher-Yates shuffle, so the draw for a given seed
    is stable across numpy versions.
    """
    vocab = as_matrix(vocab_embeddings, "vocab_embeddings")
    pool = min(vocab.shape[0], VOCAB_POOL)
    if pool < l:
        raise DataError(f"vocabulary too small: {pool} candidate rows for l={l}")
    rng = np.random.default_rng(seed)
    order = np.arange(pool)
    for i in range(l):
        j = int(rng.integers(i, pool))
        order[i], order[j] = order[j], order[i]
    return vocab[order[:l]].copy()


def align_rows(p, m: int) -> np.ndarray:
    """Resize ``p`` to ``m`` rows: cyclic repetition when short, prefix when long."""
    p = as_matrix(p)
    return p[np.arange(m) % p.shape[0]].copy()


def decompose(p, budget: PromptBudget) -> DecomposedPrompt:
    p = as_matrix(p, "p")
    if p.shape != (budget.l, budget.d):
        raise ShapeError(f"prompt shape {p.shape} does not match budget (l, d) = "
                         f"{(budget.l, budget.d)}")
    p_short = p[:budget.s].copy()
    if budget.r == 0:
        return DecomposedPrompt(p_short, np.zeros((budget.m, 0)), np.zeros((0, budget.d)))
    a, b = truncated_svd(align_rows(p, budget.m), budget.r)
    return DecomposedPrompt(p_short, a, b)


@ad.differentiable
def update_input_embedding(e, a, b):
    """``E + A @ B``; ``e`` may carry leading batch axes and is never differentiated."""
    e_shape = np.shape(e.value if isinstance(e, ad.Var) else e)
    if a.shape[0] != e_shape[-2] or b.shape[1] != e_shape[-1] or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot add {a.shape} x {b.shape} to embedding {e_shape}")
    if a.shape[1] == 0:
        return ad.lift(e)
    return ad.add(e, ad.matmul(a, b))
