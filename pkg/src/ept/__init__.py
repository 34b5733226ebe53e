"""Efficient prompt tuning: a short soft prompt plus a low-rank update of the
input embeddings, fused by attention and refined by a gated expert projection."""

from .decomposition import DecomposedPrompt, PromptBudget, decompose, solve_rank
from .errors import (BudgetError, CompatibilityError, ConfigError, ContractError, DataError,
                     DivergenceError, EptError, IntegralityError, RankError, ShapeError)
from .fusion import FusionVariant, attention_weights, fuse
from .pipeline import EptParams, bake, baked_forward, build_params, forward, new_prompt
from .projection import ExpertStack, GateNet, amend, gate_weights

__all__ = [
    "BudgetError", "CompatibilityError", "ConfigError", "ContractError", "DataError",
    "DecomposedPrompt", "DivergenceError", "EptError", "EptParams", "ExpertStack",
    "FusionVariant", "GateNet", "IntegralityError", "PromptBudget", "RankError", "ShapeError",
    "amend", "attention_weights", "bake", "baked_forward", "build_params", "decompose",
    "forward", "fuse", "gate_weights", "new_prompt", "solve_rank",
]
