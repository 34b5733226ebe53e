"""Full prompt construction: decomposition, fusion, projection and reconstruction.

``forward`` produces the encoder input ``[P_new; E + A @ B]`` for a batch of
frozen input embeddings. ``bake`` evaluates ``P_new`` once so that the fusion
and projection networks can be dropped after training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .decomposition import DecomposedPrompt, PromptBudget, decompose, update_input_embedding
from .errors import ShapeError
from .fusion import FusionVariant, attention_weights, fuse
from .projection import ExpertStack, GateNet, amend

LOWRANK_PARAMS = ("a", "b")


@dataclass
class EptParams:
    decomposed: DecomposedPrompt
    experts: ExpertStack
    gate: GateNet
    variant: FusionVariant = FusionVariant.CROSS_ATTENTION
    use_fusion: bool = True
    use_projection: bool = True
    budget: PromptBudget | None = None

    @property
    def s(self) -> int:
        return self.decomposed.p_short.shape[0]

    @property
    def r(self) -> int:
        return self.decomposed.a.shape[1]

    @property
    def m(self) -> int:
        return self.decomposed.a.shape[0]

    @property
    def d(self) -> int:
        return self.decomposed.b.shape[1]

    @property
    def mode(self) -> str:
        return {(False, False): "decomposition", (True, False): "fusion",
                (False, True): "projection", (True, True): "full"}[
            (self.use_fusion, self.use_projection)]

    def registry(self) -> dict[str, np.ndarray]:
        """Trainable arrays for the current mode, keyed by parameter name."""
        out = {}
        if self.s > 0:
            out["p_short"] = self.decomposed.p_short
        if self.r > 0:
            out["a"] = self.decomposed.a
            out["b"] = self.decomposed.b
        if self.use_projection and self.s > 0:
            out["experts.w_down"] = self.experts.w_down
            out["experts.b_down"] = self.experts.b_down
            out["experts.w_up"] = self.experts.w_up
            out["experts.b_up"] = self.experts.b_up
            out["gate.weight"] = self.gate.weight
            out["gate.bias"] = self.gate.bias
        return out

    def assign(self, values: dict[str, np.ndarray]) -> None:
        """Write updated arrays back; only names from :meth:`registry` are accepted."""
        for name, v in values.items():
            owner, attr = self._slot(name)
            setattr(owner, attr, np.asarray(v, dtype=np.float64))

    def _slot(self, name):
        if name in ("p_short", "a", "b"):
            return self.decomposed, name
        prefix, attr = name.split(".", 1)
        return {"experts": self.experts, "gate": self.gate}[prefix], attr

    def parameter_counts(self) -> dict[str, int]:
        counts = {"prompt": 0, "lowrank": 0, "projection": 0}
        for name, v in self.registry().items():
            group = "lowrank" if name in LOWRANK_PARAMS else (
                "prompt" if name == "p_short" else "projection")
            counts[group] += v.size
        return counts


def build_params(source_prompt, budget: PromptBudget, n_experts: int = 4, seed: int = 0,
                 variant=FusionVariant.CROSS_ATTENTION, use_fusion: bool = True,
                 use_projection: bool = True) -> EptParams:
    """Decompose ``source_prompt`` and attach freshly seeded experts and gate."""
    rng = np.random.default_rng(seed)
    experts = ExpertStack.init(n_experts, budget.d, budget.m, rng)
    gate = GateNet.init(n_experts, budget.d, rng)
    return EptParams(decompose(source_prompt, budget), experts, gate, FusionVariant(variant),
                     use_fusion, use_projection, budget)


@ad.differentiable
def reconstruct(p_amend, p_f):
    if p_amend.shape != p_f.shape:
        raise ShapeError(f"cannot add P_amend {p_amend.shape} and P_f {p_f.shape}")
    return ad.add(p_amend, p_f)


def _views(params: EptParams, values):
    """Parameter containers where registered names are replaced by ``values``."""
    values = values or {}
    dec = DecomposedPrompt(*(values.get(k, getattr(params.decomposed, k))
                             for k in ("p_short", "a", "b")))
    experts = ExpertStack(*(values.get(f"experts.{k}", getattr(params.experts, k))
                            for k in ("w_down", "b_down", "w_up", "b_up")))
    gate = GateNet(values.get("gate.weight", params.gate.weight),
                   values.get("gate.bias", params.gate.bias))
    return dec, experts, gate


def _tick(timers, key, start):
    if timers is not None:
        timers[key] = timers.get(key, 0.0) + (time.perf_counter() - start)


def new_prompt(params: EptParams, values=None, timers=None):
    """``P_new`` of shape ``(s, d)``; independent of any input example."""
    dec, experts, gate = _views(params, values)
    p_s = dec.p_short
    if params.use_fusion:
        t0 = time.perf_counter()
        w = attention_weights(p_s, dec.a, dec.b, params.variant)
        p_f = fuse(p_s, w, dec.a, dec.b, params.variant)
        _tick(timers, "fusion", t0)
    else:
        p_f = p_s
    if not params.use_projection:
        return p_f
    t0 = time.perf_counter()
    p_amend = amend(p_s, experts, gate)
    _tick(timers, "projection", t0)
    return reconstruct(p_amend, p_f)


def _concat(p_new, i_up):
    batch = i_up.shape[0]
    rows = ad.broadcast_to(p_new, (batch,) + tuple(p_new.shape))
    return ad.concat([rows, i_up], axis=1)


def forward(params: EptParams, e_batch, values=None, timers=None):
    """Encoder input ``[P_new; I_up]`` for each example, shape ``(batch, s + m, d)``.

    ``values`` optionally maps registered names to tracked ``Var``s, in which
    case the result is a ``Var`` on their tape.
    """
    e_batch = np.asarray(e_batch, dtype=np.float64)
    if e_batch.ndim != 3 or e_batch.shape[1:] != (params.m, params.d):
        raise ShapeError(f"input embeddings {e_batch.shape} do not match "
                         f"(batch, m, d) = (*, {params.m}, {params.d})")
    dec, _, _ = _views(params, values)
    i_up = update_input_embedding(e_batch, dec.a, dec.b)
    out = i_up if params.s == 0 else _concat(new_prompt(params, values, timers), i_up)
    return out if ad.contains_var(values) else ad.unwrap(out)


@dataclass
class BakedPrompt:
    p_new: np.ndarray
    a: np.ndarray
    b: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def parameter_count(self) -> int:
        return self.p_new.size + self.a.size + self.b.size


def bake(params: EptParams) -> BakedPrompt:
    p_new = new_prompt(params) if params.s > 0 else np.zeros((0, params.d))
    meta = {"variant": FusionVariant(params.variant).value, "mode": params.mode}
    if params.budget is not None:
        meta["budget"] = list(params.budget.as_tuple())
    return BakedPrompt(np.array(p_new), params.decomposed.a.copy(),
                       params.decomposed.b.copy(), meta)


def baked_forward(baked: BakedPrompt, e_batch) -> np.ndarray:
    e_batch = np.asarray(e_batch, dtype=np.float64)
    i_up = update_input_embedding(e_batch, baked.a, baked.b)
    if baked.p_new.shape[0] == 0:
        return i_up
    return ad.unwrap(_concat(baked.p_new, i_up))
