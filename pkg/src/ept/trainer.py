"""Prompt-tuning loop over a frozen encoder.

Two parameter groups get separate learning rates: the short prompt together
with the projection experts and gate (``lr_prompt``), and the low-rank
factors ``A``, ``B`` (``lr_lowrank``).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .decomposition import DecomposedPrompt, PromptBudget
from .errors import CompatibilityError, ConfigError, DivergenceError
from .fusion import FusionVariant
from .pipeline import LOWRANK_PARAMS, EptParams, forward, new_prompt
from .projection import ExpertStack, GateNet
from .tasks import LabeledDataset, Task, kshot_subsample  # noqa: F401  (re-export)
from .toy_plm import FrozenEncoder, classify

PAPER_STEPS = 30_000
LR_PROMPT_GRID = (0.3, 0.4, 0.5)
LR_LOWRANK_GRID = (1e-4, 5e-4, 5e-3)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_prompt: float = 0.01
    lr_lowrank: float = 5e-3
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 200

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError(f"steps, batch_size and eval_every must be positive: {self}")
        if self.lr_prompt < 0 or self.lr_lowrank < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r} (adam or sgd)")


@dataclass
class RunRecord:
    log: list = field(default_factory=list)  # one dict per eval point
    losses: list = field(default_factory=list)  # training loss at every step
    step_ms: list = field(default_factory=list)
    fusion_ms: list = field(default_factory=list)
    projection_ms: list = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")
    best_eval: float = float("nan")
    total_ms: float = 0.0
    parameter_counts: dict = field(default_factory=dict)

    def median_step_ms(self, warmup: int = 10) -> float:
        ms = self.step_ms[warmup:] or self.step_ms
        return float(np.median(ms))

    def median_component_ms(self, warmup: int = 10) -> dict:
        out = {}
        for key, ms in (("fusion", self.fusion_ms), ("projection", self.projection_ms)):
            tail = ms[warmup:] or ms
            out[key] = float(np.median(tail)) if tail else 0.0
        return out

    def jsonl(self) -> str:
        return "".join(json.dumps(row, sort_keys=True) + "\n" for row in self.log)


class _Adam:
    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, values, grads, lrs):
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            out[k] = values[k] - lrs[k] * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _sgd_step(values, grads, lrs):
    return {k: values[k] - lrs[k] * g for k, g in grads.items()}


def learning_rates(names, cfg: TrainConfig) -> dict[str, float]:
    return {k: cfg.lr_lowrank if k in LOWRANK_PARAMS else cfg.lr_prompt for k in names}


def batch_loss(params: EptParams, enc: FrozenEncoder, data: LabeledDataset, idx):
    """Loss of one batch, with gradients for every registered parameter."""
    tape = ad.Tape()
    tracked = {k: tape.param(k, v) for k, v in params.registry().items()}
    timers = {}
    x = forward(params, enc.embed(data.tokens[idx]), values=tracked, timers=timers)
    _, loss = classify(enc, x, data.labels[idx], data.n_classes)
    return float(loss.value.reshape(())), tape.backward(loss), timers


def evaluate(params: EptParams, enc: FrozenEncoder, data: LabeledDataset,
             chunk: int = 256) -> float:
    correct = 0
    for start in range(0, len(data), chunk):
        tokens = data.tokens[start:start + chunk]
        x = forward(params, enc.embed(tokens))
        logits = ad.unwrap(enc.logits(x, data.n_classes))
        correct += int((logits.argmax(axis=1) == data.labels[start:start + chunk]).sum())
    return correct / len(data)


def batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=batch_size, replace=batch_size > n)


def train(params: EptParams, enc: FrozenEncoder, task: Task, cfg: TrainConfig,
          log_path=None) -> RunRecord:
    """Optimise ``params`` in place and return the run's metrics."""
    rng = np.random.default_rng(cfg.seed)
    names = list(params.registry())
    lrs = learning_rates(names, cfg)
    opt = _Adam() if cfg.optimizer == "adam" else None
    rec = RunRecord(parameter_counts=params.parameter_counts())
    rec.initial_eval = evaluate(params, enc, task.eval)
    rec.log.append({"step": 0, "loss": None, "eval_acc": rec.initial_eval})
    t_start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        idx = batch_indices(rng, len(task.train), cfg.batch_size)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, timers = batch_loss(params, enc, task.train, idx)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(f"non-finite loss at step {step} "
                                  f"(lr_prompt={cfg.lr_prompt}, lr_lowrank={cfg.lr_lowrank})")
        values = params.registry()
        params.assign(opt.step(values, grads, lrs) if opt else _sgd_step(values, grads, lrs))
        rec.step_ms.append(1e3 * (time.perf_counter() - t0))
        rec.fusion_ms.append(1e3 * timers.get("fusion", 0.0))
        rec.projection_ms.append(1e3 * timers.get("projection", 0.0))
        rec.losses.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = evaluate(params, enc, task.eval)
            rec.log.append({"step": step, "loss": loss, "eval_acc": acc})
    rec.total_ms = 1e3 * (time.perf_counter() - t_start)
    rec.final_eval = rec.log[-1]["eval_acc"]
    rec.best_eval = max(row["eval_acc"] for row in rec.log)
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write(rec.jsonl())
    return rec


# -- checkpoints ---------------------------------------------------------------


def _header(params: EptParams) -> dict:
    budget = params.budget.as_tuple() if params.budget else None
    return {"kind": "ept-params", "budget": list(budget) if budget else None,
            "budget_mode": params.budget.mode if params.budget else None,
            "s": params.s, "r": params.r, "m": params.m, "d": params.d,
            "n_experts": params.experts.n_experts,
            "variant": FusionVariant(params.variant).value,
            "use_fusion": params.use_fusion, "use_projection": params.use_projection}


def _all_arrays(params: EptParams) -> dict[str, np.ndarray]:
    out = {k: getattr(params.decomposed, k) for k in ("p_short", "a", "b")}
    out.update({f"experts.{k}": v for k, v in asdict(params.experts).items()})
    out.update({f"gate.{k}": v for k, v in asdict(params.gate).items()})
    return out


def save_checkpoint(params: EptParams, path) -> str:
    """Write every parameter (trainable or not in this mode); returns the content hash."""
    return checkpoint.save(path, _header(params), _all_arrays(params))


def load_checkpoint(path, expect: EptParams | None = None) -> EptParams:
    """Read parameters back; ``expect`` guards against a mismatched (s, r) budget."""
    header, arrays = checkpoint.load(path)
    if header.get("kind") != "ept-params":
        raise CompatibilityError(f"{path} holds {header.get('kind')!r}, not ept-params")
    if expect is not None:
        mine = (expect.s, expect.r, expect.m, expect.d, expect.experts.n_experts)
        theirs = (header["s"], header["r"], header["m"], header["d"], header["n_experts"])
        if mine != theirs:
            raise CompatibilityError(
                f"checkpoint (s, r, m, d, n_experts) = {theirs} does not match "
                f"current configuration {mine}")
    budget = (PromptBudget(*header["budget"], mode=header["budget_mode"])
              if header.get("budget") else None)
    return EptParams(
        DecomposedPrompt(arrays["p_short"], arrays["a"], arrays["b"]),
        ExpertStack(*(arrays[f"experts.{k}"] for k in ("w_down", "b_down", "w_up", "b_up"))),
        GateNet(arrays["gate.weight"], arrays["gate.bias"]),
        FusionVariant(header["variant"]), header["use_fusion"], header["use_projection"], budget)


def transfer_into(target: EptParams, path) -> EptParams:
    """Source-to-target prompt transfer: load weights, keep the target's mode flags."""
    loaded = load_checkpoint(path, expect=target)
    loaded.variant = target.variant
    loaded.use_fusion, loaded.use_projection = target.use_fusion, target.use_projection
    loaded.budget = target.budget
    return loaded


def prompt_snapshot(params: EptParams) -> np.ndarray:
    return np.array(new_prompt(params))
