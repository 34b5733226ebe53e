"""Experiment orchestration: single runs, ablations, sweeps, grid search, transfer.

Every table is returned as a list of dict rows and can be written with
:func:`write_csv`. Wall-clock numbers never appear in the metric tables; they
go into separate timing tables so that metric outputs are byte-identical
across repeated runs.
"""

from __future__ import annotations

import csv
import dataclasses
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, float_list, int_list, str_list
from .decomposition import PromptBudget, init_source_prompt, solve_rank
from .errors import SetupError
from .pipeline import EptParams, build_params
from .projection import gate_weights
from .tasks import Task, best_constant_accuracy, kshot_subsample, make_task
from .toy_plm import FrozenEncoder, markov_corpus, pretrain_encoder
from .trainer import RunRecord, save_checkpoint, train, transfer_into

ABLATION_MODES = (
    ("decomposition", False, False),
    ("fusion", True, False),
    ("projection", False, True),
    ("full", True, True),
)
PAPER_GEOMETRY = {"l": 100, "m": 256, "d": 768}


def pretrain(cfg: ExperimentConfig) -> FrozenEncoder:
    p = cfg.pretrain
    corpus = markov_corpus(cfg.encoder, p.corpus_size, seed=p.seed)
    return pretrain_encoder(cfg.encoder, corpus, p.steps, p.batch_size, p.lr, seed=p.seed)


def load_encoder(cfg: ExperimentConfig) -> FrozenEncoder:
    path = Path(cfg.harness.encoder)
    if not (path / "manifest.json").exists():
        raise SetupError(f"no pretrained encoder at {path}; run `ept pretrain` first")
    return FrozenEncoder.load(path)


def make_budget(cfg: ExperimentConfig, enc: FrozenEncoder, s: int | None = None,
                mode: str | None = None) -> PromptBudget:
    return PromptBudget.from_lengths(cfg.budget.l, cfg.budget.s if s is None else s,
                                     enc.cfg.max_seq, enc.cfg.d_model, mode or cfg.budget.mode)


def make_params(cfg: ExperimentConfig, enc: FrozenEncoder, seed: int,
                budget: PromptBudget | None = None) -> EptParams:
    """Seeded EPT parameters: source prompt drawn from the encoder's vocabulary."""
    budget = budget or make_budget(cfg, enc)
    source = init_source_prompt(enc.embedding_table, budget.l, seed)
    return build_params(source, budget, cfg.projection.n_experts, cfg.projection.seed + seed,
                        cfg.fusion.variant, cfg.ept.use_fusion, cfg.ept.use_projection)


def make_task_for(cfg: ExperimentConfig, enc: FrozenEncoder, name: str | None = None,
                  seed: int | None = None) -> Task:
    return make_task(name or cfg.task.name, enc.cfg.max_seq, enc.cfg.vocab_size,
                     cfg.task.n_train, cfg.task.n_eval,
                     cfg.task.seed if seed is None else seed)


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """``with_overrides(cfg, train={"steps": 10})`` returns an updated copy."""
    return dataclasses.replace(cfg, **{
        sec: dataclasses.replace(getattr(cfg, sec), **vals) for sec, vals in sections.items()})


def run_single(cfg: ExperimentConfig, enc: FrozenEncoder, task: str, seed: int,
               log_path=None, budget: PromptBudget | None = None):
    """Train one seeded configuration; returns ``(params, record)``."""
    run_cfg = dataclasses.replace(cfg.train, seed=seed)
    params = make_params(cfg, enc, seed, budget)
    rec = train(params, enc, make_task_for(cfg, enc, task), run_cfg, log_path=log_path)
    return params, rec


def _job(args):
    cfg, enc, task, seed, budget = args
    _, rec = run_single(cfg, enc, task, seed, budget=budget)
    return rec


def run_many(jobs: list, n_workers: int = 1) -> list[RunRecord]:
    """Evaluate ``(cfg, enc, task, seed, budget)`` jobs, optionally in worker processes."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_job, jobs))


def _stats(values):
    mean = float(np.mean(values))
    std = float(statistics.stdev(values)) if len(values) > 1 else 0.0
    return mean, std


def run_ablation_matrix(cfg: ExperimentConfig, enc: FrozenEncoder, tasks=None, seeds=None):
    """Four mode combinations x tasks x seeds; returns ``(summary_rows, run_rows)``."""
    tasks = tasks or str_list(cfg.harness.tasks)
    seeds = seeds if seeds is not None else int_list(cfg.harness.seeds)
    chash = config_hash(cfg)
    jobs, keys = [], []
    for mode, fus, proj in ABLATION_MODES:
        mode_cfg = with_overrides(cfg, ept={"use_fusion": fus, "use_projection": proj})
        for task in tasks:
            for seed in seeds:
                jobs.append((mode_cfg, enc, task, seed, None))
                keys.append((mode, fus, proj, task, seed))
    records = run_many(jobs, cfg.harness.jobs)
    runs = [{"mode": k[0], "task": k[3], "seed": k[4], "initial_acc": r.initial_eval,
             "best_acc": r.best_eval, "final_acc": r.final_eval, "config_hash": chash}
            for k, r in zip(keys, records)]
    summary = []
    for mode, fus, proj in ABLATION_MODES:
        for task in tasks:
            vals = [row["best_acc"] for row in runs if row["mode"] == mode and row["task"] == task]
            mean, std = _stats(vals)
            summary.append({"mode": mode, "use_fusion": fus, "use_projection": proj,
                            "task": task, "n_seeds": len(vals), "metric_mean": mean,
                            "metric_std": std, "config_hash": chash})
    return summary, runs


def length_grid(cfg: ExperimentConfig, enc: FrozenEncoder, fractions=None):
    """Fixed-budget (s, r) pairs scaled from fractions of the source length."""
    fractions = fractions if fractions is not None else float_list(cfg.harness.length_fractions)
    out = []
    for f in fractions:
        s = int(round(f * cfg.budget.l))
        try:
            budget = make_budget(cfg, enc, s=s, mode="exact")
        except ValueError:
            budget = make_budget(cfg, enc, s=s, mode="floor")
        s_paper = int(round(f * PAPER_GEOMETRY["l"]))
        r_paper = solve_rank(PAPER_GEOMETRY["l"], s_paper, PAPER_GEOMETRY["m"],
                             PAPER_GEOMETRY["d"], "floor")
        out.append((budget, s_paper, r_paper))
    return out


def sweep_prompt_length(cfg: ExperimentConfig, enc: FrozenEncoder, seeds=None, fractions=None):
    """Metric and step time along the fixed-budget length axis.

    Returns ``(metric_rows, timing_rows)``. Runs are interleaved across lengths
    seed by seed so that slow drift in machine load affects all lengths alike.
    """
    seeds = seeds if seeds is not None else int_list(cfg.harness.seeds)
    grid = length_grid(cfg, enc, fractions)
    sweep_cfg = with_overrides(cfg, train={"steps": cfg.harness.length_steps})
    task = cfg.task.name
    chash = config_hash(cfg)
    recs: dict[int, list[RunRecord]] = {i: [] for i in range(len(grid))}
    for seed in seeds:
        for i, (budget, _, _) in enumerate(grid):
            _, rec = run_single(sweep_cfg, enc, task, seed, budget=budget)
            recs[i].append(rec)
    metrics, timing = [], []
    for i, (budget, s_paper, r_paper) in enumerate(grid):
        mean, std = _stats([r.best_eval for r in recs[i]])
        common = {"s": budget.s, "r": budget.r, "s_paper": s_paper, "r_paper": r_paper}
        metrics.append({**common, "budget_mode": budget.mode, "slack": budget.slack,
                        "vanilla_pt": budget.r == 0, "task": task, "n_seeds": len(recs[i]),
                        "metric_mean": mean, "metric_std": std, "config_hash": chash})
        comp = [r.median_component_ms() for r in recs[i]]
        timing.append({**common,
                       "ms_per_step": float(np.median([r.median_step_ms() for r in recs[i]])),
                       "fusion_ms": float(np.median([c["fusion"] for c in comp])),
                       "projection_ms": float(np.median([c["projection"] for c in comp])),
                       "config_hash": chash})
    return metrics, timing


def sweep_spaces(cfg: ExperimentConfig, enc: FrozenEncoder, tasks=None, seeds=None,
                 spaces=None):
    """Projection-only runs over the number of experts; returns ``(rows, gate_rows)``."""
    tasks = tasks or str_list(cfg.harness.tasks)
    seeds = seeds if seeds is not None else int_list(cfg.harness.seeds)
    spaces = spaces or int_list(cfg.harness.spaces)
    chash = config_hash(cfg)
    rows, gates = [], []
    for task in tasks:
        for n in spaces:
            run_cfg = with_overrides(cfg, ept={"use_fusion": False, "use_projection": True},
                                     projection={"n_experts": n})
            vals = []
            for seed in seeds:
                params, rec = run_single(run_cfg, enc, task, seed)
                vals.append(rec.best_eval)
                g = gate_weights(params.decomposed.p_short, params.gate)
                for t in range(g.shape[0]):
                    for e in range(g.shape[1]):
                        gates.append({"task": task, "n_experts": n, "seed": seed,
                                      "token": t, "expert": e, "weight": float(g[t, e])})
            mean, std = _stats(vals)
            rows.append({"task": task, "n_experts": n, "n_seeds": len(vals),
                         "metric_mean": mean, "metric_std": std, "config_hash": chash})
    return rows, gates


def select_best(rows):
    """Highest metric; ties go to the lower ``lr_prompt``, then the lower ``lr_lowrank``."""
    return min(rows, key=lambda r: (-r["metric"], r["lr_prompt"], r["lr_lowrank"]))


def grid_search(cfg: ExperimentConfig, enc: FrozenEncoder, seeds=None):
    seeds = seeds if seeds is not None else int_list(cfg.harness.seeds)[:1]
    chash = config_hash(cfg)
    rows = []
    for lp in float_list(cfg.harness.lr_prompt_grid):
        for ll in float_list(cfg.harness.lr_lowrank_grid):
            run_cfg = with_overrides(cfg, train={"lr_prompt": lp, "lr_lowrank": ll})
            vals = [run_single(run_cfg, enc, cfg.task.name, s)[1].best_eval for s in seeds]
            rows.append({"lr_prompt": lp, "lr_lowrank": ll, "n_seeds": len(vals),
                         "metric": float(np.mean(vals)), "config_hash": chash})
    return select_best(rows), rows


def run_transfer(cfg: ExperimentConfig, enc: FrozenEncoder, seeds=None, workdir=None):
    """Source-task prompt transfer vs. fresh initialisation on a k-shot target task."""
    seeds = seeds if seeds is not None else int_list(cfg.harness.seeds)
    h = cfg.harness
    chash = config_hash(cfg)
    source = make_task_for(cfg, enc, h.source_task)
    target = make_task_for(cfg, enc, h.target_task, seed=h.target_task_seed)
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        ckpt_dir = Path(workdir or tmp)
        for seed in seeds:
            src_params = make_params(cfg, enc, seed)
            train(src_params, enc, source, dataclasses.replace(cfg.train, seed=seed))
            ckpt = ckpt_dir / f"source-seed{seed}.ckpt"
            save_checkpoint(src_params, ckpt)
            shots = Task(target.name, kshot_subsample(target.train, h.k, seed), target.eval)
            for arm in ("fresh", "transfer"):
                params = make_params(cfg, enc, seed)
                if arm == "transfer":
                    params = transfer_into(params, ckpt)
                rec = train(params, enc, shots, dataclasses.replace(cfg.train, seed=seed))
                rows.append({"seed": seed, "arm": arm, "source": h.source_task,
                             "target": h.target_task, "k": h.k, "initial_acc": rec.initial_eval,
                             "best_acc": rec.best_eval, "final_acc": rec.final_eval,
                             "config_hash": chash})
    return rows


def baseline_accuracy(task: Task, margin: float = 0.05) -> float:
    """Best constant-class accuracy on the eval split plus ``margin``, capped at 1."""
    return min(1.0, best_constant_accuracy(task.eval) + margin)


def _fmt(v):
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows) -> None:
    """RFC 4180 CSV (CRLF line endings, minimal quoting)."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
