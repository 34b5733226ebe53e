"""Command-line front end.

Usage: ``ept <subcommand> [--config FILE] [--out DIR] [--<section>.<key> VALUE ...]``

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, harness
from .autodiff import grad_check
from .config import config_hash, dotted_keys, load_config, str_list, to_ini
from .decomposition import PromptBudget
from .errors import EptError
from .fusion import FusionVariant
from .gradcheck import ept_objective, random_case
from .pipeline import bake
from .trainer import load_checkpoint, save_checkpoint

SUBCOMMANDS = ("budget", "pretrain", "train", "bake", "gradcheck", "ablate",
               "sweep-length", "sweep-spaces", "grid", "transfer")


@dataclass
class ExperimentSpec:
    subcommand: str
    config_path: str | None
    out_dir: Path
    seeds: list
    sweep: tuple | None = None
    checkpoint: str | None = None


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ept", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="INI config file; [section] key = value")
    parser.add_argument("--out", default="runs", help="output root directory")
    parser.add_argument("--overwrite", action="store_true",
                        help="write directly into --out instead of a timestamped subdirectory")
    parser.add_argument("--checkpoint", help="parameter checkpoint (bake)")
    parser.add_argument("--cases", type=int, default=20, help="random shapes (gradcheck)")
    for key, kind in dotted_keys().items():
        parser.add_argument(f"--{key}", dest=key, metavar=kind.__name__.upper(), default=None)
    return parser


def _out_dir(args) -> Path:
    root = Path(args.out)
    if args.overwrite:
        root.mkdir(parents=True, exist_ok=True)
        return root
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    out = root / f"{args.subcommand}-{stamp}"
    out.mkdir(parents=True, exist_ok=False)
    return out


def _emit(out: Path, name: str, rows) -> None:
    harness.write_csv(out / name, rows)


def _print_rows(rows) -> None:
    for row in rows:
        print(" ".join(f"{k}={v}" for k, v in row.items() if k != "config_hash"))


def cmd_budget(cfg, spec):
    m, d = cfg.encoder.max_seq, cfg.encoder.d_model
    b = PromptBudget.from_lengths(cfg.budget.l, cfg.budget.s, m, d, cfg.budget.mode)
    row = {"l": b.l, "s": b.s, "r": b.r, "m": m, "d": d, "mode": b.mode,
           "prompt_params": b.s * d, "lowrank_params": (m + d) * b.r,
           "trainable": b.trainable, "vanilla": b.vanilla, "slack": b.slack}
    _print_rows([row])
    _emit(spec.out_dir, "budget.csv", [row])


def cmd_pretrain(cfg, spec):
    enc = harness.pretrain(cfg)
    enc.save(spec.out_dir / "encoder")
    print(f"encoder written to {spec.out_dir / 'encoder'} ({enc.fingerprint()})")


def cmd_train(cfg, spec):
    enc = harness.load_encoder(cfg)
    seed = spec.seeds[0]
    params, rec = harness.run_single(cfg, enc, cfg.task.name, seed)
    chash = config_hash(cfg)
    with open(spec.out_dir / "run.jsonl", "w") as fh:
        for row in rec.log:
            fh.write(json.dumps({**row, "config_hash": chash}, sort_keys=True) + "\n")
    harness.write_csv(spec.out_dir / "timing.csv", [
        {"step": i + 1, "ms": ms, "fusion_ms": f, "projection_ms": p}
        for i, (ms, f, p) in enumerate(zip(rec.step_ms, rec.fusion_ms, rec.projection_ms))])
    digest = save_checkpoint(params, spec.out_dir / "params.ckpt")
    summary = {"task": cfg.task.name, "seed": seed, "initial_acc": rec.initial_eval,
               "best_acc": rec.best_eval, "final_acc": rec.final_eval,
               "parameter_counts": rec.parameter_counts, "checkpoint_hash": digest,
               "config_hash": chash}
    (spec.out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _print_rows([{k: v for k, v in summary.items() if k != "parameter_counts"}])


def cmd_bake(cfg, spec):
    params = load_checkpoint(spec.checkpoint)
    baked = bake(params)
    header = {"kind": "baked-prompt", **baked.meta}
    digest = checkpoint.save(spec.out_dir / "baked.ckpt", header,
                             {"p_new": baked.p_new, "a": baked.a, "b": baked.b})
    print(f"baked prompt: {baked.parameter_count} parameters, hash {digest}")


def cmd_gradcheck(cfg, spec):
    rng = np.random.default_rng(spec.seeds[0])
    lines, ok = [], True
    for i in range(spec.sweep[1]):
        variant = list(FusionVariant)[i % 2]
        case = random_case(rng, variant)
        f, params = ept_objective(case)
        report = grad_check(f, params)
        ok &= report.passed
        lines.append(f"case={i} variant={variant.value} shape={case.shape_tuple()}")
        lines.append(report.to_text())
    text = "\n".join(lines)
    (spec.out_dir / "gradcheck.txt").write_text(text + "\n")
    print(text)
    if not ok:
        raise SystemExit(1)


def cmd_ablate(cfg, spec):
    enc = harness.load_encoder(cfg)
    summary, runs = harness.run_ablation_matrix(cfg, enc, seeds=spec.seeds)
    _emit(spec.out_dir, "ablation.csv", summary)
    _emit(spec.out_dir, "ablation_runs.csv", runs)
    _print_rows(summary)


def cmd_sweep_length(cfg, spec):
    enc = harness.load_encoder(cfg)
    metrics, timing = harness.sweep_prompt_length(cfg, enc, seeds=spec.seeds)
    _emit(spec.out_dir, "sweep_length.csv", metrics)
    _emit(spec.out_dir, "sweep_length_timing.csv", timing)
    _print_rows(timing)


def cmd_sweep_spaces(cfg, spec):
    enc = harness.load_encoder(cfg)
    rows, gates = harness.sweep_spaces(cfg, enc, seeds=spec.seeds)
    _emit(spec.out_dir, "sweep_spaces.csv", rows)
    _emit(spec.out_dir, "gate_weights.csv", gates)
    _print_rows(rows)


def cmd_grid(cfg, spec):
    enc = harness.load_encoder(cfg)
    best, rows = harness.grid_search(cfg, enc, seeds=spec.seeds[:1])
    _emit(spec.out_dir, "grid.csv", rows)
    _emit(spec.out_dir, "grid_best.csv", [best])
    _print_rows(rows)
    print("best:", {k: v for k, v in best.items() if k != "config_hash"})


def cmd_transfer(cfg, spec):
    enc = harness.load_encoder(cfg)
    rows = harness.run_transfer(cfg, enc, seeds=spec.seeds, workdir=spec.out_dir)
    _emit(spec.out_dir, "transfer.csv", rows)
    _print_rows(rows)


COMMANDS = {
    "budget": cmd_budget, "pretrain": cmd_pretrain, "train": cmd_train, "bake": cmd_bake,
    "gradcheck": cmd_gradcheck, "ablate": cmd_ablate, "sweep-length": cmd_sweep_length,
    "sweep-spaces": cmd_sweep_spaces, "grid": cmd_grid, "transfer": cmd_transfer,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        if args.subcommand == "bake" and not args.checkpoint:
            raise harness.SetupError("bake needs --checkpoint")
        out = _out_dir(args)
        (out / "config.ini").write_text(to_ini(cfg))
        seeds = [int(s) for s in str_list(cfg.harness.seeds)]
        spec = ExperimentSpec(args.subcommand, args.config, out, seeds,
                              ("cases", args.cases) if args.subcommand == "gradcheck" else None,
                              args.checkpoint)
        COMMANDS[args.subcommand](cfg, spec)
    except EptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
