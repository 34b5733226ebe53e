"""The ten acceptance criteria, each at its stated tolerance and time budget.

Run alone with ``pytest tests/test_acceptance.py``; one PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import struct
import time

import numpy as np
import pytest

from ept import autodiff as ad
from ept.config import load_config
from ept.decomposition import PromptBudget, align_rows, decompose, solve_rank
from ept.fusion import FusionVariant, attention_weights
from ept.gradcheck import ept_objective, random_case
from ept.harness import baseline_accuracy, make_task_for, run_single, sweep_prompt_length
from ept.pipeline import bake, baked_forward, build_params, forward
from ept.projection import GateNet, gate_weights
from ept.tasks import TASK_NAMES
from ept.trainer import save_checkpoint
from oracles import svd_tail

SEEDS = (0, 1, 2, 3, 4)


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_c01_budget_arithmetic(criterion):
    with Clock() as clock:
        r60 = solve_rank(100, 60, 256, 768)
        r40 = solve_rank(100, 40, 256, 768)
        count = PromptBudget.from_lengths(100, 60, 256, 768).trainable
    ok = r60 == 30 and r40 == 45 and count == 76_800 and clock.seconds < 1
    criterion(1, ok, f"r(s=60)={r60} r(s=40)={r40} params={count} ({clock.seconds:.3f}s)")
    assert ok


def test_c02_gradient_correctness(criterion):
    rng = np.random.default_rng(2024)
    worst, failures, n_cases, groups = 0.0, [], 24, set()
    with Clock() as clock:
        for i in range(n_cases):
            variant = list(FusionVariant)[i % 2]
            case = random_case(rng, variant)
            f, params = ept_objective(case)
            report = ad.grad_check(f, params, h=1e-5, tol=1e-4)
            groups |= set(params)
            worst = max(worst, report.max_rel)
            if not report.passed:
                failures.append((case.shape_tuple(), report.to_text()))
    expected_groups = {"p_short", "a", "b", "experts.w_down", "experts.b_down", "experts.w_up",
                       "experts.b_up", "gate.weight", "gate.bias"}
    ok = not failures and groups == expected_groups and clock.seconds < 120
    criterion(2, ok, f"{n_cases} shapes, both variants, max rel err {worst:.2e} "
                     f"({clock.seconds:.1f}s)")
    assert ok, failures


def test_c03_normalisation(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    with Clock() as clock:
        for _ in range(1000):
            s, m, d, n = (int(x) for x in rng.integers(1, 9, size=4))
            r = int(rng.integers(1, min(m, d) + 1))
            scale = float(rng.choice([0.1, 1.0, 10.0]))
            ps = rng.normal(0, scale, size=(s, d))
            a, b = rng.normal(size=(m, r)), rng.normal(size=(r, d))
            gate = GateNet(rng.normal(0, scale, size=(d, n)), rng.normal(size=(1, n)))
            w = attention_weights(ps, a, b, FusionVariant.CROSS_ATTENTION)
            g = gate_weights(ps, gate)
            worst = max(worst, np.abs(w.sum(axis=1) - 1).max(), np.abs(g.sum(axis=1) - 1).max())
    ok = worst <= 1e-12 and clock.seconds < 10
    criterion(3, ok, f"1000 instances, max |row sum - 1| = {worst:.1e} ({clock.seconds:.2f}s)")
    assert ok


def test_c04_svd_optimality(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    with Clock() as clock:
        for _ in range(50):
            m, d = (int(x) for x in rng.integers(2, 17, size=2))
            r = int(rng.integers(1, min(m, d) + 1))
            s = int(rng.integers(1, 6))
            l = s + -(-(m + d) * r // d)
            budget = PromptBudget(l, s, r, m, d, mode="floor")
            p = rng.normal(size=(l, d))
            dec = decompose(p, budget)
            aligned = align_rows(p, m)
            err = np.linalg.norm(aligned - dec.a @ dec.b)
            worst = max(worst, abs(err - svd_tail(aligned, r)))
    ok = worst < 1e-8 and clock.seconds < 30
    criterion(4, ok, f"50 matrices, max |err - tail| = {worst:.1e} ({clock.seconds:.2f}s)")
    assert ok


def test_c05_degenerate_modes(criterion):
    rng = np.random.default_rng(5)
    ok_a = ok_b = True
    with Clock() as clock:
        for _ in range(20):
            l, m, d = (int(x) for x in rng.integers(2, 9, size=3))
            p = rng.normal(size=(l, d))
            e = rng.normal(size=(3, m, d))
            vanilla = build_params(p, PromptBudget(l, l, 0, m, d), use_fusion=False,
                                   use_projection=False)
            out = forward(vanilla, e)
            ok_a &= all(out[i].tobytes() == np.vstack([p, e[i]]).tobytes() for i in range(3))
            r = int(rng.integers(1, min(m, d) + 1))
            l0 = -(-(m + d) * r // d)
            for fus, proj in ((True, True), (False, False), (True, False), (False, True)):
                low = build_params(rng.normal(size=(l0, d)),
                                   PromptBudget(l0, 0, r, m, d, mode="floor"),
                                   use_fusion=fus, use_projection=proj)
                i_up = e + low.decomposed.a @ low.decomposed.b
                ok_b &= forward(low, e).tobytes() == i_up.tobytes()
    ok = ok_a and ok_b and clock.seconds < 5
    criterion(5, ok, f"(a) r=0 == [P; E]: {ok_a}  (b) s=0 == I_up: {ok_b} "
                     f"({clock.seconds:.2f}s)")
    assert ok


def test_c06_baking(criterion):
    rng = np.random.default_rng(6)
    mismatches = 0
    with Clock() as clock:
        for i in range(100):
            variant = list(FusionVariant)[i % 2]
            m, d = 16, 32
            s = int(rng.integers(1, 17))
            r = solve_rank(16, s, m, d, "floor")
            params = build_params(rng.normal(size=(16, d)), PromptBudget(16, s, r, m, d, "floor"),
                                  4, i, variant)
            # move off the initial point so biases and gate are non-trivial
            params.assign({k: v + rng.normal(0, 0.1, size=v.shape)
                           for k, v in params.registry().items()})
            e = rng.normal(size=(int(rng.integers(1, 9)), m, d))
            live = forward(params, e)
            mismatches += live.tobytes() != baked_forward(bake(params), e).tobytes()
    ok = mismatches == 0 and clock.seconds < 10
    criterion(6, ok, f"100 batches, {mismatches} mismatches ({clock.seconds:.2f}s)")
    assert ok


@pytest.fixture(scope="module")
def ablation_runs(pretrained):
    """Default-config runs for full EPT and decomposition-only, 3 tasks x 5 seeds."""
    out, seconds = {}, {}
    for mode, fus, proj in (("full", True, True), ("decomposition", False, False)):
        cfg = load_config(None, {"ept.use_fusion": str(fus), "ept.use_projection": str(proj)})
        t0 = time.perf_counter()
        out[mode] = {(task, seed): run_single(cfg, pretrained, task, seed)[1]
                     for task in TASK_NAMES for seed in SEEDS}
        seconds[mode] = time.perf_counter() - t0
    return out, seconds


@pytest.mark.slow
def test_c07_trainability(criterion, ablation_runs, pretrained, default_config):
    runs, seconds = ablation_runs
    assert default_config.projection.n_experts == 4
    assert default_config.fusion.variant == FusionVariant.CROSS_ATTENTION.value
    details, ok = [], seconds["full"] < 15 * 60
    for task in TASK_NAMES:
        target = 0.9 * baseline_accuracy(make_task_for(default_config, pretrained, task))
        votes = 0
        for seed in SEEDS:
            rec = runs["full"][(task, seed)]
            votes += rec.best_eval >= target and rec.final_eval > rec.initial_eval
        ok &= votes >= 3
        details.append(f"{task} {votes}/5 (target {target:.3f})")
    criterion(7, ok, "; ".join(details) + f" ({seconds['full']:.0f}s)")
    assert ok


@pytest.mark.slow
def test_c08_ablation_direction(criterion, ablation_runs):
    runs, seconds = ablation_runs
    full = float(np.mean([r.best_eval for r in runs["full"].values()]))
    dec = float(np.mean([r.best_eval for r in runs["decomposition"].values()]))
    total = seconds["full"] + seconds["decomposition"]
    ok = full >= dec and total < 30 * 60
    criterion(8, ok, f"full {full:.4f} vs decomposition-only {dec:.4f} over 15 runs "
                     f"({total:.0f}s)")
    assert ok


@pytest.mark.slow
def test_c09_timing_monotone(criterion, pretrained, default_config):
    with Clock() as clock:
        _, timing = sweep_prompt_length(default_config, pretrained)
    ms = [row["ms_per_step"] for row in timing]
    s_values = [row["s"] for row in timing]
    ok = all(b >= a for a, b in zip(ms, ms[1:])) and clock.seconds < 20 * 60
    pairs = " ".join(f"s={s}:{t:.2f}" for s, t in zip(s_values, ms))
    criterion(9, ok, f"median ms/step {pairs} ({clock.seconds:.0f}s)")
    assert ok


def test_c10_determinism(criterion, pretrained, default_config, tmp_path):
    cfg = load_config(None, {"train.steps": "300", "train.eval_every": "100"})
    blobs = []
    with Clock() as clock:
        for i in range(2):
            params, rec = run_single(cfg, pretrained, "majority", 3)
            ckpt = tmp_path / f"run{i}.ckpt"
            save_checkpoint(params, ckpt)
            losses = struct.pack(f"<{len(rec.losses)}d", *rec.losses)
            blobs.append((losses, rec.jsonl().encode(), ckpt.read_bytes()))
    ok = blobs[0] == blobs[1] and clock.seconds < 5 * 60
    criterion(10, ok, f"losses, eval log and checkpoint byte-identical: {blobs[0] == blobs[1]} "
                      f"({clock.seconds:.1f}s)")
    assert ok
