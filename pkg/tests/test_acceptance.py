"""Acceptance suite: one pass/fail line per criterion, also repeated in the pytest summary."""

from __future__ import annotations

import itertools
import json
import math
import subprocess
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from sjdvp.analysis import analyze
from sjdvp.config import ExperimentConfig
from sjdvp.drafter import (
    HistoryBuffer,
    SJDDrafter,
    VPConfig,
    VPDrafter,
    bayesian_fusion,
    ewa_reference,
    growth_mask,
    prediction_score,
    vp_draft,
)
from sjdvp.engine import TraceRecorder, run_speculative_jacobi
from sjdvp.harness import run_experiment
from sjdvp.markov import Prompt, build_markov_model, exact_completion_table
from sjdvp.prob import SeededRng, tv_distance
from sjdvp.theory import remainder_trials, tv_trials
from sjdvp.tracelog import TrajectoryWriter, read_logs

GOLDEN = Path(__file__).parent / "golden"


def check(number: int, passed: bool, detail: str) -> None:
    record_criterion(number, passed, detail)
    assert passed, detail


# 1 ------------------------------------------------------------------ lossless


def empirical_tv(model, prompt, W, make_drafter, n, seed):
    V = model.vocab_size
    _, probs = exact_completion_table(model, prompt)
    counts = np.zeros(probs.shape[0])
    for i in range(n):
        res = run_speculative_jacobi(model, prompt, W, make_drafter(), SeededRng.for_run(seed, i))
        idx = 0
        for t in res.tokens[len(prompt.prefix):]:
            idx = idx * V + t
        counts[idx] += 1
    return 0.5 * float(np.abs(counts / n - probs).sum())


def test_criterion_1_strict_verification_is_lossless():
    model = build_markov_model(7, 1, 8)
    prompt = Prompt(0, (3,), 4)
    n = 200_000
    tv_sjd = empirical_tv(model, prompt, 3, SJDDrafter, n, 1)
    tv_vp = empirical_tv(model, prompt, 3, lambda: VPDrafter(VPConfig(verify_mode="strict")), n, 2)
    check(1, tv_sjd <= 0.02 and tv_vp <= 0.02,
          f"TV vs exact law over {n} decodes: sjd {tv_sjd:.4f}, sjd-vp {tv_vp:.4f} (limit 0.02)")


# 2 ------------------------------------------------------------------ TV sign


def test_criterion_2_tv_reduction_by_accuracy():
    need = {0.6: 0.90, 0.8: 0.95, 0.95: 0.99}
    parts, ok = [], True
    for Q, floor in need.items():
        gap = [r for r in tv_trials(1000, 32, Q, 1e-3, 2024) if r.gap_ok]
        frac = sum(r.delta_exact < 0 for r in gap) / len(gap)
        worst = max(r.residual for r in gap)
        ok &= frac >= floor and worst <= 0.10
        parts.append(f"Q={Q}: {frac:.3f} of {len(gap)} reduced (need {floor}), max residual {worst:.2e}")
    check(2, ok, "; ".join(parts))


# 3 ------------------------------------------------------------------ oracles


def test_criterion_3_unit_oracles():
    results = {}
    results["ewa"] = abs(ewa_reference([0.3, 0.5], 0.8, 1) - 0.74 / 1.8) <= 1e-12
    results["score"] = abs(float(prediction_score(0.4, 0.2)) - math.log(2)) <= 1e-12
    results["mask"] = (
        growth_mask([0.1, 0.2, 0.3, 0.4], 3) == 1
        and growth_mask([0.2, 0.2, 0.2, 0.2], 3) == 0
        and growth_mask([0.1, 0.3, 0.25, 0.4], 3) == 0
    )
    fused = bayesian_fusion(np.array([0.4, 0.3, 0.2, 0.1]), np.array([0, math.log(2), 0, 0]),
                            np.array([0, 1, 0, 0]), np.ones(4, bool))
    listed = np.array([1 / 3, 1 / 2, 1 / 6, 1 / 12])
    results["fusion"] = bool(np.max(np.abs(fused - listed)) <= 1e-9)
    results["tv"] = abs(tv_distance([0.5, 0.5], [0.9, 0.1]) - 0.4) <= 1e-15
    failed = [k for k, v in results.items() if not v]
    detail = f"{len(results) - len(failed)}/{len(results)} oracles exact"
    if not results["fusion"]:
        detail += (f"; fusion listed {np.round(listed, 6).tolist()} (sums to {listed.sum():.4f}), "
                   f"got {np.round(fused, 6).tolist()} = [4,6,2,1]/13")
    check(3, not failed, detail)


# 4 ------------------------------------------------------------------ no history


def test_criterion_4_empty_history_is_plain_sampling():
    gen = np.random.default_rng(404)
    worst = 0.0
    same_tokens = True
    for trial in range(1000):
        V = int(gen.integers(2, 65))
        W = int(gen.integers(1, 17))
        L = int(gen.integers(1, 6))
        N = int(gen.integers(1, L + 1))
        cfg = VPConfig(gamma=float(gen.uniform(0.05, 0.95)), L=L, N=N, topk_ratio=float(gen.uniform(0.01, 1.0)))
        dists = gen.dirichlet(np.full(V, float(gen.uniform(0.05, 2.0))), size=W)
        base = int(gen.integers(0, 100))
        positions = list(range(base, base + W))
        tokens, sampled = vp_draft(dists, positions, HistoryBuffer(L), cfg, SeededRng(trial))
        worst = max(worst, float(np.max(np.abs(sampled - dists))))
        ref = SJDDrafter().draft(positions, dists, SeededRng(trial))
        same_tokens &= bool(np.array_equal(tokens, ref.tokens))
    check(4, worst <= 1e-12 and same_tokens,
          f"max |p' - p| over 1000 states {worst:.1e}; draws identical to plain sampling: {same_tokens}")


# 5 ------------------------------------------------------------------ NFE


@pytest.fixture(scope="module")
def default_bench():
    cfg = ExperimentConfig(decoders=("sjd", "sjd-vp"), baseline="sjd")
    return cfg, run_experiment(cfg)


def test_criterion_5_nfe_non_inferiority(default_bench):
    _, rep = default_bench
    ratio = rep.ratio("sjd-vp", "sjd")
    per_seed = ", ".join(f"{r:.4f}" for r in rep.per_seed_ratio("sjd-vp", "sjd"))
    check(5, ratio <= 1.0,
          f"mean NFE sjd {rep.mean_nfe('sjd'):.3f}, sjd-vp {rep.mean_nfe('sjd-vp'):.3f}, "
          f"ratio {ratio:.4f} (need <= 1.00); per seed [{per_seed}]")


def test_default_bench_matches_golden(default_bench):
    cfg, rep = default_bench
    golden = json.loads((GOLDEN / "bench_default.json").read_text())
    assert golden["fingerprint"] == cfg.fingerprint()
    assert {d: rep.mean_nfe(d) for d in rep.decoders} == golden["mean_nfe"]
    assert rep.per_seed_ratio("sjd-vp", "sjd") == golden["per_seed_ratio"]


# 6 ------------------------------------------------------------------ determinism


BENCH_CFG = """\
vocab_size = 16
prompts = 10
length = 32
window = 8
seeds = 0-2
decoders = ar,sjd,sjd-vp
"""


def test_criterion_6_bench_is_byte_identical(tmp_path):
    cfg = tmp_path / "bench.cfg"
    cfg.write_text(BENCH_CFG)
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        subprocess.run([sys.executable, "-m", "sjdvp", "bench", "--config", str(cfg), "--out", str(out),
                        "--jsonl", "-q"], check=True, capture_output=True)
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir() if p.name != "timing.json")
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    check(6, same and {"summary.json", "per_seed.csv"} <= set(files),
          f"{len(files)} artifacts compared ({', '.join(files)}): {'identical' if same else 'DIFFER'}")


# 7 ------------------------------------------------------------------ analysis


def brute_force(path: Path, n_steps: int, max_n: int, comparisons: int, L: int) -> dict:
    """Recount every statistic straight from the JSON lines, without the analysis module."""
    lines = [json.loads(s) for s in path.read_text().splitlines()]
    cells = defaultdict(dict)  # (run, pos) -> {(iter, token): record}
    for r in lines[1:]:
        cells[(r["run"], r["pos"])][(r["iter"], r["token"])] = r
    grown = eligible = 0
    cont = {n: [0, 0, 0, 0] for n in range(1, max_n + 1)}  # correct events/hits, incorrect events/hits
    prec = {n: [0, 0] for n in range(1, max_n + 1)}
    mask_total = mask_bad = 0
    for cell in cells.values():
        iters = sorted({k[0] for k in cell})
        tokens = sorted({k[1] for k in cell})
        final = [t for t in tokens if cell[(iters[0], t)]["final"]][0]
        accepted = any(cell[(iters[-1], t)]["accepted"] for t in tokens)
        for t in tokens:
            traj = [cell[(i, t)]["prob"] for i in iters]
            up = [traj[k + 1] > traj[k] for k in range(len(traj) - 1)]
            if t == final and accepted:
                drafting = traj[:-1]
                if len(drafting) >= n_steps + 1:
                    eligible += 1
                    grown += all(drafting[k + 1] > drafting[k] for k in range(len(drafting) - n_steps - 1, len(drafting) - 1))
            for n in range(1, max_n + 1):
                for s in range(n, len(traj) - 1):
                    if all(up[s - n : s]):
                        slot = 0 if t == final else 2
                        cont[n][slot] += 1
                        cont[n][slot + 1] += up[s]
                for s in range(n, len(traj) - 1):
                    if all(up[s - n : s]):
                        prec[n][0] += 1
                        prec[n][1] += t == final
            for s, i in enumerate(iters):
                flag = cell[(i, t)]["masked"]
                if flag is None:
                    continue
                mask_total += 1
                seen = traj[max(0, s - L) : s + 1]
                want = len(seen) > comparisons and all(up[s - comparisons : s])
                mask_bad += int(want) != flag
    frac = lambda h, e: h / e if e else None
    return {
        "growth": (grown, eligible, frac(grown, eligible)),
        "continuation": [(n, frac(c[1], c[0]), frac(c[3], c[2]), c[0], c[2]) for n, c in cont.items()],
        "precision": [(n, frac(p[1], p[0]), p[0]) for n, p in prec.items()],
        "mask": (mask_total, mask_bad),
    }


def test_criterion_7_analysis_matches_brute_force(tmp_path):
    L, N = 3, 2
    model = build_markov_model(11, 1, 16, 0.5, 0.3)
    cfg = VPConfig(N=N, L=L, topk_ratio=0.25)
    path = tmp_path / "fixture.jsonl"
    with TrajectoryWriter(path, "fixture", {"decoder": "sjd-vp", "L": L, "comparisons": cfg.comparisons}) as w:
        for run in range(10):
            rec = TraceRecorder(w.write, tokens="all", run_id=f"0:{run}")
            run_speculative_jacobi(model, Prompt(run, (run,), 48), 8, VPDrafter(cfg), SeededRng.for_run(0, run), trace=rec)
    s = analyze(read_logs([path]), n_steps=N, max_n=5).to_dict()
    bf = brute_force(path, N, 5, cfg.comparisons, L)
    g = s["growth_fraction"]
    mine = {
        "growth": (g["grown"], g["eligible"], g["fraction"]),
        "continuation": [(c["n"], c["correct"], c["incorrect"], c["correct_events"], c["incorrect_events"])
                         for c in s["continuation"]],
        "precision": [(p["n"], p["precision"], p["events"]) for p in s["precision"]],
        "mask": (s["counts"]["mask_checked"], s["counts"]["mask_mismatches"]),
    }
    same = mine == bf
    total, bad = bf["mask"]
    check(7, same and bad == 0 and total > 0,
          f"pipeline vs brute force: {'identical' if same else 'DIFFER'}; "
          f"masked flags matching recomputation {total - bad}/{total}; growth fraction {g['fraction']}")


# 8 ------------------------------------------------------------------ remainder


def test_criterion_8_remainder_is_second_order():
    trials = list(itertools.islice((t for t in remainder_trials(None, 32, 1e-3, 2024) if t.gap_ok), 10_000))
    ratios = np.array([t.ratio for t in trials])
    ok = len(trials) == 10_000 and bool(np.all(ratios >= 3.5))
    check(8, ok, f"{len(trials)} gap trials; remainder ratio min {ratios.min():.3f}, "
                 f"median {np.median(ratios):.3f}, max {ratios.max():.3f} (need >= 3.5)")
