from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sjdvp.drafter import SJDDrafter, VPConfig, VPDrafter
from sjdvp.engine import (
    DecodeState,
    TraceRecorder,
    jacobi_step,
    run_greedy_jacobi,
    run_speculative_jacobi,
    verify_window,
)
from sjdvp.errors import InternalLogicError, SafetyValveError
from sjdvp.markov import (
    MarkovModel,
    Prompt,
    build_markov_model,
    exact_completion_table,
    greedy_decode,
    make_prompts,
    next_token_distribution,
    point_mass_model,
)
from sjdvp.prob import SeededRng


def table_model(rows) -> MarkovModel:
    t = np.asarray(rows, dtype=np.float64)
    t.setflags(write=False)
    return MarkovModel(1, t.shape[1], 0, 1.0, 0.0, t)


def test_jacobi_step_conditions_on_stale_window():
    m = build_markov_model(2, 1, 6)
    a, b, c = 4, 0, 5
    state = DecodeState([1, 3], [a, b, c], np.full((3, 6), 1 / 6))
    Q = jacobi_step(m, state)
    assert np.array_equal(Q[0], next_token_distribution(m, [1, 3]))
    assert np.array_equal(Q[1], m.table[a])
    assert np.array_equal(Q[2], m.table[b])
    assert jacobi_step(m, state, extra=1).shape == (4, 6)


def test_jacobi_step_point_mass():
    m = point_mass_model(4, [1, 2, 3, 0, 0])
    Q = jacobi_step(m, DecodeState([0], [3, 3, 1], np.full((3, 4), 0.25)))
    assert Q.argmax(axis=1).tolist() == [1, 0, 0]
    assert np.all(Q.max(axis=1) == 1)


@pytest.mark.parametrize("W", [1, 2, 5, 16])
def test_greedy_jacobi_constant_point_mass(W):
    m = point_mass_model(5, [3] * 6)
    prompt = Prompt(0, (1,), 40)
    res = run_greedy_jacobi(m, prompt, W)
    assert res.tokens == greedy_decode(m, prompt)
    windows = math.ceil(prompt.free / W)
    assert res.stats.nfe <= 2 * windows


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 2), st.integers(1, 12), st.floats(0.0, 0.6))
def test_greedy_jacobi_equals_greedy_decode(seed, order, W, attractor):
    m = build_markov_model(seed, order, 7, 0.5, attractor)
    prompt = Prompt(seed, (seed % 7,), 30)
    res = run_greedy_jacobi(m, prompt, W)
    assert res.tokens == greedy_decode(m, prompt)
    assert res.stats.nfe <= prompt.free
    assert sum(res.stats.accepted_runs) == prompt.free


def test_greedy_jacobi_golden_drifting_model():
    m = build_markov_model(2, 1, 16, 0.5, 0.3)
    prompt = make_prompts(1, 1, 64, 16)[0]
    res = run_greedy_jacobi(m, prompt, 8)
    assert res.tokens == greedy_decode(m, prompt)
    assert res.stats.nfe == 9
    assert res.stats.nfe < prompt.length


def test_greedy_jacobi_fallback_is_flagged():
    m = build_markov_model(0, 1, 16)
    prompt = Prompt(0, (1,), 40)
    res = run_greedy_jacobi(m, prompt, 8, max_iters=2)
    assert res.stats.fallback_windows == 1
    assert res.tokens == greedy_decode(m, prompt)
    assert "fallback" in res.stats.provenance


def test_verify_accepts_everything_when_draft_equals_target():
    m = build_markov_model(4, 1, 5)
    window = [2, 0, 4, 1]
    state = DecodeState([3], window, np.zeros((4, 5)))
    state.window_dists = jacobi_step(m, state)
    res = verify_window(m, state, SeededRng(0))
    assert res.accepted == 4 and res.correction is None


def test_verify_point_mass_drafts_from_true_conditionals():
    m = point_mass_model(4, [1, 2, 3, 0, 2])
    prompt = Prompt(0, (0,), 6)
    truth = greedy_decode(m, prompt)
    state = DecodeState([0], truth[1:], np.zeros((5, 4)))
    state.window_dists = jacobi_step(m, state)
    for s in range(20):
        assert verify_window(m, state, SeededRng(s)).accepted == 5


def test_verify_acceptance_probability_is_the_ratio():
    m = table_model([[0.2, 0.8], [0.5, 0.5], [0.2, 0.8]])
    state = DecodeState([0], [0], np.array([[0.4, 0.6]]))
    rng = SeededRng(2024)
    n = 100_000
    hits = sum(verify_window(m, state, rng).accepted for _ in range(n))
    assert abs(hits / n - 0.5) <= 0.005


def test_verify_correction_comes_from_residual():
    m = table_model([[0.9, 0.1], [0.5, 0.5], [0.9, 0.1]])
    state = DecodeState([0], [1], np.array([[0.5, 0.5]]))
    rng = SeededRng(1)
    for _ in range(200):
        res = verify_window(m, state, rng)
        assert res.accepted == 1 or res.correction == 0


def test_verify_rejects_zero_probability_drafts():
    m = build_markov_model(1, 1, 3)
    state = DecodeState([0], [1], np.array([[0.5, 0.0, 0.5]]))
    with pytest.raises(InternalLogicError):
        verify_window(m, state, SeededRng(0))


def test_window_of_one_costs_one_pass_per_token():
    m = build_markov_model(3, 1, 8)
    prompt = Prompt(0, (2, 5), 20)
    res = run_speculative_jacobi(m, prompt, 1, SJDDrafter(), SeededRng(4))
    assert res.stats.nfe == prompt.free
    assert res.stats.accepted + res.stats.corrections == prompt.free


@settings(max_examples=30)
@given(st.integers(0, 1000), st.integers(1, 10), st.sampled_from(["sjd", "vp"]))
def test_run_accounting(seed, W, which):
    m = build_markov_model(seed, 1, 6, 0.5, 0.3)
    prompt = Prompt(0, (seed % 6,), 25)
    drafter = SJDDrafter() if which == "sjd" else VPDrafter(VPConfig(N=1, L=2, topk_ratio=0.5))
    res = run_speculative_jacobi(m, prompt, W, drafter, SeededRng(seed))
    s = res.stats
    assert len(res.tokens) == prompt.length
    assert res.tokens[:1] == list(prompt.prefix)
    assert all(0 <= r <= W for r in s.accepted_runs)
    assert sum(s.accepted_runs) + s.corrections == prompt.free == s.generated
    assert s.nfe == s.iterations >= math.ceil(prompt.free / W)
    assert 0 <= s.acceptance_rate <= 1
    assert len(s.provenance) == prompt.free
    assert set(s.provenance) <= {"accept", "resample"}


def test_run_is_deterministic():
    m = build_markov_model(8, 1, 16, 0.5, 0.3)
    prompt = Prompt(3, (4,), 48)

    def go():
        tr = TraceRecorder(run_id="x")
        res = run_speculative_jacobi(m, prompt, 8, VPDrafter(VPConfig(N=1, L=2)), SeededRng(77), trace=tr)
        return res.tokens, res.stats.to_dict(), tr.records

    assert go() == go()


def test_safety_valve():
    m = build_markov_model(0, 1, 16)
    with pytest.raises(SafetyValveError):
        run_speculative_jacobi(m, Prompt(0, (1,), 40), 8, SJDDrafter(), SeededRng(0), max_iters=2)


def test_vp_strict_mode_is_lossless_when_the_mask_fires():
    m = build_markov_model(7, 1, 4, 0.5, 0.3)
    prompt = Prompt(0, (2,), 6)
    _, probs = exact_completion_table(m, prompt)
    n = 100_000
    counts = np.zeros(probs.shape[0])
    fires = 0
    cfg = VPConfig(N=1, L=1, topk_ratio=1.0)
    for i in range(n):
        res = run_speculative_jacobi(m, prompt, 4, VPDrafter(cfg), SeededRng.for_run(5, i))
        idx = 0
        for t in res.tokens[1:]:
            idx = idx * 4 + t
        counts[idx] += 1
        fires += res.stats.mask_fires
    tv = 0.5 * np.abs(counts / n - probs).sum()
    gen = np.random.default_rng(0)
    noise = np.mean([0.5 * np.abs(gen.multinomial(n, probs) / n - probs).sum() for _ in range(20)])
    assert fires > n / 4
    assert tv <= 1.2 * noise


def test_trace_records():
    m = build_markov_model(1, 1, 12, 0.5, 0.3)
    prompt = Prompt(0, (0,), 30)
    tr = TraceRecorder(tokens="all", run_id=9)
    res = run_speculative_jacobi(m, prompt, 6, VPDrafter(VPConfig(N=1, L=2)), SeededRng(3), trace=tr)
    recs = tr.records
    keys = {(r["pos"], r["iter"], r["token"]) for r in recs}
    assert len(keys) == len(recs)
    finals = {r["pos"]: r["token"] for r in recs if r["final"]}
    assert [finals[p] for p in range(1, 30)] == res.tokens[1:]
    by_pos: dict[int, set] = {}
    for r in recs:
        by_pos.setdefault(r["pos"], set()).add(r["iter"])
        assert (r["masked"] is None) == (r["p_after"] is None)
    for pos, iters in by_pos.items():
        last = max(iters)
        flags = [r for r in recs if r["pos"] == pos and r["iter"] == last and (r["accepted"] or r["resampled"])]
        assert len(flags) == 1 and flags[0]["token"] == finals[pos]
    # every position has exactly V tokens per snapshot
    assert len(recs) == 12 * sum(len(v) for v in by_pos.values())
    with pytest.raises(ValueError):
        TraceRecorder(tokens="some")
