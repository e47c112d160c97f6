"""Jacobi and speculative Jacobi decoding over a toy model.

One loop iteration of :func:`run_speculative_jacobi` is one parallel model
evaluation over ``prefix + window``. That single pass gives

* the verification targets ``q_i = p(. | prefix, window[:i])`` for every
  drafted token, and
* the current (stale-context) distribution for every position still open
  after verification, plus one position past the window,

so NFE equals the number of loop iterations. Verification walks the window
left to right, accepting ``x_i`` with probability ``min(1, q_i(x_i) / d_i(x_i))``
where ``d_i`` is the law ``x_i`` was drawn from; the first rejection emits a
correction drawn from ``normalize(max(0, q_i - d_i))`` and ends the step.
The window is then refilled to ``W``: positions covered by the pass are
redrafted by the drafter, positions past it start from a uniform draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .drafter import DraftDebug, Drafter
from .errors import InternalLogicError, SafetyValveError
from .markov import MarkovModel, Prompt
from .prob import LOG_FLOOR, SeededRng, residual_distribution, sample, sample_rows, uniform
from .stats import RunStats

TRACK_TOP = 5


@dataclass
class DecodeState:
    prefix: list[int]
    window: list[int]
    window_dists: np.ndarray
    iteration: int = 0

    @property
    def base(self) -> int:
        return len(self.prefix)


@dataclass
class VerifyResult:
    accepted: int
    correction: int | None
    dists: np.ndarray


def jacobi_step(model: MarkovModel, state: DecodeState, extra: int = 0) -> np.ndarray:
    """Distributions for every window position (plus ``extra`` beyond), one parallel pass."""
    base = state.base
    return model.conditionals(state.prefix + list(state.window), base, base + len(state.window) + extra)


def verify_window(
    model: MarkovModel,
    state: DecodeState,
    rng: SeededRng,
    eps: float = LOG_FLOOR,
    dists: np.ndarray | None = None,
) -> VerifyResult:
    """Left-to-right rejection sampling of ``state.window`` against the model.

    ``dists`` may carry a precomputed pass over the window (rows beyond the
    window are ignored). Draws one uniform per checked token and one more
    for a correction.
    """
    Q = jacobi_step(model, state) if dists is None else dists
    accepted = 0
    for i, x in enumerate(state.window):
        d = state.window_dists[i]
        dx = d[x]
        if dx <= 0:
            raise InternalLogicError(f"drafted token {x} at window slot {i} has zero draft probability")
        if rng.random() < Q[i][x] / max(dx, eps):
            accepted += 1
            continue
        return VerifyResult(accepted, sample(residual_distribution(Q[i], d), rng), Q)
    return VerifyResult(accepted, None, Q)


@dataclass
class _Snapshot:
    iteration: int
    dist: np.ndarray
    drafted: int | None = None
    sample_dist: np.ndarray | None = None
    debug: DraftDebug | None = None


class TraceRecorder:
    """Collects per-position probability trajectories and emits log records.

    Records for a position are emitted once it is committed, in
    ``(iteration, token)`` order. ``tokens="tracked"`` logs, at every
    snapshot, the union over the position's lifetime of the top-5 tokens,
    the candidate set, every drafted token and the final token;
    ``tokens="all"`` logs the whole vocabulary.
    """

    def __init__(self, sink: Callable[[dict], None] | None = None, tokens: str = "tracked", run_id: int = 0):
        if tokens not in ("tracked", "all"):
            raise ValueError("tokens must be 'tracked' or 'all'")
        self.records: list[dict] = []
        self.sink = sink if sink is not None else self.records.append
        self.tokens = tokens
        self.run_id = run_id
        self._snaps: dict[int, list[_Snapshot]] = {}

    def observe(self, pos: int, iteration: int, dist: np.ndarray) -> None:
        self._snaps.setdefault(pos, []).append(_Snapshot(iteration, dist))

    def drafted(self, pos: int, token: int, sample_dist: np.ndarray, debug: DraftDebug | None) -> None:
        snap = self._snaps[pos][-1]
        snap.drafted = int(token)
        snap.sample_dist = sample_dist
        snap.debug = debug

    def finalize(self, pos: int, token: int, provenance: str) -> None:
        snaps = self._snaps.pop(pos, [])
        if not snaps:
            return
        V = snaps[0].dist.shape[0]
        if self.tokens == "all":
            tracked = range(V)
        else:
            keep = {int(token)}
            for s in snaps:
                keep.update(int(t) for t in np.argsort(-s.dist, kind="stable")[:TRACK_TOP])
                if s.drafted is not None:
                    keep.add(s.drafted)
                if s.debug is not None:
                    keep.update(int(t) for t in np.flatnonzero(s.debug.in_candidates))
            tracked = sorted(keep)
        last = len(snaps) - 1
        for si, s in enumerate(snaps):
            dbg = s.debug
            for x in tracked:
                is_final_snap = si == last
                self.sink(
                    {
                        "run": self.run_id,
                        "pos": pos,
                        "iter": s.iteration,
                        "token": x,
                        "prob": float(s.dist[x]),
                        "drafted": s.drafted == x,
                        "accepted": is_final_snap and x == token and provenance == "accept",
                        "resampled": is_final_snap and x == token and provenance == "resample",
                        "final": x == token,
                        "masked": int(dbg.mask[x]) if dbg is not None else None,
                        "in_candidates": bool(dbg.in_candidates[x]) if dbg is not None else None,
                        "pbar": float(dbg.pbar[x]) if dbg is not None else None,
                        "score": float(dbg.score[x]) if dbg is not None else None,
                        "p_after": float(s.sample_dist[x]) if s.sample_dist is not None else None,
                    }
                )


@dataclass
class DecodeResult:
    tokens: list[int]
    stats: RunStats
    trace: list[dict] | None = None
    extra: dict = field(default_factory=dict)


def run_speculative_jacobi(
    model: MarkovModel,
    prompt: Prompt,
    W: int,
    drafter: Drafter,
    rng: SeededRng,
    *,
    max_iters: int | None = None,
    trace: TraceRecorder | None = None,
    eps: float = LOG_FLOOR,
) -> DecodeResult:
    """Draft-then-verify loop; with :class:`SJDDrafter` this is plain SJD."""
    if W < 1:
        raise ValueError("window size must be >= 1")
    V = model.vocab_size
    T = prompt.length
    seq = list(prompt.prefix)
    limit = max_iters if max_iters is not None else 16 * T
    stats = RunStats()
    drafter.reset()
    unif = uniform(V)
    want_debug = trace is not None

    n0 = min(W, T - len(seq))
    tokens = [int(t) for t in sample_rows(np.tile(unif, (n0, 1)), rng)]
    vdists = np.tile(unif, (n0, 1))
    it = 0
    while len(seq) < T:
        if it >= limit:
            raise SafetyValveError(
                f"prompt {prompt.id}: no completion after {it} iterations ({len(seq)}/{T} tokens)"
            )
        it += 1
        base = len(seq)
        n = len(tokens)
        stop = min(base + n + 1, T)
        Q = model.conditionals(seq + tokens, base, stop)
        stats.nfe += 1
        if trace is not None:
            for j in range(stop - base):
                trace.observe(base + j, it, Q[j])

        state = DecodeState(seq, tokens, vdists, it)
        res = verify_window(model, state, rng, eps, dists=Q)
        stats.drafted += res.accepted + (res.correction is not None)
        stats.accepted += res.accepted
        stats.accepted_runs.append(res.accepted)
        seq.extend(tokens[: res.accepted])
        stats.provenance.extend(["accept"] * res.accepted)
        if res.correction is not None:
            seq.append(res.correction)
            stats.corrections += 1
            stats.provenance.append("resample")
        if trace is not None:
            for j in range(base, len(seq)):
                trace.finalize(j, seq[j], stats.provenance[j - len(prompt.prefix)])
        drafter.release_below(len(seq))
        if len(seq) >= T:
            break

        s = len(seq) - base
        new_base = len(seq)
        remaining = min(W, T - new_base)
        m_avail = min(stop - new_base, remaining)
        positions = list(range(new_base, new_base + m_avail))
        out = drafter.draft(positions, Q[s : s + m_avail], rng, debug=want_debug)
        tokens = [int(t) for t in out.tokens]
        vdists = out.verify_dists
        if trace is not None:
            for i, pos in enumerate(positions):
                trace.drafted(pos, tokens[i], out.sample_dists[i], out.debug[i] if out.debug else None)
        n_init = remaining - m_avail
        if n_init > 0:
            tokens += [int(t) for t in sample_rows(np.tile(unif, (n_init, 1)), rng)]
            vdists = np.vstack([vdists, np.tile(unif, (n_init, 1))])

    stats.iterations = it
    stats.generated = len(seq) - len(prompt.prefix)
    counters = getattr(drafter, "counters", None)
    if counters is not None:
        stats.mask_fires = counters.mask_fires
        stats.negative_score_fires = counters.negative_score_fires
    return DecodeResult(seq, stats, trace.records if trace is not None else None)


def run_greedy_jacobi(
    model: MarkovModel,
    prompt: Prompt,
    W: int,
    max_iters: int | None = None,
) -> DecodeResult:
    """Greedy Jacobi iteration over a sliding window.

    Each pass replaces every window token by the argmax given the current
    guesses. Position ``i`` has reached its fixed point once all earlier
    positions matched their argmax on that pass, so those tokens (plus the
    first mismatch, whose context was exact) are committed and the window
    slides. New tail slots start from the argmax one past the window. After
    ``max_iters`` passes (default ``16 * T``) the rest is decoded
    sequentially and counted in ``fallback_windows``.
    """
    if W < 1:
        raise ValueError("window size must be >= 1")
    T = prompt.length
    seq = list(prompt.prefix)
    stats = RunStats()
    limit = max_iters if max_iters is not None else 16 * T
    window = [0] * min(W, T - len(seq))
    while len(seq) < T:
        if stats.iterations >= limit:
            stats.fallback_windows += 1
            while len(seq) < T:
                seq.append(int(np.argmax(model.table[model.context_index(seq)])))
                stats.nfe += 1
                stats.provenance.append("fallback")
            break
        base = len(seq)
        n = len(window)
        stop = min(base + n + 1, T)
        new = [int(t) for t in np.argmax(model.conditionals(seq + window, base, stop), axis=1)]
        stats.nfe += 1
        stats.iterations += 1
        k = 0
        while k < n - 1 and window[k] == new[k]:
            k += 1
        seq.extend(new[: k + 1])
        stats.accepted_runs.append(k + 1)
        stats.provenance.extend(["jacobi"] * (k + 1))
        remaining = min(W, T - len(seq))
        window = new[k + 1 : k + 1 + remaining]
        window += [new[-1]] * (remaining - len(window))
    stats.generated = T - len(prompt.prefix)
    return DecodeResult(seq, stats)


__all__: Sequence[str] = (
    "DecodeState",
    "DecodeResult",
    "TraceRecorder",
    "VerifyResult",
    "jacobi_step",
    "verify_window",
    "run_speculative_jacobi",
    "run_greedy_jacobi",
)
