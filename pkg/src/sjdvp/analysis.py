"""Trajectory statistics computed from a :class:`~sjdvp.tracelog.TrajectoryLog`.

A position's snapshots are the parallel passes that produced a
distribution for it, ordered by iteration. The last one is the pass that
verified (or corrected) the committed token; the earlier ones are the
snapshots the drafter sampled from. "Growth" is always a strict increase.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import AnalysisInputError
from .tracelog import TrajectoryLog

# Published large-model observations, kept for side-by-side reading only.
REFERENCE_VALUES = {
    "growth_fraction": 0.914,
    "selection_precision_n2": 0.7276,
    "selection_precision_n3": 0.9635,
}


@dataclass
class PositionTrace:
    run: object
    pos: int
    iters: list[int]
    final_token: int
    provenance: str | None
    probs: dict[int, list[float]]
    masked: dict[int, list[int | None]]

    def drafting(self, token: int) -> list[float]:
        return self.probs[token][:-1]


def index_positions(log: TrajectoryLog) -> list[PositionTrace]:
    """Group records into per-position trajectories, sorted by (run, pos)."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in log.records:
        groups[(str(r["run"]), r["pos"])].append(r)
    out = []
    for (run, pos), recs in sorted(groups.items()):
        iters = sorted({r["iter"] for r in recs})
        slot = {it: i for i, it in enumerate(iters)}
        probs: dict[int, list[float]] = {}
        masked: dict[int, list[int | None]] = {}
        final = None
        prov = None
        for r in recs:
            tok = r["token"]
            if tok not in probs:
                probs[tok] = [float("nan")] * len(iters)
                masked[tok] = [None] * len(iters)
            probs[tok][slot[r["iter"]]] = r["prob"]
            masked[tok][slot[r["iter"]]] = r["masked"]
            if r["final"]:
                final = tok
            if r["accepted"]:
                prov = "accept"
            elif r["resampled"]:
                prov = "resample"
        if final is None:
            raise AnalysisInputError(f"run {run} position {pos}: no record marks the final token")
        for tok, ps in probs.items():
            if any(p != p for p in ps):
                raise AnalysisInputError(f"run {run} position {pos}: token {tok} missing from some snapshots")
        out.append(PositionTrace(recs[0]["run"], pos, iters, final, prov, probs, masked))
    return out


def strictly_increasing(values: Sequence[float]) -> bool:
    return all(b > a for a, b in zip(values, values[1:]))


@dataclass
class GrowthFraction:
    fraction: float | None
    grown: int
    eligible: int
    excluded: int
    accepted: int


def growth_fraction_of(trajectories: Iterable[Sequence[float]], n_steps: int) -> GrowthFraction:
    """Share of trajectories whose last ``n_steps`` comparisons are all increases."""
    if n_steps < 1:
        raise AnalysisInputError("n_steps must be >= 1")
    grown = eligible = excluded = 0
    for traj in trajectories:
        if len(traj) < n_steps + 1:
            excluded += 1
            continue
        eligible += 1
        grown += strictly_increasing(traj[-(n_steps + 1):])
    total = eligible + excluded
    return GrowthFraction(grown / eligible if eligible else None, grown, eligible, excluded, total)


def accepted_growth_fraction(positions: Sequence[PositionTrace], n_steps: int) -> GrowthFraction:
    """Growth over the drafting snapshots of every verification-accepted token."""
    return growth_fraction_of(
        (p.drafting(p.final_token) for p in positions if p.provenance == "accept"), n_steps
    )


@dataclass
class Rate:
    events: int = 0
    hits: int = 0

    @property
    def fraction(self) -> float | None:
        return self.hits / self.events if self.events else None


@dataclass
class Continuation:
    n: int
    correct: Rate = field(default_factory=Rate)
    incorrect: Rate = field(default_factory=Rate)


def continuation_probability(positions: Sequence[PositionTrace], n: int) -> Continuation:
    """P(next snapshot increases | the last ``n`` comparisons increased).

    Uses every snapshot, including the verification pass, and splits by
    whether the token is the one committed at that position.
    """
    if n < 1:
        raise AnalysisInputError("n must be >= 1")
    res = Continuation(n)
    for p in positions:
        for tok, traj in p.probs.items():
            bucket = res.correct if tok == p.final_token else res.incorrect
            for t in range(n, len(traj) - 1):
                if strictly_increasing(traj[t - n : t + 1]):
                    bucket.events += 1
                    bucket.hits += traj[t + 1] > traj[t]
    return res


def selection_precision(positions: Sequence[PositionTrace], n: int) -> Rate:
    """Among drafting snapshots where a token shows ``n`` increases, how often it is the committed one.

    A snapshot with several qualifying tokens contributes one event per token.
    """
    if n < 1:
        raise AnalysisInputError("n must be >= 1")
    rate = Rate()
    for p in positions:
        for tok in p.probs:
            traj = p.drafting(tok)
            for t in range(n, len(traj)):
                if strictly_increasing(traj[t - n : t + 1]):
                    rate.events += 1
                    rate.hits += tok == p.final_token
    return rate


@dataclass
class MaskCheck:
    checked: int
    mismatches: list[tuple]


def mask_crosscheck(positions: Sequence[PositionTrace], comparisons: int, L: int) -> MaskCheck:
    """Recompute the growth mask from logged probabilities and compare with the drafter's flag.

    The drafter sees at most ``L`` earlier snapshots plus the current one,
    so a mask needing more than ``L`` comparisons can never fire.
    """
    checked = 0
    bad = []
    for p in positions:
        for tok, flags in p.masked.items():
            traj = p.probs[tok]
            for s, flag in enumerate(flags):
                if flag is None:
                    continue
                checked += 1
                window = traj[max(0, s - L) : s + 1]
                want = int(
                    len(window) >= comparisons + 1
                    and strictly_increasing(window[len(window) - comparisons - 1 :])
                )
                if want != flag:
                    bad.append((p.run, p.pos, p.iters[s], tok, flag, want))
    return MaskCheck(checked, bad)


@dataclass
class AnalysisSummary:
    fingerprint: str
    n_steps: int
    growth: GrowthFraction
    continuation: list[Continuation]
    precision: list[tuple[int, Rate]]
    mask: MaskCheck | None
    positions: int

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "reference_values": REFERENCE_VALUES,
            "n_steps": self.n_steps,
            "growth_fraction": asdict(self.growth),
            "continuation": [
                {
                    "n": c.n,
                    "correct": c.correct.fraction,
                    "incorrect": c.incorrect.fraction,
                    "correct_events": c.correct.events,
                    "incorrect_events": c.incorrect.events,
                }
                for c in self.continuation
            ],
            "precision": [{"n": n, "precision": r.fraction, "events": r.events, "hits": r.hits} for n, r in self.precision],
            "counts": {
                "positions": self.positions,
                "mask_checked": self.mask.checked if self.mask else 0,
                "mask_mismatches": len(self.mask.mismatches) if self.mask else 0,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "continuation_correct", "continuation_incorrect", "selection_precision"])
        prec = dict(self.precision)
        for c in self.continuation:
            r = prec.get(c.n)
            w.writerow([c.n, _fmt(c.correct.fraction), _fmt(c.incorrect.fraction), _fmt(r.fraction if r else None)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def analyze(log: TrajectoryLog, n_steps: int | None = None, max_n: int = 5) -> AnalysisSummary:
    """Every statistic for one log; ``n_steps`` defaults to the drafter's comparison count."""
    meta = log.meta
    if n_steps is None:
        n_steps = int(meta.get("comparisons") or 3)
    positions = index_positions(log)
    mask = None
    if "comparisons" in meta and "L" in meta:
        mask = mask_crosscheck(positions, int(meta["comparisons"]), int(meta["L"]))
    ns = range(1, max_n + 1)
    return AnalysisSummary(
        log.fingerprint,
        n_steps,
        accepted_growth_fraction(positions, n_steps),
        [continuation_probability(positions, n) for n in ns],
        [(n, selection_precision(positions, n)) for n in ns],
        mask,
        len(positions),
    )


__all__ = [
    "REFERENCE_VALUES",
    "PositionTrace",
    "GrowthFraction",
    "Rate",
    "Continuation",
    "MaskCheck",
    "AnalysisSummary",
    "index_positions",
    "strictly_increasing",
    "growth_fraction_of",
    "accepted_growth_fraction",
    "continuation_probability",
    "selection_precision",
    "mask_crosscheck",
    "analyze",
]
