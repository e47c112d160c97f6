"""Token drafters for speculative Jacobi decoding.

:class:`SJDDrafter` samples each window position straight from the model's
current (stale-context) distribution. :class:`VPDrafter` first tilts that
distribution toward top-k candidates whose probability has been rising
across recent Jacobi iterations at the same absolute position:

    pbar(x) = sum_k gamma^k p_{t-k}(x) / sum_k gamma^k        (decayed reference)
    S(x)    = log p_t(x) - log pbar(x)                          (prediction score)
    M(x)    = 1 iff p_t(x) rose strictly over the last N steps  (growth mask)
    p'(x)  ∝ p_t(x) * exp(M(x) S(x))   for x in the candidate set, p_t(x) otherwise

and samples from ``p'``.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, InvalidInputError
from .prob import LOG_FLOOR, SeededRng, candidate_mask, sample_rows

VERIFY_MODES = ("strict", "unfused")
GROWTH_READINGS = ("n", "n+1")


@dataclass(frozen=True)
class VPConfig:
    """Drafter knobs.

    ``growth_reading`` picks how ``N`` maps to comparisons: ``"n"`` means N
    strict increases over the last N+1 snapshots, ``"n+1"`` means N+1
    increases (needs ``L >= N + 1``). ``relaxed`` admits the out-of-range
    values used in ablation sweeps (gamma=1, N=0, too few snapshots for the
    mask) with a warning instead of an error. ``verify_mode="strict"``
    verifies drafts against the fused distribution they were sampled from;
    ``"unfused"`` verifies against the raw model distribution, which can bias
    the output law whenever the mask fires.
    """

    gamma: float = 0.8
    L: int = 3
    N: int = 3
    topk_ratio: float = 0.10
    eps: float = LOG_FLOOR
    verify_mode: str = "strict"
    growth_reading: str = "n"
    ewa_include_current: bool = True
    score_clamp: float | None = None
    relaxed: bool = False

    def __post_init__(self):
        problems = []
        soft = []
        if self.verify_mode not in VERIFY_MODES:
            problems.append(f"verify_mode must be one of {VERIFY_MODES}")
        if self.growth_reading not in GROWTH_READINGS:
            problems.append(f"growth_reading must be one of {GROWTH_READINGS}")
        if not 0 < self.gamma <= 1:
            problems.append(f"gamma must lie in (0, 1), got {self.gamma}")
        elif self.gamma == 1:
            soft.append("gamma=1 (flat average)")
        if self.L < 1:
            problems.append(f"L must be >= 1, got {self.L}")
        if self.N < 0:
            problems.append(f"N must be >= 1, got {self.N}")
        elif self.N == 0:
            soft.append("N=0 (growth mask disabled)")
        if self.L >= 1 and self.N >= 0 and self.comparisons > self.L:
            soft.append(f"N={self.N} needs {self.comparisons} comparisons but L={self.L} keeps too few snapshots")
        if not 0 < self.topk_ratio <= 1:
            problems.append(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")
        if not self.eps > 0:
            problems.append("eps must be positive")
        if self.score_clamp is not None and not self.score_clamp > 0:
            problems.append("score_clamp must be positive when set")
        if not self.ewa_include_current and self.L < 1:
            problems.append("history-only reference needs L >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        if soft:
            if not self.relaxed:
                raise ConfigError("; ".join(soft))
            warnings.warn("relaxed VPConfig: " + "; ".join(soft), stacklevel=3)

    @property
    def comparisons(self) -> int:
        return self.N + 1 if self.growth_reading == "n+1" else self.N


def ewa_reference(values: Sequence[float], gamma: float, L: int, include_current: bool = True) -> float:
    """Decay-weighted reference over a trajectory ordered oldest to newest.

    The last entry is the current probability. With ``include_current`` the
    weights are ``gamma**k`` for ``k = 0..K`` counting back from the current
    value, ``K = min(L, len(values) - 1)``; otherwise the current value is
    dropped and the most recent history entry gets weight 1.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape[0] == 0:
        raise InvalidInputError("need at least the current value")
    if not include_current:
        vals = vals[:-1]
        if vals.shape[0] == 0:
            raise InvalidInputError("history-only reference needs at least one past value")
    K = min(L, vals.shape[0] - 1) if include_current else min(L, vals.shape[0]) - 1
    recent = vals[::-1][: K + 1]
    w = gamma ** np.arange(K + 1)
    return float(np.dot(w, recent) / w.sum())


def ewa_matrix(traj: np.ndarray, gamma: float, L: int, include_current: bool = True) -> np.ndarray:
    """Row-wise :func:`ewa_reference` for a ``(snapshots, V)`` trajectory."""
    rows = traj if include_current else traj[:-1]
    K = min(L, rows.shape[0] - 1) if include_current else min(L, rows.shape[0]) - 1
    recent = rows[::-1][: K + 1]
    w = gamma ** np.arange(K + 1)
    return (w @ recent) / w.sum()


def prediction_score(p_t: float | np.ndarray, pbar: float | np.ndarray, eps: float = LOG_FLOOR):
    """``log max(p_t, eps) - log max(pbar, eps)``."""
    return np.log(np.maximum(p_t, eps)) - np.log(np.maximum(pbar, eps))


def growth_mask(trajectory: Sequence[float], n: int) -> int:
    """1 iff the last ``n`` steps of ``trajectory`` are strict increases.

    Fewer than ``n + 1`` values means 0: the mask never extrapolates.
    """
    vals = list(trajectory)
    if len(vals) < n + 1:
        return 0
    tail = vals[len(vals) - n - 1 :]
    return int(all(b > a for a, b in zip(tail, tail[1:])))


def growth_mask_matrix(traj: np.ndarray, n: int) -> np.ndarray:
    if traj.shape[0] < n + 1:
        return np.zeros(traj.shape[1], dtype=bool)
    if n == 0:
        return np.ones(traj.shape[1], dtype=bool)
    return np.all(np.diff(traj[-(n + 1):], axis=0) > 0, axis=0)


def boost_vector(S: np.ndarray, M: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Log-space additive boost ``M * S`` restricted to the candidate set."""
    cand = _as_bool_mask(candidates, S.shape[0])
    return np.where(cand & (np.asarray(M) != 0), S, 0.0)


def bayesian_fusion(p_t: np.ndarray, S: np.ndarray, M: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Posterior drafting distribution ``softmax(log p_t + M * S on candidates)``.

    Computed multiplicatively so zero-probability tokens stay impossible.
    """
    p_t = np.asarray(p_t, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if p_t.shape != S.shape or np.shape(M) != p_t.shape:
        raise InvalidInputError("p_t, S and M must have the same length")
    b = boost_vector(S, np.asarray(M), candidates)
    return _tilt(p_t, b)


def _tilt(p: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not b.any():
        return p.copy()
    w = p * np.exp(b - b.max())
    return w / w.sum()


def _as_bool_mask(candidates: np.ndarray, V: int) -> np.ndarray:
    c = np.asarray(candidates)
    if c.dtype == bool and c.shape == (V,):
        return c
    mask = np.zeros(V, dtype=bool)
    mask[c.astype(np.int64)] = True
    return mask


class HistoryBuffer:
    """Per-absolute-position ring of the last ``L`` drafting distributions."""

    def __init__(self, L: int):
        self.L = L
        self._rings: dict[int, deque] = {}

    def get(self, pos: int) -> list[np.ndarray]:
        ring = self._rings.get(pos)
        return list(ring) if ring else []

    def push(self, pos: int, dist: np.ndarray) -> None:
        ring = self._rings.get(pos)
        if ring is None:
            ring = self._rings[pos] = deque(maxlen=self.L)
        ring.append(dist)

    def clear(self, pos: int) -> None:
        self._rings.pop(pos, None)

    def release_below(self, base: int) -> None:
        """Drop every position that has been committed to the prefix."""
        for pos in [p for p in self._rings if p < base]:
            del self._rings[pos]

    def reset(self) -> None:
        self._rings.clear()

    def __len__(self) -> int:
        return len(self._rings)

    def positions(self) -> list[int]:
        return sorted(self._rings)


@dataclass
class DraftDebug:
    """Per-position internals recorded for the trajectory log."""

    pbar: np.ndarray
    score: np.ndarray
    mask: np.ndarray
    in_candidates: np.ndarray
    p_after: np.ndarray


@dataclass
class DraftOutput:
    tokens: np.ndarray
    sample_dists: np.ndarray
    verify_dists: np.ndarray
    debug: list[DraftDebug | None] | None = None


class Drafter(Protocol):
    """Anything that turns current window distributions into draft tokens."""

    name: str

    def reset(self) -> None: ...

    def draft(self, positions: Sequence[int], dists: np.ndarray, rng: SeededRng, debug: bool = False) -> DraftOutput: ...

    def release_below(self, base: int) -> None: ...


class SJDDrafter:
    """Baseline: sample each position from its current distribution."""

    name = "sjd"

    def reset(self) -> None:
        pass

    def draft(self, positions, dists, rng, debug=False):
        tokens = sample_rows(dists, rng)
        return DraftOutput(tokens, dists, dists, None)

    def release_below(self, base: int) -> None:
        pass


@dataclass
class VPCounters:
    mask_fires: int = 0
    negative_score_fires: int = 0
    positions_tilted: int = 0
    drafted_positions: int = 0


class VPDrafter:
    """Verification-prediction drafter with a position-keyed history buffer."""

    name = "sjd-vp"

    def __init__(self, config: VPConfig | None = None):
        self.config = config or VPConfig()
        self.history = HistoryBuffer(self.config.L)
        self.counters = VPCounters()
        self.negative_examples: list[tuple[int, int, float]] = []

    def reset(self) -> None:
        self.history.reset()
        self.counters = VPCounters()
        self.negative_examples = []

    def release_below(self, base: int) -> None:
        self.history.release_below(base)

    def posterior(self, pos: int, p_t: np.ndarray, debug: bool = False) -> tuple[np.ndarray, DraftDebug | None]:
        """Fused drafting distribution for one position (history is not updated)."""
        cfg = self.config
        hist = self.history.get(pos)
        n = cfg.comparisons
        if len(hist) < n and not debug:
            return p_t, None
        traj = np.vstack(hist + [p_t]) if hist else p_t[None, :]
        M = growth_mask_matrix(traj, n)
        cand = candidate_mask(p_t, cfg.topk_ratio)
        active = M & cand
        if not active.any() and not debug:
            return p_t, None
        if cfg.ewa_include_current or traj.shape[0] > 1:
            pbar = ewa_matrix(traj, cfg.gamma, cfg.L, cfg.ewa_include_current)
        else:
            pbar = p_t.copy()
        S = prediction_score(p_t, pbar, cfg.eps)
        if cfg.score_clamp is not None:
            S = np.clip(S, -cfg.score_clamp, cfg.score_clamp)
        b = np.where(active, S, 0.0)
        if active.any():
            self.counters.mask_fires += int(active.sum())
            self.counters.positions_tilted += 1
            neg = active & (S < 0)
            if neg.any():
                self.counters.negative_score_fires += int(neg.sum())
                for x in np.flatnonzero(neg)[:4]:
                    if len(self.negative_examples) < 64:
                        self.negative_examples.append((pos, int(x), float(S[x])))
        p_after = _tilt(p_t, b) if active.any() else p_t
        dbg = DraftDebug(pbar, S, M.astype(np.int8), cand, p_after) if debug else None
        return p_after, dbg

    def draft(self, positions, dists, rng, debug=False):
        n = len(positions)
        post = np.empty_like(dists)
        dbgs: list[DraftDebug | None] | None = [] if debug else None
        for i, pos in enumerate(positions):
            post[i], dbg = self.posterior(int(pos), dists[i], debug)
            if dbgs is not None:
                dbgs.append(dbg)
        tokens = sample_rows(post, rng)
        for i, pos in enumerate(positions):
            self.history.push(int(pos), dists[i])
        self.counters.drafted_positions += n
        verify = post if self.config.verify_mode == "strict" else dists
        return DraftOutput(tokens, post, verify, dbgs)


def vp_draft(
    window_dists: np.ndarray,
    positions: Sequence[int],
    history: HistoryBuffer,
    config: VPConfig,
    rng: SeededRng,
) -> tuple[np.ndarray, np.ndarray]:
    """Functional form: draft a window against an external history buffer.

    Returns ``(tokens, sampling_dists)`` and appends the current
    distributions to ``history``.
    """
    if history.L != config.L:
        raise ConfigError("history buffer length does not match config.L")
    drafter = VPDrafter(config)
    drafter.history = history
    out = drafter.draft(positions, np.asarray(window_dists, dtype=np.float64), rng)
    return out.tokens, out.sample_dists


__all__ = [
    "VPConfig",
    "HistoryBuffer",
    "SJDDrafter",
    "VPDrafter",
    "Drafter",
    "DraftOutput",
    "DraftDebug",
    "ewa_reference",
    "ewa_matrix",
    "prediction_score",
    "growth_mask",
    "growth_mask_matrix",
    "bayesian_fusion",
    "boost_vector",
    "vp_draft",
]
