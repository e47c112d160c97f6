"""Probability-vector primitives used by every other module.

Distributions are plain 1-D ``float64`` numpy arrays. Functions here never
mutate their inputs; anything returned is a fresh array.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import InternalLogicError, InvalidInputError

LOG_FLOOR = 1e-12
SUM_TOL = 1e-9

ArrayLike = Sequence[float] | np.ndarray


class SeededRng:
    """Single-owner random stream with a reproducible seed.

    Every sampling routine in the package pulls uniforms from here, one per
    draw, so two runs that make the same calls see the same numbers.
    """

    __slots__ = ("seed", "_gen")

    def __init__(self, seed: int | Sequence[int]):
        if isinstance(seed, (int, np.integer)):
            if seed < 0 or seed >= 2**64:
                raise InvalidInputError(f"seed must be a 64-bit unsigned integer, got {seed}")
            self.seed: int | tuple[int, ...] = int(seed)
        else:
            self.seed = tuple(int(s) for s in seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    @classmethod
    def for_run(cls, *key: int) -> "SeededRng":
        """Derive an independent stream from a tuple of integers (seed, prompt id, ...)."""
        return cls(tuple(key))

    def random(self) -> float:
        return float(self._gen.random())

    def randoms(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


def check_distribution(d: ArrayLike, name: str = "distribution") -> np.ndarray:
    """Return ``d`` as a float64 array, raising if it is not on the simplex."""
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise InvalidInputError(f"{name} must be a 1-D vector with at least 2 entries")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(arr < 0):
        raise InvalidInputError(f"{name} has negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise InvalidInputError(f"{name} sums to {total!r}, expected 1")
    return arr


def is_distribution(d: ArrayLike, tol: float = SUM_TOL) -> bool:
    arr = np.asarray(d, dtype=np.float64)
    return bool(
        arr.ndim == 1
        and arr.shape[0] >= 2
        and np.all(np.isfinite(arr))
        and np.all(arr >= 0)
        and abs(float(arr.sum()) - 1.0) <= tol
    )


def normalize(weights: ArrayLike) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise InvalidInputError("cannot normalize a vector with non-positive total mass")
    return w / total


def softmax(logits: ArrayLike) -> np.ndarray:
    """Shift-invariant softmax over a finite logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or not np.all(np.isfinite(z)):
        raise InvalidInputError("softmax needs a finite 1-D logit vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_probs(d: ArrayLike, eps: float = LOG_FLOOR) -> np.ndarray:
    """Elementwise ``ln(max(p, eps))``."""
    if not eps > 0:
        raise InvalidInputError("eps must be positive")
    return np.log(np.maximum(np.asarray(d, dtype=np.float64), eps))


def sample(d: np.ndarray, rng: SeededRng) -> int:
    """Draw one index from ``d`` by inverse CDF, consuming exactly one uniform.

    Zero-probability entries are never returned.
    """
    return sample_with_uniform(d, rng.random())


def sample_with_uniform(d: np.ndarray, u: float) -> int:
    c = np.cumsum(d)
    # smallest i with c[i] > u * total; flat steps (zero mass) are skipped
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(i, c.shape[0] - 1)


def sample_rows(rows: np.ndarray, rng: SeededRng) -> np.ndarray:
    """One draw per row, in row order; same uniforms and rule as :func:`sample`."""
    u = rng.randoms(rows.shape[0])
    c = np.cumsum(rows, axis=1)
    idx = (c <= (u * c[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)


def top_k_count(ratio: float, vocab_size: int) -> int:
    if not 0 < ratio <= 1:
        raise InvalidInputError(f"top-k ratio must lie in (0, 1], got {ratio}")
    # the 1e-9 slack keeps ratio*V that lands on an integer from rounding up
    return max(1, min(vocab_size, math.ceil(ratio * vocab_size - 1e-9)))


def top_k_candidates(d: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of the ``ceil(ratio * V)`` largest entries, ties to the lower index.

    Returned sorted by descending probability.
    """
    d = np.asarray(d, dtype=np.float64)
    k = top_k_count(ratio, d.shape[0])
    if k == d.shape[0]:
        return np.argsort(-d, kind="stable")
    # stable sort on -d keeps lower indices first among equal values
    return np.argsort(-d, kind="stable")[:k]


def candidate_mask(d: np.ndarray, ratio: float) -> np.ndarray:
    mask = np.zeros(d.shape[0], dtype=bool)
    mask[top_k_candidates(d, ratio)] = True
    return mask


def tv_distance(p: ArrayLike, q: ArrayLike) -> float:
    """Total variation distance ``0.5 * sum |p - q|``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def residual_distribution(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Normalized ``max(0, q - p)``: the law of the correction token after a rejection."""
    r = np.maximum(np.asarray(q, dtype=np.float64) - np.asarray(p, dtype=np.float64), 0.0)
    total = r.sum()
    if not total > 0:
        raise InternalLogicError(
            "residual has zero mass: a rejection cannot occur when q <= p everywhere"
        )
    return r / total


def uniform(vocab_size: int) -> np.ndarray:
    return np.full(vocab_size, 1.0 / vocab_size)
