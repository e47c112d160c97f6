"""Numerical checks of the first-order TV argument for directional drafting.

A drafter that moves probability mass is modelled as ``p -> p + m * omega * yhat``
with a per-token direction ``yhat`` in {-1, +1} and magnitude ``omega >= 0``.
The ideal direction is ``y = sign(q - p)``. To first order in ``m``::

    TV(p + dp, q) - TV(p, q) = (m / 2) * sum_x sign(p - q) * omega * yhat
                             = -(m / 2) * sum_x y * yhat * omega

and with ``Q_u`` the agreement rate and ``E_u``/``Cov_u`` taken uniformly
over the non-tie tokens this is ``-(m n / 2) * ((2 Q_u - 1) E_u[omega] +
Cov_u(y yhat, omega))``. The p-weighted counterparts are reported too.

``PerturbationSpec(renormalize=True)`` divides the perturbed vector by its
total, which keeps it on the simplex and makes the Taylor remainder a true
second-order term.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import InvalidInputError
from .prob import tv_distance


@dataclass(frozen=True)
class PerturbationSpec:
    m: float
    omega: np.ndarray
    yhat: np.ndarray
    renormalize: bool = False

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        yhat = np.asarray(self.yhat, dtype=np.float64)
        if omega.ndim != 1 or omega.shape != yhat.shape:
            raise InvalidInputError("omega and yhat must be 1-D vectors of equal length")
        if not (math.isfinite(self.m) and self.m >= 0):
            raise InvalidInputError(f"m must be a finite non-negative real, got {self.m}")
        if np.any(omega < 0) or not np.all(np.isfinite(omega)):
            raise InvalidInputError("omega must be finite and non-negative")
        if not np.all(np.abs(yhat) == 1):
            raise InvalidInputError("yhat entries must be -1 or +1")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "yhat", yhat)

    def shift(self) -> np.ndarray:
        return self.m * self.omega * self.yhat

    def apply(self, p: np.ndarray) -> np.ndarray:
        """The perturbed vector; raises if any entry leaves [0, 1]."""
        p = np.asarray(p, dtype=np.float64)
        if p.shape != self.omega.shape:
            raise InvalidInputError(f"dimension mismatch: {p.shape} vs {self.omega.shape}")
        out = p + self.shift()
        if self.renormalize:
            total = out.sum()
            if not total > 0:
                raise InvalidInputError("perturbed vector has non-positive mass")
            out = out / total
        if np.any(out < 0) or np.any(out > 1):
            raise InvalidInputError("perturbed vector leaves [0, 1]; reduce m")
        return out


def ideal_direction(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, int]:
    """``sign(q - p)`` per token with ties mapped to +1, plus the tie count."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"dimension mismatch: {p.shape} vs {q.shape}")
    y = np.where(q >= p, 1.0, -1.0)
    return y, int(np.count_nonzero(q == p))


def direction_accuracy(p: np.ndarray, q: np.ndarray, yhat: np.ndarray, weighting: str = "p") -> float:
    """Agreement of ``yhat`` with the ideal direction.

    ``weighting="p"`` gives ``sum_x p(x) [yhat = y]``; ``"uniform"`` gives the
    plain agreement rate over non-tie tokens (``nan`` if every token ties).
    """
    p = np.asarray(p, dtype=np.float64)
    y, _ = ideal_direction(p, q)
    yhat = np.asarray(yhat, dtype=np.float64)
    if yhat.shape != y.shape:
        raise InvalidInputError("yhat has the wrong length")
    agree = yhat == y
    if weighting == "p":
        return float(np.dot(p, agree))
    if weighting == "uniform":
        live = np.asarray(q) != p
        n = int(live.sum())
        return float(agree[live].sum() / n) if n else float("nan")
    raise InvalidInputError(f"unknown weighting {weighting!r}")


def exact_tv_delta(p: np.ndarray, q: np.ndarray, spec: PerturbationSpec) -> float:
    return tv_distance(spec.apply(p), q) - tv_distance(p, q)


def first_order_tv_delta(p: np.ndarray, q: np.ndarray, spec: PerturbationSpec) -> float:
    """Linear term of the TV change; tokens with ``p == q`` contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    s = np.sign(p - np.asarray(q, dtype=np.float64))
    dp = spec.omega * spec.yhat
    if spec.renormalize:
        # d/dm of (p + m w) / (1 + m sum(w)) at m = 0
        dp = dp - dp.sum() * p
    return 0.5 * spec.m * float(np.dot(s, dp))


def gap_condition(p: np.ndarray, q: np.ndarray, spec: PerturbationSpec, min_gap: float = 0.0) -> bool:
    """True when no token's ``p - q`` sign flips or hits zero under the perturbation.

    Tokens already tied count as violations (the linear term is undefined
    there), as do tokens with ``|p - q| < min_gap``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    before = np.sign(p - q)
    after = np.sign(spec.apply(p) - q)
    if np.any(before == 0) or np.any(after != before):
        return False
    return bool(np.all(np.abs(p - q) >= min_gap))


@dataclass
class DirectionReport:
    Q: float
    Q_uniform: float
    E_omega: float
    E_omega_uniform: float
    cov: float
    cov_uniform: float
    ties: int
    tv_before: float
    tv_after_exact: float
    tv_after_first_order: float
    decomposed_delta: float
    decomposed_delta_p: float
    residual: float

    @property
    def delta_exact(self) -> float:
        return self.tv_after_exact - self.tv_before

    @property
    def delta_first_order(self) -> float:
        return self.tv_after_first_order - self.tv_before


def _moments(weights: np.ndarray, agree: np.ndarray, omega: np.ndarray) -> tuple[float, float, float]:
    w = weights / weights.sum()
    yy = np.where(agree, 1.0, -1.0)
    e_yy = float(np.dot(w, yy))
    e_om = float(np.dot(w, omega))
    cov = float(np.dot(w, yy * omega)) - e_yy * e_om
    return (e_yy + 1.0) / 2.0, e_om, cov


def decomposition_check(p: np.ndarray, q: np.ndarray, spec: PerturbationSpec) -> DirectionReport:
    """Both sides of the accuracy/covariance decomposition for one instance.

    ``decomposed_delta`` uses uniform weights over the non-tie tokens and
    reproduces the unrenormalized linear term exactly. ``decomposed_delta_p``
    is the same expression with expectations under ``p`` (no token count
    factor), kept for comparison. ``residual`` is
    ``|delta_exact - delta_first_order| / |delta_first_order|`` (``nan`` when
    the linear term vanishes).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    y, ties = ideal_direction(p, q)
    agree = spec.yhat == y
    live = p != q
    n = int(live.sum())
    if n:
        Qu, Eu, Cu = _moments(np.ones(n), agree[live], spec.omega[live])
        decomposed = -(spec.m / 2.0) * n * ((2 * Qu - 1) * Eu + Cu)
    else:
        Qu = Eu = Cu = float("nan")
        decomposed = 0.0
    Qp, Ep, Cp = _moments(p, agree, spec.omega)
    decomposed_p = -(spec.m / 2.0) * ((2 * Qp - 1) * Ep + Cp)
    tv0 = tv_distance(p, q)
    d_exact = exact_tv_delta(p, q, spec)
    d_fo = first_order_tv_delta(p, q, spec)
    residual = abs(d_exact - d_fo) / abs(d_fo) if d_fo != 0 else float("nan")
    return DirectionReport(
        Q=Qp,
        Q_uniform=Qu,
        E_omega=Ep,
        E_omega_uniform=Eu,
        cov=Cp,
        cov_uniform=Cu,
        ties=ties,
        tv_before=tv0,
        tv_after_exact=tv0 + d_exact,
        tv_after_first_order=tv0 + d_fo,
        decomposed_delta=decomposed,
        decomposed_delta_p=decomposed_p,
        residual=residual,
    )


def vp_direction_extractor(p_t: np.ndarray, p_after: np.ndarray, m: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Read the drafter's actual change as ``(yhat, omega)``.

    ``yhat`` is +1 where fusion raised the probability and -1 elsewhere;
    ``omega = |p_after - p_t| / m``. With ``m = 1`` the perturbation
    reproduces ``p_after`` exactly.
    """
    if not m > 0:
        raise InvalidInputError("m must be positive")
    p_t = np.asarray(p_t, dtype=np.float64)
    diff = np.asarray(p_after, dtype=np.float64) - p_t
    yhat = np.where(diff > 0, 1.0, -1.0)
    return yhat, np.abs(diff) / m


def boosted_direction(score: np.ndarray, mask: np.ndarray, in_candidates: np.ndarray) -> np.ndarray:
    """Rule form of the drafter's direction: +1 on boosted candidates with positive score."""
    boosted = np.asarray(in_candidates, bool) & (np.asarray(mask) == 1) & (np.asarray(score) > 0)
    return np.where(boosted, 1.0, -1.0)


# ---------------------------------------------------------------- trials


def random_pair(gen: np.random.Generator, V: int, concentration: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Two independent Dirichlet(concentration) vectors of length ``V``."""
    tiny = np.finfo(np.float64).tiny
    g = np.maximum(gen.gamma(concentration, size=(2, V)), tiny)
    g /= g.sum(axis=1, keepdims=True)
    return g[0], g[1]


def synthetic_predictor(
    p: np.ndarray, q: np.ndarray, Q: float, gen: np.random.Generator, mode: str = "exact"
) -> np.ndarray:
    """A direction vector with agreement rate ``Q`` over the non-tie tokens.

    ``mode="exact"`` agrees on exactly ``round(Q * n)`` tokens chosen
    uniformly at random; ``mode="bernoulli"`` agrees on each token
    independently with probability ``Q``. Tied tokens get +1.
    """
    if not 0 <= Q <= 1:
        raise InvalidInputError("Q must lie in [0, 1]")
    y, _ = ideal_direction(p, q)
    live = np.flatnonzero(np.asarray(p) != np.asarray(q))
    agree = np.zeros(y.shape[0], dtype=bool)
    if mode == "exact":
        k = int(round(Q * live.shape[0]))
        agree[gen.permutation(live)[:k]] = True
    elif mode == "bernoulli":
        agree[live] = gen.random(live.shape[0]) < Q
    else:
        raise InvalidInputError(f"unknown predictor mode {mode!r}")
    yhat = np.where(agree, y, -y)
    yhat[np.asarray(p) == np.asarray(q)] = 1.0
    return yhat


@dataclass
class TrialRow:
    trial: int
    Q: float
    Q_uniform: float
    E_omega: float
    cov: float
    tv_before: float
    delta_exact: float
    delta_fo: float
    residual: float
    gap_ok: bool

    CSV_FIELDS = ("trial", "Q", "Q_uniform", "E_omega", "cov", "tv_before", "delta_exact", "delta_fo", "residual", "gap_ok")

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


def tv_trials(
    n_trials: int,
    V: int,
    target_Q: float,
    m: float,
    seed: int,
    *,
    omega: float | str = 1.0,
    mode: str = "exact",
    renormalize: bool = False,
) -> Iterator[TrialRow]:
    """Seeded random instances of the directional perturbation.

    ``omega`` is either a constant or ``"random"`` (uniform on [0.5, 1.5]
    per token). Instances that would leave [0, 1] are reported with
    ``gap_ok=False`` and nan deltas.
    """
    for t in range(n_trials):
        gen = np.random.default_rng(np.random.SeedSequence([seed, V, t]))
        p, q = random_pair(gen, V)
        yhat = synthetic_predictor(p, q, target_Q, gen, mode)
        om = gen.uniform(0.5, 1.5, V) if omega == "random" else np.full(V, float(omega))
        spec = PerturbationSpec(m, om, yhat, renormalize)
        try:
            rep = decomposition_check(p, q, spec)
            ok = gap_condition(p, q, spec)
        except InvalidInputError:
            nan = float("nan")
            yield TrialRow(t, nan, nan, nan, nan, tv_distance(p, q), nan, nan, nan, False)
            continue
        yield TrialRow(
            t, rep.Q, rep.Q_uniform, rep.E_omega, rep.cov, rep.tv_before,
            rep.delta_exact, rep.delta_first_order, rep.residual, ok,
        )


@dataclass
class RemainderTrial:
    trial: int
    remainder: float
    remainder_half: float
    gap_ok: bool

    @property
    def ratio(self) -> float:
        return self.remainder / self.remainder_half if self.remainder_half > 0 else float("inf")


def remainder_trials(
    n_trials: int | None, V: int, m: float, seed: int, target_Q: float = 0.8
) -> Iterator[RemainderTrial]:
    """``|exact - linear|`` at ``m`` and ``m / 2`` on renormalized perturbations with random omega.

    ``n_trials=None`` yields forever; pair with ``itertools.islice``.
    """
    for t in (range(n_trials) if n_trials is not None else itertools.count()):
        gen = np.random.default_rng(np.random.SeedSequence([seed, V, t, 2]))
        p, q = random_pair(gen, V)
        yhat = synthetic_predictor(p, q, target_Q, gen)
        om = gen.uniform(0.5, 1.5, V)
        out = []
        ok = True
        for mm in (m, m / 2):
            spec = PerturbationSpec(mm, om, yhat, renormalize=True)
            try:
                ok = ok and gap_condition(p, q, spec)
                out.append(abs(exact_tv_delta(p, q, spec) - first_order_tv_delta(p, q, spec)))
            except InvalidInputError:
                ok = False
                out.append(float("nan"))
        yield RemainderTrial(t, out[0], out[1], ok)


def simplex_grid(V: int, step: float) -> np.ndarray:
    """All points of the probability simplex with coordinates on a ``step`` lattice."""
    n = int(round(1 / step))
    if abs(n * step - 1) > 1e-9:
        raise InvalidInputError("step must divide 1")
    pts = []

    def rec(prefix: list[int], left: int, slots: int):
        if slots == 1:
            pts.append(prefix + [left])
            return
        for k in range(left + 1):
            rec(prefix + [k], left - k, slots - 1)

    rec([], n, V)
    return np.asarray(pts, dtype=np.float64) / n


@dataclass
class SignGridResult:
    checked: int = 0
    skipped_ties: int = 0
    mismatches: list = field(default_factory=list)


def sign_grid_check(V: int = 3, step: float = 0.05, weighting: str = "uniform") -> SignGridResult:
    """Exhaustive check of ``exact delta < 0  <=>  Q > 1/2`` with constant omega.

    Every (p, q) lattice pair without ties and every direction vector is
    tried; ``m`` is a quarter of the smallest gap so no sign is crossed.
    Pairs with Q exactly 1/2 must give a zero change. Entries that would
    leave [0, 1] are skipped as ties are.
    """
    grid = simplex_grid(V, step)
    patterns = np.array(np.meshgrid(*([[-1.0, 1.0]] * V), indexing="ij")).reshape(V, -1).T
    res = SignGridResult()
    for p in grid:
        for q in grid:
            gaps = np.abs(p - q)
            if np.any(gaps == 0):
                res.skipped_ties += 1
                continue
            m = gaps.min() / 4
            for yhat in patterns:
                spec = PerturbationSpec(m, np.ones(V), yhat)
                try:
                    d = exact_tv_delta(p, q, spec)
                except InvalidInputError:
                    continue
                Q = direction_accuracy(p, q, yhat, weighting)
                res.checked += 1
                tol = 1e-15
                ok = (d < -tol) if Q > 0.5 else (abs(d) <= tol if Q == 0.5 else d > tol)
                if not ok:
                    res.mismatches.append((p.tolist(), q.tolist(), yhat.tolist(), Q, d))
    return res


__all__: Sequence[str] = (
    "PerturbationSpec",
    "DirectionReport",
    "TrialRow",
    "RemainderTrial",
    "SignGridResult",
    "ideal_direction",
    "direction_accuracy",
    "exact_tv_delta",
    "first_order_tv_delta",
    "gap_condition",
    "decomposition_check",
    "vp_direction_extractor",
    "boosted_direction",
    "random_pair",
    "synthetic_predictor",
    "tv_trials",
    "remainder_trials",
    "simplex_grid",
    "sign_grid_check",
)
