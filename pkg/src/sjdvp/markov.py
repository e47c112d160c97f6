"""Seeded Markov token models that stand in for the base model.

Rows are symmetric-Dirichlet draws (normalized Gamma samples). Contexts are
the last ``order`` tokens, left-padded with a virtual begin-of-sequence
symbol that is not part of the vocabulary.

Table file format (plain text, one field per line, then one row per line)::

    # sjdvp markov table
    version 1
    order <int>
    vocab_size <int>
    seed <int>
    concentration <float>
    attractor_weight <float>
    rows <int>
    <V floats, space separated>   (repeated ``rows`` times)

Row ``r`` is the context whose base-(V+1) digits, most significant first,
are the context tokens; digit ``V`` is the begin-of-sequence pad.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, ResourceLimitError
from .prob import SeededRng, check_distribution, sample
from .stats import RunStats

TABLE_VERSION = 1
MAX_TABLE_ENTRIES = 1 << 24
MAX_ENUMERATION = 10**7


@dataclass(frozen=True, eq=False)
class MarkovModel:
    order: int
    vocab_size: int
    seed: int
    concentration: float
    attractor_weight: float
    table: np.ndarray

    @property
    def bos(self) -> int:
        return self.vocab_size

    def context_index(self, prefix: Sequence[int]) -> int:
        V = self.vocab_size
        ctx = list(prefix[-self.order:]) if self.order else []
        ctx = [V] * (self.order - len(ctx)) + ctx
        idx = 0
        for tok in ctx:
            idx = idx * (V + 1) + tok
        return idx

    def conditionals(self, seq: Sequence[int], start: int, stop: int) -> np.ndarray:
        """Rows for positions ``start..stop-1`` given the tokens in ``seq``.

        Position ``j`` conditions on ``seq[j-order:j]``; this is what one
        parallel forward pass over ``seq`` returns.
        """
        V, order = self.vocab_size, self.order
        padded = np.empty(len(seq) + order, dtype=np.int64)
        padded[:order] = V
        padded[order:] = seq
        pos = np.arange(start, stop)
        idx = np.zeros(pos.shape[0], dtype=np.int64)
        for i in range(order):
            idx = idx * (V + 1) + padded[pos + i]
        return self.table[idx]


def build_markov_model(
    seed: int,
    order: int,
    vocab_size: int,
    concentration: float = 0.5,
    attractor_weight: float = 0.0,
) -> MarkovModel:
    """Build a model whose rows are normalized Gamma(concentration) draws.

    With ``attractor_weight > 0`` every row becomes the convex mixture
    ``(1 - w) * row + w * attractor`` with one shared attractor row (the
    "drifting" variant). The base table does not depend on ``w``.
    """
    if vocab_size < 2:
        raise InvalidInputError("vocab_size must be at least 2")
    if order < 1:
        raise InvalidInputError("order must be at least 1")
    if not concentration > 0:
        raise InvalidInputError("concentration must be positive")
    if not 0 <= attractor_weight <= 1:
        raise InvalidInputError("attractor_weight must lie in [0, 1]")
    n_rows = (vocab_size + 1) ** order
    if n_rows * vocab_size > MAX_TABLE_ENTRIES:
        raise ResourceLimitError(f"table with {n_rows} x {vocab_size} entries is too large")

    gen = np.random.default_rng(np.random.SeedSequence([seed, order, vocab_size]))
    tiny = np.finfo(np.float64).tiny
    g = np.maximum(gen.gamma(concentration, size=(n_rows, vocab_size)), tiny)
    table = g / g.sum(axis=1, keepdims=True)
    a = np.maximum(gen.gamma(concentration, size=vocab_size), tiny)
    attractor = a / a.sum()
    if attractor_weight > 0:
        table = (1.0 - attractor_weight) * table + attractor_weight * attractor
    table.setflags(write=False)
    return MarkovModel(order, vocab_size, int(seed), float(concentration), float(attractor_weight), table)


def point_mass_model(vocab_size: int, successor: Sequence[int], order: int = 1) -> MarkovModel:
    """Deterministic model: context row ``r`` puts all mass on ``successor[r]``."""
    n_rows = (vocab_size + 1) ** order
    if len(successor) != n_rows:
        raise InvalidInputError(f"need {n_rows} successors, got {len(successor)}")
    table = np.zeros((n_rows, vocab_size))
    table[np.arange(n_rows), np.asarray(successor)] = 1.0
    table.setflags(write=False)
    return MarkovModel(order, vocab_size, 0, float("inf"), 0.0, table)


def next_token_distribution(m: MarkovModel, prefix: Sequence[int]) -> np.ndarray:
    for tok in prefix:
        if not 0 <= tok < m.vocab_size:
            raise InvalidInputError(f"token {tok} outside vocabulary of size {m.vocab_size}")
    return m.table[m.context_index(prefix)]


@dataclass(frozen=True)
class Prompt:
    id: int
    prefix: tuple[int, ...]
    length: int

    def __post_init__(self):
        if self.length < 1 or len(self.prefix) >= self.length:
            raise InvalidInputError(
                f"prompt {self.id}: prefix length {len(self.prefix)} must be < target length {self.length}"
            )

    @property
    def free(self) -> int:
        return self.length - len(self.prefix)


PROMPT_SALT = 0x5EED


def make_prompts(count: int, prefix_len: int, length: int, vocab_size: int, salt: int = PROMPT_SALT) -> list[Prompt]:
    """Prompts with uniformly random prefixes; prompt ``i`` is the same across seeds."""
    prompts = []
    for i in range(count):
        gen = np.random.default_rng(np.random.SeedSequence([salt, i]))
        prefix = tuple(int(t) for t in gen.integers(0, vocab_size, size=prefix_len))
        prompts.append(Prompt(i, prefix, length))
    return prompts


def exact_sequence_distribution(m: MarkovModel, prompt: Prompt) -> dict[tuple[int, ...], float]:
    """Probability of every full sequence (prefix + completion) under the chain rule."""
    seqs, probs = exact_completion_table(m, prompt)
    prefix = prompt.prefix
    return {prefix + tuple(int(t) for t in row): float(p) for row, p in zip(seqs, probs)}


def exact_completion_table(m: MarkovModel, prompt: Prompt) -> tuple[np.ndarray, np.ndarray]:
    """Array form: completions of shape ``(V**k, k)`` in lexicographic order and their probabilities."""
    V, k = m.vocab_size, prompt.free
    if V**k > MAX_ENUMERATION:
        raise ResourceLimitError(f"{V}^{k} completions exceed the enumeration limit {MAX_ENUMERATION}")
    for tok in prompt.prefix:
        if not 0 <= tok < V:
            raise InvalidInputError(f"token {tok} outside vocabulary")
    seqs = np.zeros((1, 0), dtype=np.int64)
    probs = np.ones(1)
    prefix = np.asarray(prompt.prefix, dtype=np.int64)
    n0 = prefix.shape[0]
    for step in range(k):
        pos = n0 + step
        # context indices for every partial sequence at this position
        idx = np.zeros(seqs.shape[0], dtype=np.int64)
        for i in range(m.order):
            j = pos - m.order + i
            if j < 0:
                tok = np.full(seqs.shape[0], V)
            elif j < n0:
                tok = np.full(seqs.shape[0], prefix[j])
            else:
                tok = seqs[:, j - n0]
            idx = idx * (V + 1) + tok
        rows = m.table[idx]
        probs = (probs[:, None] * rows).reshape(-1)
        seqs = np.concatenate(
            [np.repeat(seqs, V, axis=0), np.tile(np.arange(V), seqs.shape[0])[:, None]], axis=1
        )
    return seqs, probs


def autoregressive_decode(m: MarkovModel, prompt: Prompt, rng: SeededRng) -> tuple[list[int], RunStats]:
    """Plain sampling, one model evaluation per generated token."""
    seq = list(prompt.prefix)
    stats = RunStats()
    while len(seq) < prompt.length:
        seq.append(sample(m.table[m.context_index(seq)], rng))
        stats.nfe += 1
        stats.iterations += 1
        stats.provenance.append("ar")
    stats.generated = prompt.free
    return seq, stats


def greedy_decode(m: MarkovModel, prompt: Prompt) -> list[int]:
    seq = list(prompt.prefix)
    while len(seq) < prompt.length:
        seq.append(int(np.argmax(m.table[m.context_index(seq)])))
    return seq


def all_contexts(m: MarkovModel):
    """Every row key as a tuple of context symbols (``V`` = begin pad)."""
    return itertools.product(range(m.vocab_size + 1), repeat=m.order)


def dump_model(m: MarkovModel, path: str | Path) -> None:
    lines = [
        "# sjdvp markov table",
        f"version {TABLE_VERSION}",
        f"order {m.order}",
        f"vocab_size {m.vocab_size}",
        f"seed {m.seed}",
        f"concentration {m.concentration!r}",
        f"attractor_weight {m.attractor_weight!r}",
        f"rows {m.table.shape[0]}",
    ]
    lines += [" ".join(repr(float(x)) for x in row) for row in m.table]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> MarkovModel:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    header: dict[str, str] = {}
    body_start = 0
    for i, ln in enumerate(lines):
        key, _, value = ln.partition(" ")
        header[key] = value
        if key == "rows":
            body_start = i + 1
            break
    else:
        raise InvalidInputError(f"{path}: missing 'rows' header")
    if int(header.get("version", -1)) != TABLE_VERSION:
        raise InvalidInputError(f"{path}: unsupported table version {header.get('version')}")
    order, V, n_rows = int(header["order"]), int(header["vocab_size"]), int(header["rows"])
    if n_rows != (V + 1) ** order:
        raise InvalidInputError(f"{path}: expected {(V + 1) ** order} rows, header says {n_rows}")
    body = lines[body_start : body_start + n_rows]
    if len(body) != n_rows:
        raise InvalidInputError(f"{path}: truncated table")
    table = np.array([[float(x) for x in ln.split()] for ln in body])
    if table.shape != (n_rows, V):
        raise InvalidInputError(f"{path}: bad row width")
    for r, row in enumerate(table):
        check_distribution(row, f"row {r}")
    table.setflags(write=False)
    return MarkovModel(
        order, V, int(header["seed"]), float(header["concentration"]), float(header["attractor_weight"]), table
    )
