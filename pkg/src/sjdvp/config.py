"""Experiment configuration: a flat ``key = value`` text file.

Lines starting with ``#`` and blank lines are ignored. Precedence, lowest
first: built-in defaults, the config file, ``--set key=value`` overrides,
then the dedicated flags (``--seed``, ``--decoder``, ``--out``).

Keys
----
model_seed        int, or ``seed`` to build one model per run seed (default)
order             context length of the Markov model (1)
vocab_size        V (64)
concentration     Gamma shape of the random rows (0.5)
attractor_weight  mixing weight of the shared attractor row (0.3)
prompts           number of prompts (200)
prefix_len        prompt prefix length (1)
length            total sequence length T including the prefix (128)
decoders          comma list from ar, jacobi, sjd, sjd-vp (ar,sjd,sjd-vp)
baseline          decoder the others are compared against (ar)
window            Jacobi window W (16)
seeds             ``a-b`` range or comma list (0-4)
gamma, L, N, topk_ratio, eps, verify_mode, growth_reading,
ewa_include_current, score_clamp
                  drafter knobs (0.8, 3, 3, 0.10, 1e-12, strict, n, true, none)
max_iters         per-run iteration cap, 0 for 16 * T (0)
trace             none, tracked or all: what the trajectory log keeps (none)
out               output directory (out)
theory_trials, theory_vocab, theory_m, theory_q, theory_seed
                  theory-check settings (1000, 32, 1e-3, "0.6,0.8,0.95", 2024)
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .drafter import VPConfig
from .errors import ConfigError

DECODERS = ("ar", "jacobi", "sjd", "sjd-vp")
TRACE_MODES = ("none", "tracked", "all")


@dataclass(frozen=True)
class ExperimentConfig:
    model_seed: str = "seed"
    order: int = 1
    vocab_size: int = 64
    concentration: float = 0.5
    attractor_weight: float = 0.3
    prompts: int = 200
    prefix_len: int = 1
    length: int = 128
    decoders: tuple[str, ...] = ("ar", "sjd", "sjd-vp")
    baseline: str = "ar"
    window: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    gamma: float = 0.8
    L: int = 3
    N: int = 3
    topk_ratio: float = 0.10
    eps: float = 1e-12
    verify_mode: str = "strict"
    growth_reading: str = "n"
    ewa_include_current: bool = True
    score_clamp: float | None = None
    max_iters: int = 0
    trace: str = "none"
    out: str = "out"
    theory_trials: int = 1000
    theory_vocab: int = 32
    theory_m: float = 1e-3
    theory_q: tuple[float, ...] = (0.6, 0.8, 0.95)
    theory_seed: int = 2024

    def __post_init__(self):
        problems = []
        if self.model_seed != "seed":
            try:
                int(self.model_seed)
            except ValueError:
                problems.append(f"model_seed must be an integer or 'seed', got {self.model_seed!r}")
        for name in ("order", "prompts", "length", "window", "theory_trials"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.vocab_size < 2:
            problems.append("vocab_size must be >= 2")
        if self.prefix_len < 0 or self.prefix_len >= self.length:
            problems.append("prefix_len must satisfy 0 <= prefix_len < length")
        if not self.concentration > 0:
            problems.append("concentration must be positive")
        if not 0 <= self.attractor_weight <= 1:
            problems.append("attractor_weight must lie in [0, 1]")
        if not self.decoders:
            problems.append("decoders must not be empty")
        for d in self.decoders:
            if d not in DECODERS:
                problems.append(f"unknown decoder {d!r}; choose from {', '.join(DECODERS)}")
        if self.baseline not in DECODERS:
            problems.append(f"unknown baseline {self.baseline!r}")
        if not self.seeds:
            problems.append("seeds must not be empty")
        if any(s < 0 for s in self.seeds):
            problems.append("seeds must be non-negative")
        if len(set(self.seeds)) != len(self.seeds):
            problems.append("seeds must be distinct")
        if self.max_iters < 0:
            problems.append("max_iters must be >= 0")
        if self.trace not in TRACE_MODES:
            problems.append(f"trace must be one of {TRACE_MODES}")
        if problems:
            raise ConfigError("; ".join(problems))

    def vp_config(self, relaxed: bool = False) -> VPConfig:
        return VPConfig(
            gamma=self.gamma,
            L=self.L,
            N=self.N,
            topk_ratio=self.topk_ratio,
            eps=self.eps,
            verify_mode=self.verify_mode,
            growth_reading=self.growth_reading,
            ewa_include_current=self.ewa_include_current,
            score_clamp=self.score_clamp,
            relaxed=relaxed,
        )

    def validate(self) -> None:
        """Raise :class:`ConfigError` for anything a run would trip over."""
        if "sjd-vp" in self.decoders:
            self.vp_config()

    def model_seed_for(self, seed: int) -> int:
        return seed if self.model_seed == "seed" else int(self.model_seed)

    def iteration_cap(self) -> int | None:
        return self.max_iters or None

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def canonical(self) -> str:
        """Sorted ``key = value`` text of every field that affects results."""
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "out":
                continue
            lines.append(f"{f.name} = {format_value(getattr(self, f.name))}")
        return "\n".join(sorted(lines)) + "\n"

    def fingerprint(self) -> str:
        from . import __version__

        h = hashlib.sha256(f"sjdvp {__version__}\n{self.canonical()}".encode())
        return h.hexdigest()[:16]


def format_value(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_seeds(text: str) -> tuple[int, ...]:
    text = text.strip()
    if "-" in text and "," not in text:
        a, _, b = text.partition("-")
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    return tuple(int(s) for s in text.split(",") if s.strip())


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def coerce(key: str, text: str) -> Any:
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    text = text.strip()
    try:
        if key == "seeds":
            return parse_seeds(text)
        if key == "decoders":
            return tuple(s.strip() for s in text.split(",") if s.strip())
        if key == "theory_q":
            return tuple(float(s) for s in text.split(",") if s.strip())
        if key == "score_clamp":
            return None if text.lower() == "none" else float(text)
        if key == "model_seed":
            return text
        default = _FIELDS[key].default
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = coerce(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return ExperimentConfig(**values)


__all__ = [
    "DECODERS",
    "ExperimentConfig",
    "coerce",
    "format_value",
    "load_config",
    "parse_config_text",
    "parse_seeds",
]
