"""Experiment driver behind the command line.

Every run is keyed by ``(seed, prompt id)``: the sampling stream is
``SeededRng.for_run(seed, prompt_id)`` for every decoder, so decoders are
compared on paired streams. Results are merged in ascending seed order.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig, format_value
from .drafter import SJDDrafter, VPDrafter
from .engine import TraceRecorder, run_greedy_jacobi, run_speculative_jacobi
from .errors import ConfigError
from .markov import MarkovModel, Prompt, autoregressive_decode, build_markov_model, make_prompts
from .prob import SeededRng
from .stats import RunStats
from .tracelog import TrajectoryWriter, dumps

SPECULATIVE = ("sjd", "sjd-vp")


def build_model(config: ExperimentConfig, seed: int) -> MarkovModel:
    return build_markov_model(
        config.model_seed_for(seed), config.order, config.vocab_size, config.concentration, config.attractor_weight
    )


def build_prompts(config: ExperimentConfig) -> list[Prompt]:
    return make_prompts(config.prompts, config.prefix_len, config.length, config.vocab_size)


def decode_one(
    config: ExperimentConfig,
    decoder: str,
    model: MarkovModel,
    prompt: Prompt,
    seed: int,
    *,
    trace: TraceRecorder | None = None,
    relaxed: bool = False,
) -> tuple[list[int], RunStats]:
    rng = SeededRng.for_run(seed, prompt.id)
    if decoder == "ar":
        return autoregressive_decode(model, prompt, rng)
    if decoder == "jacobi":
        res = run_greedy_jacobi(model, prompt, config.window, config.iteration_cap())
        return res.tokens, res.stats
    if decoder == "sjd":
        drafter = SJDDrafter()
    elif decoder == "sjd-vp":
        drafter = VPDrafter(config.vp_config(relaxed))
    else:
        raise ConfigError(f"unknown decoder {decoder!r}")
    res = run_speculative_jacobi(
        model, prompt, config.window, drafter, rng, max_iters=config.iteration_cap(), trace=trace, eps=config.eps
    )
    return res.tokens, res.stats


@dataclass
class Aggregate:
    """Pooled counters for one decoder over a set of runs."""

    decoder: str
    runs: int = 0
    nfe: int = 0
    generated: int = 0
    iterations: int = 0
    drafted: int = 0
    accepted: int = 0
    corrections: int = 0
    run_count: int = 0
    run_total: int = 0
    mask_fires: int = 0
    negative_score_fires: int = 0
    fallback_windows: int = 0

    def add(self, s: RunStats) -> None:
        self.runs += 1
        self.nfe += s.nfe
        self.generated += s.generated
        self.iterations += s.iterations
        self.drafted += s.drafted
        self.accepted += s.accepted
        self.corrections += s.corrections
        self.run_count += len(s.accepted_runs)
        self.run_total += sum(s.accepted_runs)
        self.mask_fires += s.mask_fires
        self.negative_score_fires += s.negative_score_fires
        self.fallback_windows += s.fallback_windows

    def merge(self, other: "Aggregate") -> None:
        for f in field_names(Aggregate):
            if f != "decoder":
                setattr(self, f, getattr(self, f) + getattr(other, f))

    @property
    def mean_nfe(self) -> float:
        return self.nfe / self.runs if self.runs else 0.0

    @property
    def acceptance_rate(self) -> float | None:
        if self.decoder not in SPECULATIVE:
            return None
        return self.accepted / self.drafted if self.drafted else 0.0

    @property
    def mean_accepted_run(self) -> float | None:
        if self.decoder == "ar":
            return None
        return self.run_total / self.run_count if self.run_count else 0.0

    def summary(self, baseline_nfe: float) -> dict:
        return {
            "decoder": self.decoder,
            "runs": self.runs,
            "mean_nfe": self.mean_nfe,
            "nfe_ratio": self.mean_nfe / baseline_nfe if baseline_nfe else None,
            "acceleration": baseline_nfe / self.mean_nfe if self.mean_nfe else None,
            "acceptance_rate": self.acceptance_rate,
            "mean_accepted_run": self.mean_accepted_run,
            "generated_tokens": self.generated,
            "mean_iterations": self.iterations / self.runs if self.runs else 0.0,
            "corrections": self.corrections,
            "mask_fires": self.mask_fires,
            "negative_score_fires": self.negative_score_fires,
            "fallback_windows": self.fallback_windows,
        }


def field_names(cls) -> list[str]:
    return [f for f in cls.__dataclass_fields__]


@dataclass
class ComparisonReport:
    fingerprint: str
    baseline: str
    decoders: tuple[str, ...]
    seeds: tuple[int, ...]
    per_seed: dict[int, dict[str, Aggregate]]
    config_text: str = ""
    timing: dict[str, float] = field(default_factory=dict)

    def pooled(self, decoder: str) -> Aggregate:
        agg = Aggregate(decoder)
        for seed in self.seeds:
            agg.merge(self.per_seed[seed][decoder])
        return agg

    def mean_nfe(self, decoder: str) -> float:
        return self.pooled(decoder).mean_nfe

    def ratio(self, decoder: str, reference: str | None = None) -> float:
        """Mean NFE of ``decoder`` over that of ``reference`` (default: the baseline)."""
        ref = self.baseline if reference is None else reference
        return self.mean_nfe(decoder) / self.mean_nfe(ref)

    def per_seed_ratio(self, decoder: str, reference: str) -> list[float]:
        return [self.per_seed[s][decoder].mean_nfe / self.per_seed[s][reference].mean_nfe for s in self.seeds]

    def _baseline_nfe(self) -> float:
        return self.mean_nfe(self.baseline) if self.baseline in self.decoders else 0.0

    def to_dict(self) -> dict:
        base = self._baseline_nfe()
        return {
            "fingerprint": self.fingerprint,
            "baseline": self.baseline,
            "seeds": list(self.seeds),
            "config": dict(line.split(" = ", 1) for line in self.config_text.splitlines() if line),
            "decoders": {d: self.pooled(d).summary(base) for d in self.decoders},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def per_seed_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fingerprint", "seed", "decoder", "runs", "mean_nfe", "nfe_ratio", "acceptance_rate",
                    "mean_accepted_run", "generated_tokens"])
        for seed in self.seeds:
            row = self.per_seed[seed]
            base = row[self.baseline].mean_nfe if self.baseline in row else 0.0
            for d in self.decoders:
                s = row[d].summary(base)
                w.writerow([self.fingerprint, seed, d, s["runs"], format_value(s["mean_nfe"]),
                            _cell(s["nfe_ratio"]), _cell(s["acceptance_rate"]), _cell(s["mean_accepted_run"]),
                            s["generated_tokens"]])
        return buf.getvalue()

    def table(self) -> str:
        base = self._baseline_nfe()
        head = f"{'decoder':<10}{'mean NFE':>11}{'acceleration':>14}{'NFE ratio':>11}{'acceptance':>12}{'mean run':>10}{'tokens':>9}"
        lines = [head, "-" * len(head)]
        for d in self.decoders:
            s = self.pooled(d).summary(base)
            lines.append(
                f"{d:<10}{s['mean_nfe']:>11.2f}{_num(s['acceleration'], 'x'):>14}{_num(s['nfe_ratio']):>11}"
                f"{_num(s['acceptance_rate']):>12}{_num(s['mean_accepted_run']):>10}{s['generated_tokens']:>9}"
            )
        return "\n".join(lines)


def _cell(x: float | None) -> str:
    return "" if x is None else format_value(float(x))


def _num(x: float | None, suffix: str = "") -> str:
    return "-" if x is None else f"{x:.3f}{suffix}"


Progress = Callable[[str], None]


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    relaxed: bool = False,
    progress: Progress | None = None,
) -> ComparisonReport:
    """Run every decoder on every (seed, prompt) pair and write the artifacts.

    Files: ``summary.json``, ``per_seed.csv`` (deterministic), ``timing.json``
    (wall clock) and, when ``config.trace`` is not ``none``,
    ``trajectories-<decoder>.jsonl`` for the speculative decoders.
    """
    if not relaxed:
        config.validate()
    else:
        config.vp_config(relaxed=True)
    decoders = tuple(config.decoders)
    if config.baseline not in decoders:
        decoders = (config.baseline,) + decoders
    prompts = build_prompts(config)
    fp = config.fingerprint()
    out = Path(out_dir) if out_dir is not None else None
    writers: dict[str, TrajectoryWriter] = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if config.trace != "none":
            for d in decoders:
                if d in SPECULATIVE:
                    writers[d] = TrajectoryWriter(out / f"trajectories-{d}.jsonl", f"{fp}/{d}", trace_meta(config, d))
    per_seed: dict[int, dict[str, Aggregate]] = {}
    timing = {d: 0.0 for d in decoders}
    try:
        for seed in sorted(config.seeds):
            model = build_model(config, seed)
            row = {d: Aggregate(d) for d in decoders}
            for d in decoders:
                t0 = time.perf_counter()
                for prompt in prompts:
                    rec = None
                    if d in writers:
                        rec = TraceRecorder(writers[d].write, tokens=config.trace, run_id=f"{seed}:{prompt.id}")
                    _, stats = decode_one(config, d, model, prompt, seed, trace=rec, relaxed=relaxed)
                    row[d].add(stats)
                timing[d] += time.perf_counter() - t0
            per_seed[seed] = row
            if progress:
                progress(f"seed {seed}: " + ", ".join(f"{d} {row[d].mean_nfe:.2f}" for d in decoders))
    finally:
        for w in writers.values():
            w.close()
    report = ComparisonReport(fp, config.baseline, decoders, tuple(sorted(config.seeds)), per_seed,
                              config.canonical(), timing)
    if out is not None:
        (out / "summary.json").write_text(report.to_json(), encoding="utf-8")
        (out / "per_seed.csv").write_text(report.per_seed_csv(), encoding="utf-8")
        (out / "timing.json").write_text(
            json.dumps({"fingerprint": fp, "seconds": timing}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return report


def trace_meta(config: ExperimentConfig, decoder: str) -> dict:
    meta = {"decoder": decoder, "window": config.window, "vocab_size": config.vocab_size}
    if decoder == "sjd-vp":
        vp = config.vp_config(relaxed=True)
        meta.update({"L": vp.L, "comparisons": vp.comparisons, "N": vp.N, "growth_reading": vp.growth_reading})
    return meta


SWEEP_KNOBS = {"gamma": "gamma", "L": "L", "N": "N", "topk_ratio": "topk_ratio", "W": "window"}


def _check_sweep_value(knob: str, v: float) -> float | int:
    if knob in ("L", "N", "W"):
        if v != int(v):
            raise ConfigError(f"{knob} takes integers, got {v}")
        v = int(v)
        lo = 0 if knob == "N" else 1
        if v < lo:
            raise ConfigError(f"{knob}={v} is below {lo}")
        return v
    if not 0 < v <= 1:
        raise ConfigError(f"{knob}={v} must lie in (0, 1]")
    return float(v)


@dataclass
class SweepRow:
    knob: str
    value: float | int
    decoder: str
    mean_nfe: float
    nfe_ratio: float | None
    acceptance_rate: float | None
    mean_accepted_run: float | None


def ablation_sweep(
    config: ExperimentConfig,
    knob: str,
    values: Sequence[float],
    out_dir: str | Path | None = None,
    progress: Progress | None = None,
) -> list[SweepRow]:
    """One comparison per knob value, everything else held at ``config``.

    Out-of-range drafter settings (gamma=1, N=0, N beyond L) run with a
    warning. Rows are written to ``sweep-<knob>.csv`` when ``out_dir`` is set.
    """
    if knob not in SWEEP_KNOBS:
        raise ConfigError(f"unknown sweep knob {knob!r}; choose from {', '.join(SWEEP_KNOBS)}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    checked = [_check_sweep_value(knob, float(v)) for v in values]
    rows: list[SweepRow] = []
    cfgs = [config.replace(**{SWEEP_KNOBS[knob]: v}) for v in checked]
    for cfg in cfgs:
        cfg.vp_config(relaxed=True)
    for v, cfg in zip(checked, cfgs):
        rep = run_experiment(cfg, None, relaxed=True)
        base = rep.mean_nfe(rep.baseline)
        for d in rep.decoders:
            s = rep.pooled(d).summary(base)
            rows.append(SweepRow(knob, v, d, s["mean_nfe"], s["nfe_ratio"], s["acceptance_rate"], s["mean_accepted_run"]))
        if progress:
            progress(f"{knob}={v}: " + ", ".join(f"{d} {rep.mean_nfe(d):.2f}" for d in rep.decoders))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"sweep-{knob}.csv").write_text(sweep_csv(rows, config.fingerprint()), encoding="utf-8")
    return rows


def sweep_csv(rows: Sequence[SweepRow], fingerprint: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fingerprint", *field_names(SweepRow)])
    for r in rows:
        w.writerow([fingerprint, *(_cell(x) if isinstance(x, float) or x is None else x for x in asdict(r).values())])
    return buf.getvalue()


class _TimedDrafter:
    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.calls = 0
        self.positions = 0
        self.seconds = 0.0

    def reset(self) -> None:
        self.inner.reset()

    def release_below(self, base: int) -> None:
        self.inner.release_below(base)

    def draft(self, positions, dists, rng, debug=False):
        t0 = time.perf_counter()
        out = self.inner.draft(positions, dists, rng, debug)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        self.positions += len(positions)
        return out

    @property
    def counters(self):
        return getattr(self.inner, "counters", None)


def overhead_probe(config: ExperimentConfig, prompts: int = 20, seed: int | None = None) -> dict:
    """Wall time of the drafting step per loop iteration, plain sampling vs. the VP drafter.

    Both drafters run on the same (seed, prompt) streams. Times are
    hardware-specific and belong in a timing file, never in compared output.
    """
    config.validate()
    seed = config.seeds[0] if seed is None else seed
    model = build_model(config, seed)
    ps = build_prompts(config)[:prompts]
    result = {}
    for name, make in (("sjd", SJDDrafter), ("sjd-vp", lambda: VPDrafter(config.vp_config()))):
        timed = _TimedDrafter(make())
        for p in ps:
            run_speculative_jacobi(model, p, config.window, timed, SeededRng.for_run(seed, p.id),
                                   max_iters=config.iteration_cap(), eps=config.eps)
        result[name] = {
            "calls": timed.calls,
            "positions": timed.positions,
            "mean_seconds_per_call": timed.seconds / timed.calls if timed.calls else 0.0,
        }
    base = result["sjd"]["mean_seconds_per_call"]
    for name in result:
        result[name]["ratio_vs_sjd"] = result[name]["mean_seconds_per_call"] / base if base else None
    return {"fingerprint": config.fingerprint(), "seed": seed, "prompts": len(ps), "drafters": result}


def theory_check(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Seeded perturbation trials per target accuracy; writes ``theory.csv``."""
    from .theory import TrialRow, tv_trials

    rows: list[list] = []
    summary = {}
    for Q in config.theory_q:
        trials = list(tv_trials(config.theory_trials, config.theory_vocab, Q, config.theory_m, config.theory_seed))
        gap = [t for t in trials if t.gap_ok]
        reduced = sum(t.delta_exact < 0 for t in gap)
        summary[format_value(Q)] = {
            "trials": len(trials),
            "gap_trials": len(gap),
            "reduced": reduced,
            "reduced_fraction": reduced / len(gap) if gap else None,
            "max_residual": max((t.residual for t in gap), default=None),
        }
        rows += [[format_value(Q), *(_cell(x) if isinstance(x, float) else x for x in t.as_row())] for t in trials]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target_Q", *TrialRow.CSV_FIELDS])
        w.writerows(rows)
        (out / "theory.csv").write_text(buf.getvalue(), encoding="utf-8")
        (out / "theory-summary.json").write_text(
            json.dumps({"fingerprint": config.fingerprint(), "targets": summary}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return summary


def write_decode(path: Path, tokens: Sequence[int], stats: RunStats, fingerprint: str) -> None:
    path.write_text(dumps({"fingerprint": fingerprint, "tokens": list(tokens), "stats": stats.to_dict()}) + "\n",
                    encoding="utf-8")


__all__ = [
    "Aggregate",
    "ComparisonReport",
    "SweepRow",
    "SWEEP_KNOBS",
    "build_model",
    "build_prompts",
    "decode_one",
    "run_experiment",
    "ablation_sweep",
    "overhead_probe",
    "theory_check",
    "sweep_csv",
    "trace_meta",
    "write_decode",
]
