"""Command line entry point: ``sjdvp <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 run aborted by the
iteration cap, 4 unusable analysis input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

from .config import DECODERS, ExperimentConfig, coerce, load_config, parse_seeds
from .errors import AnalysisInputError, ConfigError, InvalidInputError, ResourceLimitError, SafetyValveError

log = logging.getLogger("sjdvp")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_ANALYSIS = 0, 2, 3, 4


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = coerce(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        try:
            values["seeds"] = parse_seeds(args.seed)
        except ValueError as exc:
            raise ConfigError(f"bad --seed: {exc}") from exc
    if getattr(args, "decoder", None):
        values["decoders"] = tuple(d.strip() for d in args.decoder.split(",") if d.strip())
    if getattr(args, "out", None):
        values["out"] = args.out
    return values


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(args.config, _overrides(args))


def cmd_decode(args: argparse.Namespace) -> int:
    from .engine import TraceRecorder
    from .harness import SPECULATIVE, build_model, build_prompts, decode_one, trace_meta, write_decode
    from .tracelog import TrajectoryWriter

    cfg = _config(args)
    if len(cfg.decoders) != 1:
        raise ConfigError("decode runs a single decoder; pass --decoder")
    cfg.validate()
    decoder, seed = cfg.decoders[0], cfg.seeds[0]
    prompts = build_prompts(cfg)
    if not 0 <= args.prompt < len(prompts):
        raise ConfigError(f"--prompt must lie in [0, {len(prompts) - 1}]")
    prompt = prompts[args.prompt]
    model = build_model(cfg, seed)
    writer = None
    rec = None
    if args.jsonl:
        if decoder not in SPECULATIVE:
            raise ConfigError("--jsonl needs a speculative decoder (sjd or sjd-vp)")
        writer = TrajectoryWriter(args.jsonl, f"{cfg.fingerprint()}/{decoder}", trace_meta(cfg, decoder))
        rec = TraceRecorder(writer.write, tokens=cfg.trace if cfg.trace != "none" else "tracked",
                            run_id=f"{seed}:{prompt.id}")
    try:
        tokens, stats = decode_one(cfg, decoder, model, prompt, seed, trace=rec)
    finally:
        if writer is not None:
            writer.close()
    print(" ".join(map(str, tokens)))
    print(f"decoder={decoder} seed={seed} prompt={prompt.id} nfe={stats.nfe} generated={stats.generated} "
          f"acceptance={stats.acceptance_rate:.3f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_decode(out / "decode.json", tokens, stats, cfg.fingerprint())
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .harness import run_experiment

    cfg = _config(args)
    if args.jsonl:
        cfg = cfg.replace(trace=args.jsonl)
    cfg.validate()
    report = run_experiment(cfg, cfg.out, progress=None if args.quiet else (lambda m: print(m, file=sys.stderr)))
    print(f"config {report.fingerprint}  baseline={report.baseline}  seeds={list(report.seeds)}")
    print(report.table())
    if "sjd" in report.decoders and "sjd-vp" in report.decoders:
        print(f"sjd-vp / sjd mean NFE ratio: {report.ratio('sjd-vp', 'sjd'):.4f}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from .harness import ablation_sweep

    cfg = _config(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc
    with warnings.catch_warnings():
        warnings.simplefilter("ignore" if args.quiet else "default")
        rows = ablation_sweep(cfg, args.knob, values, cfg.out,
                              progress=None if args.quiet else (lambda m: print(m, file=sys.stderr)))
    print(f"{'value':>8}  {'decoder':<8}{'mean NFE':>10}{'NFE ratio':>11}{'acceptance':>12}")
    for r in rows:
        acc = "-" if r.acceptance_rate is None else f"{r.acceptance_rate:.3f}"
        ratio = "-" if r.nfe_ratio is None else f"{r.nfe_ratio:.3f}"
        print(f"{r.value!s:>8}  {r.decoder:<8}{r.mean_nfe:>10.2f}{ratio:>11}{acc:>12}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    from .analysis import analyze
    from .tracelog import read_logs

    summary = analyze(read_logs(args.logs), args.n_steps, args.max_n)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.json").write_text(summary.to_json(), encoding="utf-8")
        (out / "analysis.csv").write_text(summary.to_csv(), encoding="utf-8")
    g = summary.growth
    frac = "n/a (no eligible tokens)" if g.fraction is None else f"{g.fraction:.4f}"
    print(f"accepted-token growth fraction (n={summary.n_steps}): {frac}  "
          f"[eligible {g.eligible}, excluded {g.excluded}]")
    print(summary.to_csv(), end="")
    if summary.mask is not None:
        print(f"mask cross-check: {summary.mask.checked} flags, {len(summary.mask.mismatches)} mismatches")
    return EXIT_OK


def cmd_theory(args: argparse.Namespace) -> int:
    from .harness import theory_check

    cfg = _config(args)
    if args.trials is not None:
        cfg = cfg.replace(theory_trials=args.trials)
    summary = theory_check(cfg, cfg.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_overhead(args: argparse.Namespace) -> int:
    from .harness import overhead_probe

    cfg = _config(args)
    res = overhead_probe(cfg, prompts=args.prompts)
    text = json.dumps(res, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "overhead-timing.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sjdvp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, decoder: bool = True) -> None:
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", help="seed, comma list or a-b range (overrides 'seeds')")
        if decoder:
            p.add_argument("--decoder", help=f"comma list from {', '.join(DECODERS)}")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("decode", help="decode one prompt")
    common(p)
    p.add_argument("--prompt", type=int, default=0, help="prompt id")
    p.add_argument("--jsonl", help="write the trajectory log to this file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="compare decoders over prompts and seeds")
    common(p)
    p.add_argument("--jsonl", nargs="?", const="tracked", choices=("tracked", "all"),
                   help="also write trajectory logs (default token set: tracked)")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="ablation over one drafter or window knob")
    common(p)
    p.add_argument("--knob", required=True, choices=("gamma", "L", "N", "topk_ratio", "W"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="trajectory statistics from JSONL logs")
    p.add_argument("logs", nargs="+", help="trajectory log files (same fingerprint)")
    p.add_argument("--n-steps", type=int, default=None, help="growth steps for the accepted-token fraction")
    p.add_argument("--max-n", type=int, default=5)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("theory-check", help="perturbation trials for the TV argument")
    common(p, decoder=False)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("overhead", help="wall time of the drafting step")
    common(p)
    p.add_argument("--prompts", type=int, default=20)
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError, ResourceLimitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SafetyValveError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except AnalysisInputError as exc:
        print(f"analysis input error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
