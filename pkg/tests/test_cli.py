from __future__ import annotations

import csv
import json

import pytest

from sjdvp.cli import main
from sjdvp.config import ExperimentConfig, format_value, load_config, parse_config_text, parse_seeds
from sjdvp.errors import ConfigError
from sjdvp.harness import ablation_sweep, overhead_probe, run_experiment, theory_check

SMALL = """\
# small bench used across the CLI tests
vocab_size = 8
prompts = 6
length = 20
window = 4
seeds = 0-1
L = 2
N = 2
topk_ratio = 0.5
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def small() -> ExperimentConfig:
    return ExperimentConfig(**parse_config_text(SMALL))


def test_parse_config_text():
    vals = parse_config_text("gamma = 0.5  # comment\n\nseeds = 3,5\nverify_mode = unfused\nscore_clamp = none\n")
    assert vals == {"gamma": 0.5, "seeds": (3, 5), "verify_mode": "unfused", "score_clamp": None}
    for bad in ("gamma 0.5", "nope = 1", "gamma = 0.1\ngamma = 0.2", "L = two", "ewa_include_current = maybe"):
        with pytest.raises(ConfigError):
            parse_config_text(bad)


def test_seed_parsing():
    assert parse_seeds("0-4") == (0, 1, 2, 3, 4)
    assert parse_seeds("7, 2") == (7, 2)
    with pytest.raises(ConfigError):
        parse_seeds("5-1")


def test_defaults():
    c = ExperimentConfig()
    assert (c.gamma, c.L, c.N, c.topk_ratio, c.window) == (0.8, 3, 3, 0.10, 16)
    assert (c.vocab_size, c.length, c.prompts, c.seeds, c.attractor_weight) == (64, 128, 200, (0, 1, 2, 3, 4), 0.3)


def test_precedence(cfg_file):
    c = load_config(cfg_file, {"window": 6})
    assert c.window == 6 and c.vocab_size == 8
    with pytest.raises(ConfigError):
        load_config(cfg_file.parent / "missing.cfg")


def test_fingerprint_tracks_results_not_output_dir():
    c = small()
    assert c.fingerprint() == c.replace(out="elsewhere").fingerprint()
    assert c.fingerprint() != c.replace(gamma=0.7).fingerprint()
    assert len(c.fingerprint()) == 16


def test_format_value():
    assert format_value((1, 2)) == "1,2"
    assert format_value(True) == "true"
    assert format_value(None) == "none"
    assert format_value(0.1) == "0.1"


@pytest.mark.parametrize(
    "changes",
    [dict(decoders=()), dict(decoders=("greedy",)), dict(seeds=(1, 1)), dict(prefix_len=20),
     dict(model_seed="abc"), dict(trace="some"), dict(attractor_weight=2.0)],
)
def test_invalid_configs_are_rejected(changes):
    with pytest.raises(ConfigError):
        small().replace(**changes)


def test_n_beyond_l_rejected_before_running(tmp_path):
    c = small().replace(N=3, L=2, decoders=("sjd", "sjd-vp"))
    with pytest.raises(ConfigError):
        run_experiment(c, tmp_path / "o")
    assert not (tmp_path / "o").exists()


def test_ar_costs_one_pass_per_free_position():
    c = small().replace(decoders=("ar",), prefix_len=3)
    rep = run_experiment(c)
    for seed in c.seeds:
        agg = rep.per_seed[seed]["ar"]
        assert agg.nfe == c.prompts * (c.length - c.prefix_len)
    assert rep.ratio("ar", "ar") == 1.0


def test_report_contents(tmp_path):
    c = small().replace(decoders=("ar", "jacobi", "sjd", "sjd-vp"))
    rep = run_experiment(c, tmp_path)
    d = json.loads((tmp_path / "summary.json").read_text())
    assert d["fingerprint"] == c.fingerprint()
    for dec in ("jacobi", "sjd", "sjd-vp"):
        assert rep.mean_nfe(dec) <= rep.mean_nfe("ar")
    rows = list(csv.DictReader((tmp_path / "per_seed.csv").open()))
    assert len(rows) == len(c.seeds) * 4
    assert {r["fingerprint"] for r in rows} == {c.fingerprint()}
    assert "fingerprint" in json.loads((tmp_path / "timing.json").read_text())
    assert "sjd-vp" in rep.table()


def test_cli_bench_is_deterministic(cfg_file, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["bench", "--config", str(cfg_file), "--out", str(out), "--jsonl", "-q"]) == 0
        outs.append(out)
    for f in ("summary.json", "per_seed.csv", "trajectories-sjd-vp.jsonl", "trajectories-sjd.jsonl"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    assert "mean NFE ratio" in capsys.readouterr().out


def test_cli_decode(cfg_file, tmp_path, capsys):
    log = tmp_path / "one.jsonl"
    rc = main(["decode", "--config", str(cfg_file), "--decoder", "sjd-vp", "--prompt", "2",
               "--jsonl", str(log), "--out", str(tmp_path)])
    assert rc == 0
    first = capsys.readouterr().out.splitlines()[0].split()
    assert len(first) == 20
    assert json.loads((tmp_path / "decode.json").read_text())["tokens"] == [int(t) for t in first]
    assert main(["analyze", str(log), "--out", str(tmp_path / "an")]) == 0
    assert (tmp_path / "an" / "analysis.json").exists()


def test_cli_exit_codes(cfg_file, tmp_path, capsys):
    c = str(cfg_file)
    assert main(["bench", "--config", c, "--set", "N=5", "-q", "--out", str(tmp_path / "x")]) == 2
    assert main(["bench", "--config", c, "--set", "gamma", "-q"]) == 2
    assert main(["decode", "--config", c, "--decoder", "sjd,ar"]) == 2
    assert main(["decode", "--config", c, "--decoder", "sjd", "--prompt", "99"]) == 2
    assert main(["decode", "--config", c, "--decoder", "ar", "--jsonl", str(tmp_path / "z.jsonl")]) == 2
    assert main(["bench", "--config", c, "--seed", "x-y", "-q"]) == 2
    assert main(["sweep", "--config", c, "--knob", "N", "--values", "", "-q"]) == 2
    assert main(["decode", "--config", c, "--decoder", "sjd", "--set", "max_iters=2"]) == 3
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    main(["decode", "--config", c, "--decoder", "sjd", "--jsonl", str(a)])
    main(["decode", "--config", c, "--decoder", "sjd-vp", "--jsonl", str(b)])
    assert main(["analyze", str(a), str(b)]) == 4
    assert main(["analyze", str(tmp_path / "absent.jsonl")]) == 4
    err = capsys.readouterr().err
    assert "config error" in err and "aborted" in err and "analysis input error" in err


def test_sweep_over_growth_steps(tmp_path):
    c = small().replace(decoders=("sjd", "sjd-vp"), baseline="sjd", L=4, prompts=3)
    with pytest.warns(UserWarning):
        rows = ablation_sweep(c, "N", [0, 1, 2, 3, 4], tmp_path)
    assert [r.value for r in rows if r.decoder == "sjd-vp"] == [0, 1, 2, 3, 4]
    text = (tmp_path / "sweep-N.csv").read_text().splitlines()
    assert len(text) == 1 + 10
    for bad in ([], [1.5]):
        with pytest.raises(ConfigError):
            ablation_sweep(c, "N", bad)
    with pytest.raises(ConfigError):
        ablation_sweep(c, "depth", [1])


def test_sweep_gamma_one_is_allowed_with_warning():
    c = small().replace(decoders=("sjd-vp",), baseline="sjd-vp", prompts=2, seeds=(0,))
    with pytest.warns(UserWarning):
        rows = ablation_sweep(c, "gamma", [0.2, 1.0])
    assert len(rows) == 2


def test_overhead_probe_reports_both_drafters():
    res = overhead_probe(small(), prompts=3)
    d = res["drafters"]
    assert d["sjd"]["ratio_vs_sjd"] == 1.0
    assert d["sjd-vp"]["mean_seconds_per_call"] > 0
    assert d["sjd"]["calls"] > 0 and res["prompts"] == 3


def test_theory_check_writes_csv(tmp_path):
    s = theory_check(small().replace(theory_trials=50), tmp_path)
    header = (tmp_path / "theory.csv").read_text().splitlines()[0]
    assert "delta_exact" in header and "residual" in header
    assert set(s) == {"0.6", "0.8", "0.95"}
    assert all(v["trials"] == 50 for v in s.values())
    assert (tmp_path / "theory-summary.json").exists()
