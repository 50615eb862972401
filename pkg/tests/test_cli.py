import copy
import json
import os

import pytest

from fluctsim.cli import ConfigError, build_parser, main, parse_config

TF = [{"kind": "fourier_hermite", "k": [1, 0], "alpha": [1, 0]},
      {"kind": "fourier_hermite", "k": [0, 1], "alpha": [0, 0]}]


def base_config(**over):
    cfg = {"domain": {"d": 2, "eps": 0.02}, "t_samples": [0.0, 0.1],
           "test_functions": copy.deepcopy(TF), "ensemble": {"n_runs": 120, "base_seed": 5},
           "analyses": {"covariance": True, "wick": True}, "workers": 1}
    cfg.update(over)
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def read_outputs(out):
    return {n: open(os.path.join(out, n), "rb").read()
            for n in sorted(os.listdir(out)) if n.endswith(".csv") or n.endswith(".jsonl")}


def test_simulate_is_deterministic(tmp_path):
    path = write(tmp_path, base_config())
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["simulate", "--config", path, "--out", a]) == 0
    assert main(["simulate", "--config", path, "--out", b, "--workers", "1"]) == 0
    fa, fb = read_outputs(a), read_outputs(b)
    assert {"covariance.csv", "moments.csv", "gaussianity.csv", "fields.csv", "runs.csv",
            "snapshot_run0.jsonl"} <= set(fa)
    assert fa == fb
    man = json.load(open(os.path.join(a, "manifest.json")))
    assert len(man["run_seeds"]) == 120 and man["base_seed"] == 5
    # a different seed changes the ensemble
    c = str(tmp_path / "c")
    assert main(["simulate", "--config", path, "--out", c, "--seed", "6"]) == 0
    assert read_outputs(c)["fields.csv"] != fa["fields.csv"]


def test_covariance_columns(tmp_path):
    out = str(tmp_path / "o")
    assert main(["simulate", "--config", write(tmp_path, base_config()), "--out", out]) == 0
    header = open(os.path.join(out, "covariance.csv")).readline().strip().split(",")
    assert header == ["t", "g", "h", "cov_0t", "std_error", "gram", "gram_error"]


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c["domain"].update(d=4), "domain.d"),
    (lambda c: c["domain"].update(eps=-1), "domain.eps"),
    (lambda c: c["domain"].pop("eps"), "domain.eps"),
    (lambda c: c.update(t_samples=[0.2, 0.1]), "t_samples"),
    (lambda c: c["ensemble"].update(n_runs="many"), "ensemble.n_runs"),
    (lambda c: c["analyses"].update(spectra=True), "analyses.spectra"),
    (lambda c: c["test_functions"].append({"kind": "fourier_hermite", "k": [1, 0, 0], "alpha": [0, 0, 0]}),
     "test_functions[2]"),
    (lambda c: c.update(colour="red"), "colour"),
    (lambda c: c.update(sampler={"mode": "gibbs"}), "sampler.mode"),
])
def test_config_errors_name_field(tmp_path, capsys, mutate, field):
    cfg = base_config()
    mutate(cfg)
    with pytest.raises(ConfigError) as e:
        parse_config(cfg)
    assert e.value.field == field
    assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    assert field in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2


def test_precondition_failure(tmp_path):
    cfg = base_config(ensemble={"n_runs": 10, "base_seed": 1})
    assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3
    # analyze without a stored ensemble
    assert main(["analyze", "--config", write(tmp_path, base_config()), "--out", str(tmp_path / "empty")]) == 3


def test_other_subcommands_and_report(tmp_path, capsys):
    cfg = base_config(analyses={}, test_functions=[],
                      lbe={"K": 1, "A": 2, "method": "quadrature"},
                      ou={"dt": 0.05, "t_end": 5.0, "n_paths": 50, "record_every": 0.5, "scheme": "exact"},
                      clusters={"Theta": 0.05, "tau": 0.02, "graph_t_end": 0.1, "window": 0.05},
                      balance={"n_mc": 1_000_000})
    path, out = write(tmp_path, cfg), str(tmp_path / "o")
    for cmd in ("fd-check", "ou", "clusters", "balance"):
        assert main([cmd, "--config", path, "--out", out]) == 0, cmd
    files = set(os.listdir(out))
    assert {"fd_check.json", "ou_stationary_cov.csv", "clusters_run0.jsonl", "collision_graphs.jsonl",
            "balance.csv", "manifest.json"} <= files
    capsys.readouterr()
    assert main(["report", "--out", out]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["hash_mismatches"] == [] and set(rep["stages"]) >= {"fd_check", "ou", "clusters", "balance"}
    open(os.path.join(out, "balance.csv"), "a").write("tampered\n")
    capsys.readouterr()
    main(["report", "--out", out])
    assert json.loads(capsys.readouterr().out)["hash_mismatches"] == ["balance.csv"]


def test_parser_help_lists_commands():
    text = build_parser().format_help()
    for cmd in ("simulate", "analyze", "fd-check", "ou", "clusters", "balance", "report"):
        assert cmd in text
