import csv
import json
import subprocess
import sys
from itertools import permutations

import pytest

from mixopt import TABLE1_PARAMS
from mixopt.cli import EXIT_INPUT, EXIT_OK, main
from mixopt.scaling_model import DomainParams

from conftest import plan_config


@pytest.fixture
def files(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(plan_config()))
    truth = tmp_path / "truth.json"
    truth.write_text(json.dumps({"params": [p.to_dict() for p in TABLE1_PARAMS], "noise_sigma": 0.0, "seed": 0}))
    params = tmp_path / "table1.json"
    params.write_text(json.dumps([p.to_dict() for p in TABLE1_PARAMS]))
    return tmp_path, cfg, truth, params


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_plan_writes_manifests(files):
    d, cfg, *_ = files
    assert run("plan", "--config", cfg, "--out-dir", d / "p") == EXIT_OK
    assert len(list((d / "p" / "manifests").glob("*.json"))) == 13
    assert json.loads((d / "p" / "plan.json").read_text())["unit_sample_n"] == 1_980_000


def test_plan_missing_source(files, capsys):
    d, cfg, *_ = files
    data = json.loads(cfg.read_text())
    del data["domains"][2]["source_uri"]
    cfg.write_text(json.dumps(data))
    assert run("plan", "--config", cfg, "--out-dir", d) == EXIT_INPUT
    assert "Code" in capsys.readouterr().err


def test_plan_ratio_override(files):
    d, *_ = files
    cfg = d / "two.json"
    cfg.write_text(json.dumps(plan_config(names=("a", "b"))))
    assert run("plan", "--config", cfg, "--ratios", "0.5,2", "--out-dir", d / "two") == EXIT_OK
    assert len(list((d / "two" / "manifests").glob("*.json"))) == 5


def simulate(d, cfg, truth, noise=None, seed=None):
    assert run("plan", "--config", cfg, "--out-dir", d) == EXIT_OK
    extra = (["--noise", noise] if noise is not None else []) + (["--seed", seed] if seed is not None else [])
    assert run("simulate", "--truth", truth, "--plan", d / "plan.json", "--out-dir", d, *extra) == EXIT_OK
    return d / "losses.csv"


def test_fit_from_simulated(files):
    d, cfg, truth, _ = files
    losses = simulate(d, cfg, truth)
    assert len(read_csv(losses)) == 1 + 39
    assert run("fit", "--losses", losses, "--plan", d / "plan.json", "--out-dir", d) == EXIT_OK
    params = json.loads((d / "params.json").read_text())
    assert len(params) == 3
    assert all(p["fit"]["converged"] for p in params)
    assert all(p["fit"]["delta"] == 0.001 for p in params)


def test_fit_delta_echoed(files):
    d, cfg, truth, _ = files
    losses = simulate(d, cfg, truth)
    run("fit", "--losses", losses, "--plan", d / "plan.json", "--delta", "0.01", "--out-dir", d)
    assert {p["fit"]["delta"] for p in json.loads((d / "params.json").read_text())} == {0.01}


def test_fit_missing_run(files, capsys):
    d, cfg, truth, _ = files
    losses = simulate(d, cfg, truth)
    rows = [r for r in read_csv(losses) if r[0] != "perturb_Math_3"]
    with open(losses, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert run("fit", "--losses", losses, "--plan", d / "plan.json", "--out-dir", d) == EXIT_INPUT
    assert "perturb_Math_3" in capsys.readouterr().err


def test_optimize(files):
    d, _, _, params = files
    assert run("optimize", "--params", params, "--budget", "20000000", "--out-dir", d) == EXIT_OK
    out = json.loads((d / "weights.json").read_text())
    assert out["converged"] and out["budget_tokens"] == 20_000_000
    assert out["kkt_residual"] <= 1e-10
    assert sum(w["weight"] for w in out["weights"]) == pytest.approx(1.0, abs=1e-12)
    assert [w["domain"] for w in out["weights"]] == ["IF", "Math", "Code"]


def test_optimize_gamma_two_domains(files):
    d, *_ = files
    two = d / "two.json"
    two.write_text(json.dumps([p.to_dict() for p in TABLE1_PARAMS[:2]]))
    assert run("optimize", "--params", two, "--budget", "1e7", "--gamma", "1,0", "--out-dir", d) == EXIT_OK
    out = json.loads((d / "weights.json").read_text())
    assert sum(w["weight"] for w in out["weights"]) == pytest.approx(1.0, abs=1e-12)
    assert out["gamma"] == [1.0, 0.0]


@pytest.mark.parametrize("budget", ["0", "-5", "lots"])
def test_optimize_bad_budget(files, budget):
    d, _, _, params = files
    assert run("optimize", "--params", params, "--budget", budget, "--out-dir", d) == EXIT_INPUT


def test_grid_and_sweep(files):
    d, _, _, params = files
    assert run("grid", "--params", params, "--budget", "20000000", "--out-dir", d) == EXIT_OK
    rows = read_csv(d / "grid.csv")
    assert rows[0] == ["IF", "Math", "Code", "objective"] and len(rows) == 1 + 21
    assert (d / "surface.svg").read_text().startswith("<svg")
    assert run("sweep", "--params", params, "--budgets", "5M,20M,200M", "--out-dir", d) == EXIT_OK
    rows = read_csv(d / "sweep.csv")
    assert [r[0] for r in rows[1:]] == ["5000000", "20000000", "200000000"]
    assert (d / "weights_vs_budget.svg").exists()


def test_grid_two_domains_no_surface(files, caplog):
    d, *_ = files
    two = d / "two.json"
    two.write_text(json.dumps([p.to_dict() for p in TABLE1_PARAMS[:2]]))
    assert run("grid", "--params", two, "--budget", "1e7", "--levels", "0.25,0.5,0.75", "--out-dir", d / "g") == 0
    assert len(read_csv(d / "g" / "grid.csv")) == 1 + 3
    assert not (d / "g" / "surface.svg").exists()


def test_report_identical_domains_symmetric_surface(files):
    d, *_ = files
    same = DomainParams(C=1.0, k=0.1, alpha=0.5, beta=0.05, E=1.2)
    path = d / "same.json"
    path.write_text(json.dumps([same.replace(name=n).to_dict() for n in "abc"]))
    assert run("report", "--params", path, "--budget", "2e7", "--out-dir", d / "r") == EXIT_OK
    grid = {tuple(float(x) for x in r[:3]): float(r[3]) for r in read_csv(d / "r" / "grid.csv")[1:]}
    for w, f in grid.items():
        # permuting identical domains cannot change the objective
        orbit = [grid[p] for p in permutations(w)]
        assert max(orbit) - min(orbit) <= 1e-9
    weights = json.loads((d / "r" / "weights.json").read_text())["weights"]
    assert all(abs(w["weight"] - 1 / 3) <= 1e-12 for w in weights)


def test_report_from_losses(files):
    d, cfg, truth, _ = files
    losses = simulate(d, cfg, truth)
    code = run("report", "--plan", d / "plan.json", "--losses", losses, "--budgets", "5M,20M,200M",
               "--out-dir", d / "rep")
    assert code == EXIT_OK
    for name in ("pipeline_report.json", "params.json", "weights.json", "sweep.csv", "grid.csv",
                 "surface.svg", "weights_vs_budget.svg"):
        assert (d / "rep" / name).exists(), name
    rep = json.loads((d / "rep" / "pipeline_report.json").read_text())
    assert len(rep["sweep"]) == 3 and rep["final"]["budget_tokens"] == 20_000_000


def test_recover(files):
    d, cfg, truth, _ = files
    run("plan", "--config", cfg, "--out-dir", d)
    assert run("recover", "--truth", truth, "--plan", d / "plan.json", "--budgets", "5M,200M", "--out-dir", d) == 0
    rep = json.loads((d / "recovery_report.json").read_text())
    assert max(rep["relative_regret"]) <= 1e-3


def test_every_subcommand_idempotent(files):
    d, cfg, truth, params = files
    outs = []
    for tag in ("one", "two"):
        o = d / tag
        losses = simulate(o, cfg, truth, noise=0.01, seed=11)
        run("fit", "--losses", losses, "--plan", o / "plan.json", "--out-dir", o)
        run("optimize", "--params", params, "--budget", "2e7", "--out-dir", o)
        run("sweep", "--params", params, "--budgets", "5M,20M,200M", "--out-dir", o)
        run("grid", "--params", params, "--budget", "2e7", "--out-dir", o)
        run("report", "--plan", o / "plan.json", "--losses", losses, "--out-dir", o / "report")
        outs.append(o)
    one = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    two = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
    assert one == two and len(one) > 20
    for rel in one:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_seed_changes_noise(files):
    d, cfg, truth, _ = files
    a = simulate(d / "a", cfg, truth, noise=0.01, seed=1).read_bytes()
    b = simulate(d / "b", cfg, truth, noise=0.01, seed=2).read_bytes()
    assert a != b


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mixopt.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("plan", "fit", "optimize", "sweep", "grid", "simulate", "recover", "report"):
        assert cmd in out.stdout


def test_missing_input_file(files):
    d, *_ = files
    assert run("optimize", "--params", d / "nope.json", "--budget", "1e7", "--out-dir", d) == EXIT_INPUT
