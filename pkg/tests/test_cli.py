from __future__ import annotations

import json
import subprocess
import sys

import pytest

from factories import tiny_pipeline_config
from stabrisk.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from stabrisk.pipeline import run_pipeline


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    """A tiny pipeline run whose intermediate files the module CLIs are checked against."""
    out = tmp_path_factory.mktemp("study")
    return run_pipeline(tiny_pipeline_config(out, n_runs=3, ensemble=(3, 2)))


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def _test_files(study, family="mlp", n=3):
    d = study.out_dir / "predictions" / family / "test"
    return [str(d / f"{family}_{i:03d}.csv") for i in range(n)]


def test_stability_cli_reproduces_report(study, capsys):
    assert main(["stability", "--runs", *_test_files(study), "--k-grid", "5,20"]) == EXIT_OK
    assert _json(capsys) == study.report["families"]["mlp"]["stability"]


def test_evaluate_cli_reproduces_report(study, capsys):
    path = _test_files(study)[1]
    assert main(["evaluate", "--predictions", path, "--monthly"]) == EXIT_OK
    out = _json(capsys)
    per_run = study.report["families"]["mlp"]["performance"]["per_run"][1]
    assert out["aggregated"] == per_run["aggregated"]
    assert out["monthly"]["mean_roc_auc"] == per_run["monthly"]["mean_roc_auc"]
    assert out["monthly"]["n_pr_auc_months"] == per_run["monthly"]["n_pr_auc_months"]


def test_fairness_cli_reproduces_report(study, capsys):
    assert main(["fairness", "--runs", *_test_files(study), "--k-grid", "5,20"]) == EXIT_OK
    rows = _json(capsys)["ranges"]
    assert [{k: v for k, v in r.items() if k != "series"} for r in rows] == study.report["families"]["mlp"]["fairness"]


def test_ensemble_cli_reproduces_pipeline_ensemble(study, tmp_path, capsys):
    members = [str(study.out_dir / "predictions" / "mlp" / "test" / f"mlp_{i:03d}.csv") for i in range(6)]
    code = main(
        ["ensemble", "--runs", *members, "--groups", "3", "--members", "2", "--partition", "strided", "--out-dir", str(tmp_path)]
    )
    assert code == EXIT_OK
    for i in range(3):
        produced = (tmp_path / f"ens_{i:03d}.csv").read_bytes()
        shipped = (study.out_dir / "predictions" / "mlp_ensemble" / "test" / f"ens_{i:03d}.csv").read_bytes()
        assert produced == shipped
    ens = [str(tmp_path / f"ens_{i:03d}.csv") for i in range(3)]
    assert main(["stability", "--runs", *ens, "--k-grid", "5,20"]) == EXIT_OK
    assert _json(capsys) == study.report["families"]["mlp_ensemble"]["stability"]


def test_calibrate_cli_reproduces_calibrator(study, tmp_path):
    val = study.out_dir / "predictions" / "mlp" / "validation" / "mlp_000.csv"
    out = tmp_path / "iso.csv"
    assert main(["calibrate", "--predictions", str(val), "--out", str(out)]) == EXIT_OK
    assert out.read_bytes() == (study.out_dir / "calibrators" / "mlp" / "mlp_000.csv").read_bytes()

    uncalibrated = tmp_path / "raw.csv"
    lines = (study.out_dir / "predictions" / "mlp" / "test" / "mlp_000.csv").read_text().splitlines()
    stripped = [lines[0]] + [",".join(f if i != 4 else "" for i, f in enumerate(l.split(","))) for l in lines[1:]]
    uncalibrated.write_text("\n".join(stripped) + "\n")
    code = main(
        ["calibrate", "--predictions", str(val), "--out", str(tmp_path / "iso2.csv"), "--apply", str(uncalibrated),
         "--apply-dir", str(tmp_path / "applied")]
    )
    assert code == EXIT_OK
    applied = (tmp_path / "applied" / "raw.csv").read_bytes()
    assert applied == (study.out_dir / "predictions" / "mlp" / "test" / "mlp_000.csv").read_bytes()


def test_train_and_predict_cli_reproduce_pipeline_model(study, tmp_path):
    cohort = study.out_dir / "cohort"
    cfg = tmp_path / "train.ini"
    train = study.report["config"]["train"]
    seed = study.report["families"]["mlp"]["training"][0]["seed"]
    cfg.write_text("[train]\n" + "".join(f"{k} = {json.dumps(v)}\n" for k, v in train.items() if k != "seed"))
    model = tmp_path / "m.bin"
    args = ["train", "--model", "mlp", "--config", str(cfg), "--cohort", str(cohort), "--out", str(model), "--seed", str(seed)]
    assert main(args) == EXIT_OK
    assert model.read_bytes() == (study.out_dir / "models" / "mlp" / "mlp_000.bin").read_bytes()
    preds = tmp_path / "p.csv"
    code = main(["predict", "--model-file", str(model), "--cohort", str(cohort), "--run-id", "mlp_000", "--out", str(preds)])
    assert code == EXIT_OK
    shipped = (study.out_dir / "predictions" / "mlp" / "test" / "mlp_000.csv").read_text().splitlines()
    ours = preds.read_text().splitlines()
    raw = lambda rows: [",".join(r.split(",")[:4]) for r in rows]  # noqa: E731
    assert raw(ours) == raw(shipped)


def test_synth_cli(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("n_patients = 30\nn_months = 2\nfeature_dim = 10\ntarget_prevalence = 0.1\n")
    assert main(["synth", "--config", str(cfg), "--seed", "4", "--out-dir", str(tmp_path / "c")]) == EXIT_OK
    assert len((tmp_path / "c" / "examples.csv").read_text().splitlines()) == 1 + 60


def test_exit_codes(tmp_path, capsys):
    bad_cfg = tmp_path / "bad.ini"
    bad_cfg.write_text("[pipeline]\nk_grid = 0,10\n")
    assert main(["pipeline", "--config", str(bad_cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err

    bad = tmp_path / "bad.csv"
    bad.write_text("run_id,patient_id\n")
    assert main(["evaluate", "--predictions", str(bad)]) == EXIT_DATA
    assert "data error" in capsys.readouterr().err

    with pytest.raises(SystemExit) as err:
        main(["stability", "--runs", "x.csv", "--k-grid", "0"])
    assert err.value.code == 2


def test_stability_csv_plot_data(study, tmp_path, capsys):
    assert main(["stability", "--runs", *_test_files(study), "--k-grid", "5,20", "--csv", str(tmp_path), "--family", "mlp"]) == 0
    capsys.readouterr()
    curve = (tmp_path / "jaccard_curve.csv").read_text().splitlines()
    assert curve[0] == "family,k,mean,std_over_months" and curve[1].startswith("mlp,5,")
    scatter = (tmp_path / "risk_scatter.csv").read_text().splitlines()
    assert scatter[0] == "patient_id,month,run_a,run_b,risk_a,risk_b"


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "stabrisk.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("synth", "train", "calibrate", "evaluate", "stability", "ensemble", "fairness", "pipeline", "compare"):
        assert sub in out.stdout
