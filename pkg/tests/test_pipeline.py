from __future__ import annotations

import json
from dataclasses import replace

import pytest

import stabrisk.pipeline as pipeline
from factories import tiny_pipeline_config
from stabrisk.exceptions import ConfigError, StageError
from stabrisk.pipeline import PipelineConfig, compare_architectures, load_pipeline_config, run_pipeline


@pytest.fixture(scope="module")
def tiny_compare(tmp_path_factory):
    return compare_architectures(tiny_pipeline_config(tmp_path_factory.mktemp("cmp")))


def test_tiny_pipeline_emits_every_section(tmp_path):
    result = run_pipeline(tiny_pipeline_config(tmp_path))
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema_version"] == 1
    assert set(report) == {"schema_version", "config", "cohort", "families"}
    assert set(report["families"]) == {"mlp", "mlp_ensemble"}
    fam = report["families"]["mlp"]
    assert set(fam) >= {"status", "run_ids", "performance", "stability", "fairness", "training"}
    assert fam["run_ids"] == ["mlp_000", "mlp_001"]
    assert [row["k"] for row in fam["stability"]["jaccard"]] == [5, 20]
    assert report["families"]["mlp_ensemble"]["members"] == {"groups": 2, "members": 2, "partition": "strided"}
    for sub in ("cohort/patients.csv", "cohort/examples.csv", "plots/jaccard_curve.csv", "plots/fairness_ranges.csv"):
        assert (tmp_path / sub).is_file()
    # 2x2 ensemble members: four trained MLPs, each with model, calibrator and predictions
    for i in range(4):
        rid = f"mlp_{i:03d}"
        assert (tmp_path / "models" / "mlp" / f"{rid}.bin").is_file()
        assert (tmp_path / "calibrators" / "mlp" / f"{rid}.csv").is_file()
        assert (tmp_path / "predictions" / "mlp" / "validation" / f"{rid}.csv").is_file()
        assert (tmp_path / "predictions" / "mlp" / "test" / f"{rid}.csv").is_file()
    assert sorted(p.name for p in (tmp_path / "predictions" / "mlp_ensemble" / "test").iterdir()) == [
        "ens_000.csv",
        "ens_001.csv",
    ]
    timings = json.loads((tmp_path / "timings.json").read_text())
    assert len(timings["train_seconds"]["mlp"]) == 4
    assert result.timings == timings
    assert not (tmp_path / "FAILED").exists()


@pytest.mark.trivial
def test_same_config_twice_gives_identical_report(tmp_path):
    run_pipeline(tiny_pipeline_config(tmp_path / "a", seed=5))
    run_pipeline(tiny_pipeline_config(tmp_path / "b", seed=5))
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_root_seed_changes_results(tmp_path):
    a = run_pipeline(tiny_pipeline_config(tmp_path / "a", seed=1, ensemble=None))
    b = run_pipeline(tiny_pipeline_config(tmp_path / "b", seed=2, ensemble=None))
    assert a.report["families"]["mlp"]["training"][0]["seed"] != b.report["families"]["mlp"]["training"][0]["seed"]
    assert (tmp_path / "a" / "report.json").read_bytes() != (tmp_path / "b" / "report.json").read_bytes()


@pytest.mark.trivial
def test_zero_in_k_grid_fails_before_any_work(tmp_path):
    out = tmp_path / "never"
    with pytest.raises(ConfigError):
        run_pipeline(replace(tiny_pipeline_config(out, ensemble=None), k_grid=(0, 10)))
    assert not out.exists()


def test_config_validation():
    for bad in (dict(n_runs=1), dict(k_grid=(10, 5)), dict(k_grid=()), dict(ensemble=(1, 10)), dict(model="svm")):
        with pytest.raises(ConfigError):
            PipelineConfig(**bad)


@pytest.mark.trivial
def test_compare_has_jaccard_for_three_families_at_every_k(tiny_compare):
    families = tiny_compare.report["families"]
    assert set(families) == {"lr", "mlp", "mlp_ensemble"}
    for fam in families.values():
        assert [row["k"] for row in fam["stability"]["jaccard"]] == [5, 20]
    rows = (tiny_compare.out_dir / "plots" / "jaccard_curve.csv").read_text().splitlines()
    assert rows[0] == "family,k,mean,std_over_months"
    assert len(rows) == 1 + 3 * 2


def test_compare_uses_the_same_cohort_and_seeds(tiny_compare):
    fams = tiny_compare.report["families"]
    assert fams["lr"]["run_ids"] == ["lr_000", "lr_001"]
    lr = tiny_compare.run_sets["lr"].reference
    mlp = tiny_compare.run_sets["mlp"].reference
    assert lr.keys == mlp.keys


@pytest.mark.trivial
def test_lr_rows_survive_mlp_failure(tmp_path, monkeypatch):
    real = pipeline._train_one

    def flaky(cohort, family, *args):
        if family == "mlp":
            raise RuntimeError("simulated MLP crash")
        return real(cohort, family, *args)

    monkeypatch.setattr(pipeline, "_train_one", flaky)
    result = compare_architectures(tiny_pipeline_config(tmp_path))
    fams = result.report["families"]
    assert fams["lr"]["status"] == "ok"
    assert [row["k"] for row in fams["lr"]["stability"]["jaccard"]] == [5, 20]
    for name in ("mlp", "mlp_ensemble"):
        assert fams[name]["status"] == "failed"
        assert fams[name]["stage"] == "train:mlp"
        assert "simulated MLP crash" in fams[name]["error"]
    assert json.loads((tmp_path / "report.json").read_text())["families"]["lr"]["status"] == "ok"
    assert "train:mlp" in (tmp_path / "FAILED").read_text()


def test_single_family_failure_names_stage(tmp_path, monkeypatch):
    def broken(*args):
        raise RuntimeError("boom")

    monkeypatch.setattr(pipeline, "_train_one", broken)
    with pytest.raises(StageError) as err:
        run_pipeline(tiny_pipeline_config(tmp_path, ensemble=None))
    assert err.value.stage == "train:mlp"
    assert (tmp_path / "FAILED").is_file()
    assert (tmp_path / "cohort" / "patients.csv").is_file()


def test_pipeline_config_file(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text(
        "[pipeline]\nn_runs = 3\nk_grid = 5,50\nensemble_groups = 3\nensemble_members = 2\n"
        "[cohort]\nn_patients = 100\n[train]\nepochs = 2\n"
    )
    cfg = load_pipeline_config(path, seed=9)
    assert cfg.n_runs == 3 and cfg.k_grid == (5, 50) and cfg.ensemble == (3, 2)
    assert cfg.cohort.n_patients == 100
    assert cfg.train.epochs == 2 and cfg.train.architecture == (32, 16, 8)
    assert cfg.seed == 9
    path.write_text("[pipeline]\nunknown_key = 1\n")
    with pytest.raises(ConfigError):
        load_pipeline_config(path)


def test_parallel_training_gives_the_same_report(tmp_path):
    run_pipeline(tiny_pipeline_config(tmp_path / "serial", ensemble=None))
    run_pipeline(replace(tiny_pipeline_config(tmp_path / "parallel", ensemble=None), jobs=2))
    serial = (tmp_path / "serial" / "report.json").read_bytes()
    assert serial == (tmp_path / "parallel" / "report.json").read_bytes()
