import json
import subprocess
import sys
import threading

import numpy as np
import pytest

from probfe.cli import main
from probfe.core import default_study_spec
from probfe.distributed import Coordinator, LocalExecutor, run_worker_loop
from probfe.pipeline import (
    MCST_FULL,
    MCST_REDUCED,
    RSM_FULL,
    RSM_REDUCED,
    StageFailed,
    read_series_csv,
    run_study,
    write_series_csv,
)
from probfe.simulator import build_simulator


def small_spec(**study):
    spec = default_study_spec()
    return spec.replace(n_mc=study.pop("n_mc", 200), **study)


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    spec = small_spec(rsm_reduced_trials=(50, 100))
    return spec, out, run_study(spec, out)


def test_four_analyses(study):
    spec, out, report = study
    labels = [a.label for a in report.analyses]
    assert labels == [MCST_FULL, RSM_FULL, MCST_REDUCED, f"{RSM_REDUCED}@50", RSM_REDUCED]
    selected = report.analysis(RSM_FULL).reduced_set
    assert report.analysis(MCST_REDUCED).reduced_set == selected
    assert report.analysis(RSM_REDUCED).reduced_set == selected
    assert report.analysis(MCST_FULL).convergence["checkpoints"]
    for label in labels[1:]:
        assert set(report.analysis(label).diffs_vs_mcst_full) == set(spec.metrics)
    assert report.completed_stages == [MCST_FULL, RSM_FULL, MCST_REDUCED, RSM_REDUCED]
    assert report.timing["simulations"] == 200 + 100 + 200 + 50 + 100


def test_artifacts_written(study):
    spec, out, report = study
    on_disk = json.loads((out / "report.json").read_text())
    assert [a["label"] for a in on_disk["analyses"]] == [a.label for a in report.analyses]
    for d in ("mcst-full", "rsm-full", "mcst-reduced", "rsm-reduced", "rsm-reduced_50"):
        assert (out / d / "envelope_tf_flexion_angle.csv").exists()
    assert (out / "rsm-full" / "sensitivity.csv").exists()
    assert (out / "mcst-full" / "convergence.csv").exists()
    diffs = sorted(p.name for p in (out / "diffs").iterdir())
    assert "diff_mcst-reduced_vs_mcst-full.csv" in diffs
    assert "diff_rsm-reduced_50_vs_mcst-reduced.csv" in diffs


def test_reduced_mcst_pins_other_variables(study):
    spec, out, report = study
    selected = set(report.analysis(RSM_FULL).reduced_set)
    X = np.loadtxt(out / "mcst-reduced" / "samples.csv", delimiter=",", skiprows=1)
    for i, v in enumerate(spec.variables):
        if v.name not in selected:
            assert np.all(X[:, i] == v.mean)
        else:
            assert X[:, i].std() > 0


def test_reduction_recovers_planted_keys(study):
    spec, out, report = study
    sim = build_simulator(spec)
    planted = {spec.variables[i].name for i in sim.model.key_set}
    assert len(planted & set(report.analysis(RSM_FULL).reduced_set)) >= 18


def test_dry_run_skips_mcst(tmp_path):
    report = run_study(small_spec(n_mc=0), tmp_path)
    assert report.analysis(MCST_FULL).skipped and report.analysis(MCST_REDUCED).skipped
    assert not report.analysis(RSM_FULL).skipped
    assert report.analysis(RSM_REDUCED).diffs_vs_mcst_full is None


def test_failing_stage_writes_partial_report(tmp_path):
    spec = small_spec(n_mc=50)
    spec = spec.replace(simulator={**spec.simulator, "fault_sample_ids": [7]})
    with pytest.raises(StageFailed) as err:
        run_study(spec, tmp_path)
    assert err.value.stage == MCST_FULL
    partial = json.loads((tmp_path / "partial_report.json").read_text())
    assert partial["failed_stage"] == MCST_FULL and partial["completed_stages"] == []


def test_local_and_distributed_equivalent(tmp_path):
    spec = small_spec(n_mc=100)
    sim = build_simulator(spec)
    local = run_study(spec, tmp_path / "local", LocalExecutor(sim, 2))
    with Coordinator() as coord:
        workers = [
            threading.Thread(target=run_worker_loop, args=(coord.address, sim), kwargs={"worker_id": f"w{k}", "idle_timeout": 5.0})
            for k in range(2)
        ]
        for w in workers:
            w.start()
        remote = run_study(spec, tmp_path / "remote", coord)
        coord.close(grace=0.3)
        for w in workers:
            w.join(10)
    for name in ("mcst-full/summaries.csv", "rsm-full/sensitivity.csv", "mcst-reduced/envelope_patellar_tilt.csv"):
        assert (tmp_path / "local" / name).read_bytes() == (tmp_path / "remote" / name).read_bytes()
    assert local.analysis(RSM_FULL).reduced_set == remote.analysis(RSM_FULL).reduced_set


def test_series_csv_round_trip(study, tmp_path):
    spec, out, report = study
    from probfe.core import ResponseSet

    series = np.random.default_rng(0).normal(size=(3, 2, 4))
    r = ResponseSet.from_series(series, ["a", "b"], [5, 6, 7])
    write_series_csv(r, tmp_path / "s.csv")
    again = read_series_csv(tmp_path / "s.csv")
    assert again.sample_ids == (5, 6, 7) and np.array_equal(again.series, series)


def test_cli_chain(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(small_spec(n_mc=30).dumps())
    w = str(tmp_path)
    assert main(["sample", "--config", str(cfg), "--out", f"{w}/s", "--kind", "design", "-n", "100"]) == 0
    assert main(["simulate", "--config", str(cfg), "--out", f"{w}/r", "--samples", f"{w}/s/samples.csv"]) == 0
    assert main(["fit", "--out", f"{w}/f", "--samples", f"{w}/s/samples.csv", "--summaries", f"{w}/r/summaries.csv"]) == 0
    assert main(["sensitivity", "--config", str(cfg), "--out", f"{w}/k", "--coefficients", f"{w}/f/coefficients.csv"]) == 0
    assert main(["reduce", "--config", str(cfg), "--out", f"{w}/k", "--sensitivity", f"{w}/k/sensitivity.csv", "--k", "19"]) == 0
    assert len(json.loads((tmp_path / "k" / "reduced.json").read_text())["selected"]) == 19
    assert main(["--config", str(cfg), "--out", f"{w}/e", "envelope", "--series", f"{w}/r/series.csv"]) == 0
    assert main(["compare", "--config", str(cfg), "--out", f"{w}/c", "--a", f"{w}/e", "--b", f"{w}/e"]) == 0
    assert "tf_flexion_angle" in capsys.readouterr().out
    assert (tmp_path / "c" / "diff_report.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["study", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    spec = small_spec(n_mc=20)
    cfg = tmp_path / "bad.json"
    cfg.write_text(spec.replace(simulator={**spec.simulator, "fault_sample_ids": [1]}).dumps())
    assert main(["study", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "MCST-full" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "probfe", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "coordinator" in proc.stdout
