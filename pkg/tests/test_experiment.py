import csv
import io
import json

import numpy as np
import pytest
import yaml

from quantcomm.config import DEFAULTS, SCHEMA, ConfigError, ExperimentConfig
from quantcomm.experiment import RunSpec, analyze, calibrate, emit_plot_data, execute, load_runs, \
    matrix_specs, run_matrix, run_specs, utility_samples, CALIBRATION_PROBES

from oracles import sorted_quantile

CHEAP = {"field": {"width": 12, "height": 12}, "team": {"budget": 3},
         "calibration": {"seeds": 2}}


def cheap(tmp, **experiment):
    return ExperimentConfig.from_dict({**CHEAP, "experiment": {"output_dir": str(tmp), **experiment}})


@pytest.fixture(scope="module")
def matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("matrix")
    cfg = cheap(out)
    rows, results, failures = run_matrix(cfg)
    return cfg, rows, results, failures


def read_csv(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_schema_parses_to_defaults():
    assert yaml.safe_load(SCHEMA) == DEFAULTS
    assert DEFAULTS["team"] == {"n_robots": 4, "budget": 10, "spread": 0.2}


def test_config_errors():
    with pytest.raises(ConfigError, match="team.bogus"):
        ExperimentConfig.from_dict({"team": {"bogus": 1}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": {"seeds": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": {"methods": []}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"experiment": {"methods": ["telepathy"]}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(preset="nope")


def test_presets_and_load(tmp_path):
    assert len(matrix_specs(ExperimentConfig.from_dict())) == 75
    assert len(matrix_specs(ExperimentConfig.from_dict(preset="compact"))) == 60
    p = tmp_path / "c.yaml"
    p.write_text("experiment:\n  seeds: 2\n  quantile_sets:\n    tails: [0.05, 0.95]\n")
    cfg = ExperimentConfig.load(p)
    assert list(cfg.quantile_sets()) == ["tails"]
    assert len(matrix_specs(cfg)) == 10
    assert ExperimentConfig.from_dict(cfg.raw).dump() == cfg.dump()


def test_seventy_five_artifacts(matrix):
    cfg, rows, results, failures = matrix
    assert not failures and len(results) == 75
    runs = cfg.output_dir / "runs"
    assert len(list(runs.glob("*.json"))) == 75
    assert len(list(runs.glob("*_deliveries.csv"))) == 75
    assert len(list(runs.glob("*.csv"))) == 150
    for name in ("summary.csv", "summary.json", "failures.json", "config.yaml"):
        assert (cfg.output_dir / name).exists()


def test_summary_rows(matrix):
    _, rows, results, _ = matrix
    by = {r["method"]: r for r in rows}
    assert by["always"]["attempted_median_decrease_pct"] is None
    assert by["always"]["attempted_mean"] == 3 * 4 * 3 and by["always"]["attempted_std"] == 0
    assert by["never"]["attempted_median_decrease_pct"] == 100.0
    assert by["never"]["attempted_mean"] == 0
    # pairwise median, not a change of medians
    base = {(r.spec.qset, r.spec.seed): r.final_rmse for r in results if r.spec.method == "always"}
    want = float(np.median([(r.final_rmse - base[(r.spec.qset, r.spec.seed)]) / base[(r.spec.qset, r.spec.seed)] * 100
                            for r in results if r.spec.method == "reward"]))
    assert by["reward"]["rmse_median_increase_pct"] == pytest.approx(want)


def test_step_csv_shape(matrix):
    _, _, results, _ = matrix
    for r in results:
        rows = list(csv.DictReader(io.StringIO(r.steps_csv)))
        assert len(rows) == 12
        assert [int(x["cum_attempted"]) for x in rows][-1] == r.attempted


def test_load_runs_roundtrip(matrix):
    cfg, _, results, _ = matrix
    loaded = {r.spec: r for r in load_runs(cfg.output_dir)}
    for r in results:
        assert loaded[r.spec].steps_csv == r.steps_csv
        assert loaded[r.spec].summary["final_rmse"] == r.final_rmse


def test_matrix_byte_determinism(tmp_path):
    blobs = []
    for name in ("a", "b"):
        cfg = cheap(tmp_path / name, seeds=2, methods=["action", "always", "ego_reward"])
        run_matrix(cfg)
        blobs.append({p.relative_to(cfg.output_dir): p.read_bytes()
                      for p in sorted(cfg.output_dir.rglob("*.csv"))})
    assert blobs[0].keys() == blobs[1].keys() and len(blobs[0]) > 0
    assert blobs[0] == blobs[1]


def test_parallel_equals_serial(tmp_path):
    cfg = cheap(tmp_path, seeds=2, methods=["reward"])
    specs = matrix_specs(cfg)
    serial, _ = run_specs(cfg, specs, workers=1)
    parallel, _ = run_specs(cfg, specs, workers=2)
    assert [r.steps_csv for r in serial] == [r.steps_csv for r in parallel]


def test_failed_runs_are_recorded(tmp_path):
    cfg = ExperimentConfig.from_dict({**CHEAP, "field": {"source": "raster", "path": str(tmp_path / "missing.csv")},
                                      "experiment": {"output_dir": str(tmp_path), "seeds": 1,
                                                     "methods": ["always"]}})
    rows, results, failures = run_matrix(cfg)
    assert results == [] and len(failures) == 3
    assert len(json.loads((tmp_path / "failures.json").read_text())) == 3


def test_plot_data(matrix, tmp_path):
    cfg, _, results, _ = matrix
    paths = emit_plot_data(results, tmp_path, matrix_specs(cfg))
    trans = read_csv(paths["transmissions"])
    assert len(trans) == 75 * 12
    assert all(r["attempted"] == "0" and r["successful"] == "0" for r in trans if r["method"] == "never")
    cum = read_csv(paths["cumulative_load"])
    for method in {r["method"] for r in cum}:
        series = [float(r["cum_attempted_mean"]) for r in cum if r["method"] == method]
        assert series == sorted(series)
    always = [r for r in cum if r["method"] == "always"]
    assert all(float(r["cum_attempted_mean"]) == 3 * int(r["steps_completed"]) for r in always)
    assert len(read_csv(paths["rmse_box"])) == 75
    trade = {r["method"]: r for r in read_csv(paths["tradeoff"])}
    assert float(trade["always"]["load_decrease_pct"]) == 0.0
    assert float(trade["never"]["load_decrease_pct"]) == 100.0
    assert json.loads(paths["manifest"].read_text())["missing"] == []


def test_plot_manifest_lists_gaps(matrix, tmp_path):
    cfg, _, results, _ = matrix
    paths = emit_plot_data(results[5:], tmp_path, matrix_specs(cfg))
    missing = json.loads(paths["manifest"].read_text())["missing"]
    assert sorted(missing) == sorted(r.spec.stem for r in results[:5])


@pytest.fixture(scope="module")
def calibration_runs(tmp_path_factory):
    cfg = cheap(tmp_path_factory.mktemp("cal"))
    specs = [RunSpec("always", q, s) for q in cfg.quantile_sets() for s in cfg.calibration_seeds]
    results, _ = run_specs(cfg, specs, probe_methods=CALIBRATION_PROBES)
    return cfg, utility_samples(results)


def test_calibrate_matches_sort_oracle(calibration_runs):
    cfg, samples = calibration_runs
    for pct in (0.0, 0.25, 1.0):
        th = calibrate(cfg, pct, write=False)
        for fam in ("reward", "ego"):
            finite = [v for v in samples[fam] if np.isfinite(v)]
            assert th[fam] == pytest.approx(sorted_quantile(finite, pct), rel=1e-12)
    assert th["reward"] == max(v for v in samples["reward"] if np.isfinite(v))


def test_calibration_extremes_bound_transmissions(calibration_runs, tmp_path):
    cfg, _ = calibration_runs
    low, high = calibrate(cfg, 0.0, write=False), calibrate(cfg, 1.0, write=False)
    for method in ("reward", "ego_reward"):
        spec = RunSpec(method, "quartiles", 0)
        n_low = execute(cfg, spec, low).attempted
        n_high = execute(cfg, spec, high).attempted
        assert n_high <= n_low <= execute(cfg, RunSpec("always", "quartiles", 0)).attempted


def test_calibrate_writes_fragment(tmp_path):
    cfg = cheap(tmp_path)
    th = calibrate(cfg, 0.25)
    frag = yaml.safe_load((tmp_path / "calibration.yaml").read_text())
    assert frag == {"thresholds": th}
    assert cfg.updated(frag).thresholds == th


def test_analyze_handshake(tmp_path):
    cfg = cheap(tmp_path, seeds=3, methods=["action"], handshake_modes=[False, True])
    run_matrix(cfg)
    out = analyze(tmp_path)
    (row,) = out["handshake"]
    assert row["method"] == "action" and row["n_pairs"] == 9
    assert (tmp_path / "handshake.json").exists()
    assert {r["handshake"] for r in out["summary"]} == {False, True}
