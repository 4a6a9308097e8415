"""Experiment matrix, summary statistics, calibration and plot-ready exports.

Per-run artifacts live under ``<output_dir>/runs/`` as ``<stem>.csv`` (one
row per team step), ``<stem>.json`` (summary) and ``<stem>_deliveries.csv``
(per-recipient delivery trace). Stems are ``<method>__<qset>__s<seed>``
with a ``__hs`` suffix for oracle-handshake runs.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import yaml

from .config import ExperimentConfig
from .mission import MissionError, run_mission
from .network import TRACE_FIELDS, trace_rows
from .stats import DegenerateInputError, wilcoxon_one_sided
from .utility import UtilityMethod, calibrate_threshold

log = logging.getLogger(__name__)

BASELINE = UtilityMethod.ALWAYS.value


@dataclass(frozen=True)
class RunSpec:
    method: str
    qset: str
    seed: int
    handshake: bool = False

    @property
    def stem(self) -> str:
        return f"{self.method}__{self.qset}__s{self.seed}" + ("__hs" if self.handshake else "")

    @property
    def pair_key(self) -> tuple[str, int, bool]:
        return (self.qset, self.seed, self.handshake)


@dataclass
class RunResult:
    spec: RunSpec
    summary: dict
    steps_csv: str
    trace_csv: str

    @property
    def attempted(self) -> int:
        return self.summary["attempted"]

    @property
    def successful(self) -> int:
        return self.summary["successful"]

    @property
    def final_rmse(self) -> float:
        return self.summary["final_rmse"]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def execute(cfg: ExperimentConfig, spec: RunSpec, thresholds: dict | None = None,
            probe_methods=()) -> RunResult:
    qs = cfg.quantile_sets()[spec.qset]
    team_cfg = cfg.team_config(spec.method, qs, spec.seed, spec.handshake, thresholds, probe_methods)
    runlog = run_mission(cfg.build_field(spec.seed), team_cfg)
    summary = runlog.summary()
    summary.update(method=spec.method, qset=spec.qset, handshake=spec.handshake)
    return RunResult(spec, summary,
                     _csv_text(runlog.csv_header(), runlog.csv_rows()),
                     _csv_text(TRACE_FIELDS, trace_rows(runlog.reports)))


def _execute_star(args):
    cfg_raw, spec, thresholds, probes = args
    cfg = ExperimentConfig.from_dict(cfg_raw)
    try:
        return execute(cfg, spec, thresholds, probes)
    except MissionError as exc:
        return (spec, f"{exc} (after {len(exc.partial_log.records)} steps)")
    except Exception as exc:  # recorded and excluded, the matrix continues
        return (spec, f"{type(exc).__name__}: {exc}")


def run_specs(cfg: ExperimentConfig, specs: list[RunSpec], thresholds=None, probe_methods=(),
              workers: int | None = None) -> tuple[list[RunResult], list[tuple[RunSpec, str]]]:
    workers = cfg.workers if workers is None else workers
    jobs = [(cfg.raw, s, thresholds, tuple(probe_methods)) for s in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute_star, jobs))
    else:
        outcomes = [_execute_star(j) for j in jobs]
    results, failures = [], []
    for out in outcomes:
        if isinstance(out, RunResult):
            results.append(out)
        else:
            log.warning("run %s failed: %s", out[0].stem, out[1])
            failures.append(out)
    return results, failures


def matrix_specs(cfg: ExperimentConfig) -> list[RunSpec]:
    return [RunSpec(m.value, q, s, hs)
            for m in cfg.methods
            for q in cfg.quantile_sets()
            for s in cfg.seeds
            for hs in cfg.handshake_modes]


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run(result: RunResult, runs_dir: Path) -> None:
    runs_dir.mkdir(parents=True, exist_ok=True)
    stem = result.spec.stem
    _atomic_write(runs_dir / f"{stem}.csv", result.steps_csv)
    _atomic_write(runs_dir / f"{stem}_deliveries.csv", result.trace_csv)
    _atomic_write(runs_dir / f"{stem}.json", json.dumps(result.summary, indent=2, sort_keys=True) + "\n")


def load_runs(out_dir) -> list[RunResult]:
    runs_dir = Path(out_dir) / "runs"
    results = []
    for js in sorted(runs_dir.glob("*.json")):
        summary = json.loads(js.read_text())
        spec = RunSpec(summary["method"], summary["qset"], summary["seed"], summary["handshake"])
        steps = (runs_dir / f"{spec.stem}.csv").read_text()
        trace_path = runs_dir / f"{spec.stem}_deliveries.csv"
        results.append(RunResult(spec, summary, steps, trace_path.read_text() if trace_path.exists() else ""))
    return results


# ----------------------------------------------------------------------------
# Summary table
# ----------------------------------------------------------------------------

SUMMARY_FIELDS = ("method", "handshake", "n_runs", "attempted_mean", "attempted_std",
                  "successful_mean", "successful_std", "attempted_median_decrease_pct",
                  "successful_median_decrease_pct", "rmse_median", "rmse_median_increase_pct")


def _pct_change(value: float, base: float) -> float:
    if base == 0:
        return 0.0 if value == 0 else math.inf
    return (value - base) / base * 100.0


def _median(xs) -> float | None:
    xs = [x for x in xs]
    return float(np.median(xs)) if xs else None


def summarize(results: Iterable[RunResult]) -> list[dict]:
    """One row per (method, handshake); changes vs Always are per (qset, seed) pair medians."""
    results = list(results)
    base = {r.spec.pair_key: r for r in results if r.spec.method == BASELINE}
    groups: dict[tuple[str, bool], list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.spec.method, r.spec.handshake), []).append(r)
    rows = []
    for (method, hs), runs in sorted(groups.items()):
        att = np.array([r.attempted for r in runs], dtype=float)
        suc = np.array([r.successful for r in runs], dtype=float)
        paired = [(r, base[r.spec.pair_key]) for r in runs if r.spec.pair_key in base]
        is_base = method == BASELINE
        rows.append({
            "method": method,
            "handshake": hs,
            "n_runs": len(runs),
            "attempted_mean": float(att.mean()),
            "attempted_std": float(att.std()),
            "successful_mean": float(suc.mean()),
            "successful_std": float(suc.std()),
            "attempted_median_decrease_pct":
                None if is_base else _median(-_pct_change(r.attempted, b.attempted) for r, b in paired),
            "successful_median_decrease_pct":
                None if is_base else _median(-_pct_change(r.successful, b.successful) for r, b in paired),
            "rmse_median": float(np.median([r.final_rmse for r in runs])),
            "rmse_median_increase_pct":
                None if is_base else _median(_pct_change(r.final_rmse, b.final_rmse) for r, b in paired),
        })
    return rows


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_csv(rows: list[dict]) -> str:
    return _csv_text(SUMMARY_FIELDS, ([_fmt_cell(r[k]) for k in SUMMARY_FIELDS] for r in rows))


def run_matrix(cfg: ExperimentConfig, thresholds: dict | None = None, write: bool = True):
    """Run every (method, quantile set, seed, handshake) cell.

    Returns ``(summary_rows, results, failures)``; with ``write`` the run
    artifacts, ``summary.csv``/``summary.json`` and a ``failures.json``
    manifest go to ``cfg.output_dir``.
    """
    results, failures = run_specs(cfg, matrix_specs(cfg), thresholds)
    rows = summarize(results)
    if write:
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            write_run(r, out / "runs")
        _atomic_write(out / "summary.csv", summary_csv(rows))
        _atomic_write(out / "summary.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
        _atomic_write(out / "failures.json",
                      json.dumps([{"run": s.stem, "error": e} for s, e in failures], indent=2) + "\n")
        _atomic_write(out / "config.yaml", cfg.dump())
    return rows, results, failures


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------

CALIBRATION_PROBES = (UtilityMethod.REWARD, UtilityMethod.EGO_REWARD)


def utility_samples(results: Iterable[RunResult]) -> dict[str, list[float]]:
    """Per-teammate utilities logged by the calibration probes, per threshold family.

    Ego-reward is recipient-independent, so one value per step is kept.
    """
    samples: dict[str, list[float]] = {"reward": [], "ego": []}
    for r in results:
        reader = csv.DictReader(io.StringIO(r.steps_csv))
        for row in reader:
            us = [float(v) for k, v in row.items() if k.startswith("probe_reward_u")]
            samples["reward"].extend(us)
            samples["ego"].append(float(row["probe_ego_reward_u0"]))
    return samples


def calibrate(cfg: ExperimentConfig, percentile: float | None = None, write: bool = True) -> dict[str, float]:
    """Thresholds at ``percentile`` of utilities seen in Always runs on calibration seeds."""
    if percentile is None:
        percentile = float(cfg.raw["calibration"]["percentile"])
    specs = [RunSpec(BASELINE, q, s) for q in cfg.quantile_sets() for s in cfg.calibration_seeds]
    results, failures = run_specs(cfg, specs, probe_methods=CALIBRATION_PROBES)
    if not results:
        raise RuntimeError("every calibration run failed")
    samples = utility_samples(results)
    thresholds = {fam: calibrate_threshold(vals, percentile) for fam, vals in samples.items()}
    if write:
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
        fragment = {"thresholds": thresholds}
        _atomic_write(out / "calibration.yaml",
                      f"# percentile {percentile!r} over {len(results)} Always runs\n"
                      + yaml.safe_dump(fragment, sort_keys=True))
    return thresholds


# ----------------------------------------------------------------------------
# Handshake comparison
# ----------------------------------------------------------------------------

def handshake_comparison(results: Iterable[RunResult]) -> list[dict]:
    """Per method, one-sided Wilcoxon of oracle-handshake RMSE < default RMSE."""
    by_key = {(r.spec.method, r.spec.qset, r.spec.seed, r.spec.handshake): r for r in results}
    out = []
    for method in sorted({k[0] for k in by_key}):
        pairs = sorted(k[1:3] for k in by_key if k[0] == method and k[3]
                       and (method, k[1], k[2], False) in by_key)
        if not pairs:
            continue
        hs = [by_key[(method, q, s, True)].final_rmse for q, s in pairs]
        base = [by_key[(method, q, s, False)].final_rmse for q, s in pairs]
        row = {"method": method, "n_pairs": len(pairs),
               "rmse_median_handshake": float(np.median(hs)),
               "rmse_median_default": float(np.median(base)),
               "W": None, "p_value": None, "n_nonzero": None, "exact": None}
        try:
            res = wilcoxon_one_sided(hs, base)
            row.update(W=res.statistic, p_value=res.pvalue, n_nonzero=res.n, exact=res.exact)
        except (DegenerateInputError, ValueError) as exc:
            row["note"] = str(exc)
        out.append(row)
    return out


def analyze(out_dir) -> dict:
    out_dir = Path(out_dir)
    results = load_runs(out_dir)
    rows = summarize(results)
    hs = handshake_comparison(results)
    _atomic_write(out_dir / "summary.csv", summary_csv(rows))
    _atomic_write(out_dir / "summary.json", json.dumps(rows, indent=2, sort_keys=True) + "\n")
    _atomic_write(out_dir / "handshake.json", json.dumps(hs, indent=2, sort_keys=True) + "\n")
    return {"summary": rows, "handshake": hs}


# ----------------------------------------------------------------------------
# Plot-ready data
# ----------------------------------------------------------------------------

def _step_rows(result: RunResult) -> list[dict]:
    return list(csv.DictReader(io.StringIO(result.steps_csv)))


def emit_plot_data(results: Iterable[RunResult], outdir, expected: Iterable[RunSpec] = ()) -> dict[str, Path]:
    """Write tradeoff, cumulative-load, per-step transmission and final-RMSE tables.

    Runs listed in ``expected`` but absent from ``results`` are reported in
    ``manifest.json``; the tables are built from whatever is present.
    """
    results = sorted(results, key=lambda r: (r.spec.method, r.spec.qset, r.spec.seed, r.spec.handshake))
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {}

    rows = summarize(results)
    paths["tradeoff"] = outdir / "tradeoff.csv"
    _atomic_write(paths["tradeoff"], _csv_text(
        ("method", "handshake", "load_decrease_pct", "rmse_increase_pct"),
        ([r["method"], _fmt_cell(r["handshake"]),
          _fmt_cell(r["attempted_median_decrease_pct"] if r["method"] != BASELINE else 0.0),
          _fmt_cell(r["rmse_median_increase_pct"] if r["method"] != BASELINE else 0.0)] for r in rows)))

    per_step: dict[tuple[str, bool], dict[int, list[tuple[int, int, int]]]] = {}
    trans_rows = []
    for r in results:
        for row in _step_rows(r):
            k = int(row["team_step"])
            att, suc, cum = int(row["attempted"]), int(row["successful"]), int(row["cum_attempted"])
            per_step.setdefault((r.spec.method, r.spec.handshake), {}).setdefault(k, []).append((att, suc, cum))
            trans_rows.append([r.spec.method, r.spec.qset, r.spec.seed, _fmt_cell(r.spec.handshake), k, att, suc])

    paths["transmissions"] = outdir / "transmissions.csv"
    _atomic_write(paths["transmissions"], _csv_text(
        ("method", "qset", "seed", "handshake", "team_step", "attempted", "successful"), trans_rows))

    cum_rows = []
    for (method, hs), steps in sorted(per_step.items()):
        for k in sorted(steps):
            v = np.array(steps[k], dtype=float)
            cum_rows.append([method, _fmt_cell(hs), k + 1, repr(float(v[:, 2].mean())),
                             repr(float(v[:, 0].mean())), repr(float(v[:, 1].mean()))])
    paths["cumulative_load"] = outdir / "cumulative_load.csv"
    _atomic_write(paths["cumulative_load"], _csv_text(
        ("method", "handshake", "steps_completed", "cum_attempted_mean", "attempted_mean", "successful_mean"),
        cum_rows))

    paths["rmse_box"] = outdir / "rmse_box.csv"
    _atomic_write(paths["rmse_box"], _csv_text(
        ("method", "qset", "seed", "handshake", "final_rmse"),
        ([r.spec.method, r.spec.qset, r.spec.seed, _fmt_cell(r.spec.handshake), repr(r.final_rmse)]
         for r in results)))

    present = {r.spec for r in results}
    missing = sorted(s.stem for s in expected if s not in present)
    paths["manifest"] = outdir / "manifest.json"
    _atomic_write(paths["manifest"], json.dumps(
        {"runs": len(results), "missing": missing, "files": sorted(p.name for p in paths.values())},
        indent=2) + "\n")
    return paths
