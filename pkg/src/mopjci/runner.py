"""Repeated experiments: data per run, every method, metrics, aggregates and artifacts.

Output layout under ``out_dir/<plan name>/``::

    run_<r>/test.csv                 test set of run r (dataset CSV format)
    run_<r>/<method>/tree.json       fitted partition
    run_<r>/<method>/metrics.json    MetricsReport
    run_<r>/<method>/subgroups.csv   per-group characteristics on the test set
    summary.csv / summary.json       mean and sd per method and metric
    failures.log                     only when some run failed

All files are deterministic functions of the plan, so re-running a plan
reproduces them byte for byte regardless of the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conformal import band_samples, fit_and_band
from .core import ExperimentConfig, RngStream, TrialDataset, read_dataset_csv, write_dataset_csv
from .datagen import (DRIVERS, ResponseSurfaceSpec, SyntheticSpec, gen_response_surface,
                      gen_synthetic, load_covariates)
from .forest import DEFAULT_QRF, SEMI_SYNTHETIC_RF, SYNTHETIC_RF, ForestHyperparams
from .metrics import MetricsReport, aggregate, evaluate, summary_csv
from .partition import PartitionTree, assign_groups, partition

log = logging.getLogger(__name__)

SCR_METHOD = "mop_jci_scr"
SCQR_METHOD = "mop_jci_scqr"
BASELINE_PREFIX = "baseline:"
SWEEP_PARAMS = ("lambda", "gamma", "beta")
FOREST_PRESETS = {"synthetic": SYNTHETIC_RF, "semi_synthetic": SEMI_SYNTHETIC_RF}


def method_outcomes(method: str, d: int):
    """Outcome indices a method models."""
    if method in (SCR_METHOD, SCQR_METHOD):
        return list(range(d))
    if method.startswith(BASELINE_PREFIX):
        k = int(method[len(BASELINE_PREFIX):])
        if not 0 <= k < d:
            raise ValueError(f"{method}: outcome index out of range for {d} outcomes")
        return [k]
    raise ValueError(f"unknown method {method!r}")


def _method_stream_id(method: str) -> int:
    # fixed per method, so adding or removing methods leaves the others' results unchanged
    if method == SCR_METHOD:
        return 0
    if method == SCQR_METHOD:
        return 1
    return 2 + int(method[len(BASELINE_PREFIX):])


def method_config(method: str, cfg: ExperimentConfig) -> ExperimentConfig:
    if method == SCR_METHOD:
        return cfg.replace(estimator="rf_scr")
    if method == SCQR_METHOD:
        return cfg.replace(estimator="qrf_scqr", lambda_=0.0)
    # a single-outcome SCR partition
    return cfg.replace(estimator="rf_scr", outcome_weights=(1.0,))


@dataclass(frozen=True)
class ExperimentPlan:
    """What to run.

    ``dataset`` is one of

    * ``{"kind": "synthetic", ...SyntheticSpec fields}`` (seed comes from the config),
    * ``{"kind": "response_surface", "covariates": path, "surface": {...}}``,
    * ``{"kind": "csv", "path": path, "test_fraction": 0.2}``.

    ``forest`` is a preset name (``"synthetic"``, ``"semi_synthetic"``) or a
    dict of :class:`ForestHyperparams` fields; by default synthetic data uses
    the synthetic preset and everything else the semi-synthetic one.
    """

    name: str
    dataset: dict
    methods: tuple = ("baseline:0", "baseline:1", SCR_METHOD, SCQR_METHOD)
    config: ExperimentConfig = field(default_factory=ExperimentConfig)
    forest: object = None
    qrf: object = None
    expected: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ValueError("plan needs at least one method")
        for m in self.methods:
            if m not in (SCR_METHOD, SCQR_METHOD) and not (
                    m.startswith(BASELINE_PREFIX) and m[len(BASELINE_PREFIX):].isdigit()):
                raise ValueError(f"unknown method {m!r}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("duplicate methods")
        if self.dataset.get("kind") not in ("synthetic", "response_surface", "csv"):
            raise ValueError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        if not self.name or "/" in self.name:
            raise ValueError("plan name must be a non-empty path component")
        if int(self.config.n_runs) < 1:
            raise ValueError("n_runs must be positive")

    @property
    def kind(self):
        return self.dataset["kind"]

    def forest_params(self) -> ForestHyperparams:
        return _hyperparams(self.forest, SYNTHETIC_RF if self.kind == "synthetic" else SEMI_SYNTHETIC_RF)

    def qrf_params(self) -> ForestHyperparams:
        return _hyperparams(self.qrf, DEFAULT_QRF)

    def with_config(self, **changes) -> "ExperimentPlan":
        return ExperimentPlan(self.name, self.dataset, self.methods, self.config.replace(**changes),
                              self.forest, self.qrf, self.expected)

    def to_dict(self) -> dict:
        out = {"name": self.name, "dataset": self.dataset, "methods": list(self.methods),
               "config": self.config.to_dict()}
        for key in ("forest", "qrf"):
            v = getattr(self, key)
            if v is not None:
                out[key] = v if isinstance(v, (str, dict)) else v.as_params()
        if self.expected is not None:
            out["expected"] = list(self.expected)
        return out

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "ExperimentPlan":
        data = dict(data)
        unknown = set(data) - {"name", "dataset", "methods", "config", "forest", "qrf", "expected"}
        if unknown:
            raise ValueError(f"unknown plan fields: {sorted(unknown)}")
        dataset = dict(data["dataset"])
        if base_dir is not None:
            for key in ("covariates", "path"):
                if key in dataset and not Path(dataset[key]).is_absolute():
                    dataset[key] = str(Path(base_dir) / dataset[key])
        return cls(
            name=data["name"],
            dataset=dataset,
            methods=tuple(data.get("methods", cls.methods)),
            config=ExperimentConfig.from_dict(data.get("config", {})),
            forest=data.get("forest"),
            qrf=data.get("qrf"),
            expected=tuple(data["expected"]) if data.get("expected") is not None else None,
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentPlan":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def _hyperparams(spec, default: ForestHyperparams) -> ForestHyperparams:
    if spec is None:
        return default
    if isinstance(spec, ForestHyperparams):
        return spec
    if isinstance(spec, str):
        if spec not in FOREST_PRESETS:
            raise ValueError(f"unknown forest preset {spec!r}")
        return FOREST_PRESETS[spec]
    return ForestHyperparams(**spec)


# -- data ------------------------------------------------------------------------------

def synthetic_spec(plan: ExperimentPlan) -> SyntheticSpec:
    fields_ = {k: v for k, v in plan.dataset.items() if k != "kind"}
    fields_.setdefault("seed", plan.config.seed)
    return SyntheticSpec(**fields_)


def _holdout(ds: TrialDataset, test_fraction: float, stream: RngStream):
    """Random train/test split with ``test_fraction`` of rows held out."""
    gen = stream.generator()
    n_test = max(1, int(round(test_fraction * ds.n)))
    perm = gen.permutation(ds.n)
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def run_data(plan: ExperimentPlan, run: int):
    """``(train, test)`` of one run; data are regenerated (or re-split) per run."""
    stream = RngStream(plan.config.seed, run).child(0)
    ds = plan.dataset
    if plan.kind == "synthetic":
        return gen_synthetic(synthetic_spec(plan), stream)
    if plan.kind == "response_surface":
        surface = ResponseSurfaceSpec.from_dict(ds["surface"])
        full = gen_response_surface(load_covariates(ds["covariates"]), surface, stream.child(0))
        return _holdout(full, surface.n_test_fraction, stream.child(1))
    full = read_dataset_csv(ds["path"])
    return _holdout(full, float(ds.get("test_fraction", 0.2)), stream.child(1))


def expected_covariates(plan: ExperimentPlan, names) -> tuple:
    if plan.expected is not None:
        return plan.expected
    if plan.kind == "synthetic":
        return DRIVERS
    if plan.kind == "response_surface":
        return ResponseSurfaceSpec.from_dict(plan.dataset["surface"]).drivers
    return ()


# -- one run ---------------------------------------------------------------------------

@dataclass
class MethodResult:
    metrics: MetricsReport
    tree: PartitionTree
    subgroups: list


@dataclass
class RunRecord:
    run: int
    seed: int
    results: dict = field(default_factory=dict)
    test: TrialDataset | None = None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def subgroup_rows(tree: PartitionTree, test: TrialDataset, drivers) -> list:
    """Per-group test-set characteristics: count, driver mean/sd, effect mean/sd."""
    gid = assign_groups(tree, test.covariates)
    names = list(test.covariate_names)
    rows = []
    for g in range(tree.num_groups):
        m = gid == g
        row = {"group": g, "count": int(m.sum())}
        for drv in drivers:
            x = test.covariates[m, names.index(drv)]
            row[f"{drv}_mean"] = float(x.mean()) if x.size else None
            row[f"{drv}_sd"] = float(x.std(ddof=1)) if x.size > 1 else (0.0 if x.size else None)
        for k in range(test.d):
            tau = test.true_ite[m, k]
            row[f"tau{k}_mean"] = float(tau.mean()) if tau.size else None
            row[f"tau{k}_sd"] = float(tau.std(ddof=1)) if tau.size > 1 else (0.0 if tau.size else None)
        rows.append(row)
    return rows


def run_method(method: str, plan: ExperimentPlan, train: TrialDataset, test: TrialDataset,
               stream: RngStream) -> MethodResult:
    """fit_and_band -> partition -> route test samples -> metrics."""
    ks = method_outcomes(method, train.d)
    cfg = method_config(method, plan.config)
    data = train.select_outcomes(ks)
    calib, bands, val = fit_and_band(data, cfg, stream, plan.forest_params(), plan.qrf_params())
    tree = partition(data.covariates[val], bands, cfg, calib, train.covariate_names)
    test_bands = band_samples(calib, test.covariates)
    expected = tuple(expected_covariates(plan, train.covariate_names))
    unexpected = tuple(c for c in train.covariate_names if c not in expected) if expected else ()
    report = evaluate(tree, test.covariates, test.true_ite, test_bands, expected, unexpected, band_outcomes=ks)
    drivers = [c for c in expected if c in train.covariate_names]
    return MethodResult(report, tree, subgroup_rows(tree, test, drivers))


def run_once(plan: ExperimentPlan, run: int) -> RunRecord:
    rec = RunRecord(run, plan.config.seed)
    try:
        train, test = run_data(plan, run)
        rec.test = test
        base = RngStream(plan.config.seed, run).child(1)
        for method in plan.methods:
            rec.results[method] = run_method(method, plan, train, test, base.child(_method_stream_id(method)))
    except Exception:  # recorded and reported by the caller
        rec.error = traceback.format_exc()
        log.error("run %d failed:\n%s", run, rec.error)
    return rec


# -- experiment ------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    plan: ExperimentPlan
    runs: list
    aggregates: dict

    @property
    def failures(self):
        return [r for r in self.runs if not r.ok]

    @property
    def ok(self):
        return not self.failures

    def metric_values(self, method, key):
        return [r.results[method].metrics.row()[key] for r in self.runs if r.ok]

    def summary_csv(self) -> str:
        d = max((r.test.d for r in self.runs if r.ok), default=0)
        return summary_csv(self.aggregates, d)

    def summary_json(self) -> str:
        body = {"plan": self.plan.to_dict(),
                "methods": {m: a.to_dict() for m, a in self.aggregates.items()},
                "failed_runs": [r.run for r in self.failures]}
        return _dumps(body)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def rows_csv(rows) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _run_worker(args):
    plan, run = args
    return run_once(plan, run)


def run_all(plan: ExperimentPlan, workers: int = 1) -> list:
    jobs = [(plan, r) for r in range(int(plan.config.n_runs))]
    if workers <= 1:
        return [_run_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_worker, jobs))


def aggregate_runs(plan: ExperimentPlan, runs) -> dict:
    ok = [r for r in runs if r.ok]
    return {m: aggregate(r.results[m].metrics for r in ok) for m in plan.methods} if ok else {}


def run_experiment(plan: ExperimentPlan, out_dir=None, workers: int = 1) -> ExperimentReport:
    """Run every method for ``plan.config.n_runs`` runs and aggregate.

    With ``out_dir`` set, per-run artifacts and summaries are written under
    ``out_dir/<plan.name>``.
    """
    runs = run_all(plan, workers)
    report = ExperimentReport(plan, runs, aggregate_runs(plan, runs))
    if out_dir is not None:
        write_report(report, Path(out_dir) / plan.name)
    return report


def write_report(report: ExperimentReport, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for rec in report.runs:
        run_dir = root / f"run_{rec.run}"
        run_dir.mkdir(exist_ok=True)
        if rec.test is not None:
            write_dataset_csv(rec.test, run_dir / "test.csv")
        for method, res in rec.results.items():
            mdir = run_dir / method.replace(":", "_")
            mdir.mkdir(exist_ok=True)
            (mdir / "tree.json").write_text(_dumps(res.tree.to_dict()))
            (mdir / "metrics.json").write_text(_dumps(res.metrics.to_dict()))
            (mdir / "subgroups.csv").write_text(rows_csv(res.subgroups))
    (root / "plan.json").write_text(_dumps(report.plan.to_dict()))
    (root / "summary.csv").write_text(report.summary_csv())
    (root / "summary.json").write_text(report.summary_json())
    failures = root / "failures.log"
    if report.failures:
        failures.write_text("".join(f"run {r.run}:\n{r.error}\n" for r in report.failures))
    elif failures.exists():
        failures.unlink()


def subgroup_table(run: RunRecord, method: str) -> list:
    """Rows of per-group characteristics for one method of one run."""
    if method not in run.results:
        raise KeyError(f"method {method!r} not in run {run.run}")
    return run.results[method].subgroups


# -- sweeps ----------------------------------------------------------------------------

def sweep(plan: ExperimentPlan, param: str, values, out_dir=None, workers: int = 1) -> dict:
    """One aggregated report per value of ``lambda``, ``gamma`` or ``beta``.

    Returns ``{value: ExperimentReport}``; with ``out_dir`` a long-format CSV
    ``sweep_<param>.csv`` is written under ``out_dir/<plan.name>``.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = [float(v) for v in values]
    if not values:
        raise ValueError("no sweep values")
    if param == "lambda" and SCQR_METHOD in plan.methods:
        raise ValueError("lambda sweep is undefined for SCQR, whose objective fixes lambda = 0")
    reports = {}
    for v in values:
        reports[v] = run_experiment(plan.with_config(**{param: v}), workers=workers)
    if out_dir is not None:
        root = Path(out_dir) / plan.name
        root.mkdir(parents=True, exist_ok=True)
        (root / f"sweep_{param}.csv").write_text(sweep_csv(param, reports))
    return reports


def sweep_csv(param: str, reports: dict) -> str:
    rows = []
    for v, rep in reports.items():
        for method, agg in rep.aggregates.items():
            for metric in agg.mean:
                rows.append({"param": param, "value": v, "method": method, "metric": metric,
                             "mean": agg.mean[metric], "sd": agg.sd[metric], "n_runs": agg.n_runs})
    return rows_csv(rows)


# -- post hoc report -------------------------------------------------------------------

def report_dir(exp_dir, drivers=None) -> str:
    """Long CSV of subgroup tables rebuilt from a finished experiment directory.

    Trees are re-routed over each run's stored test set.
    """
    exp_dir = Path(exp_dir)
    plan_path = exp_dir / "plan.json"
    plan = ExperimentPlan.from_dict(json.loads(plan_path.read_text())) if plan_path.exists() else None
    rows = []
    run_dirs = sorted((p for p in exp_dir.glob("run_*") if p.is_dir()), key=lambda p: int(p.name[4:]))
    if not run_dirs:
        raise FileNotFoundError(f"no run directories under {exp_dir}")
    for run_dir in run_dirs:
        test = read_dataset_csv(run_dir / "test.csv")
        if drivers is None:
            drv = expected_covariates(plan, test.covariate_names) if plan else ()
        else:
            drv = drivers
        drv = [c for c in drv if c in test.covariate_names]
        for tree_path in sorted(run_dir.glob("*/tree.json")):
            tree = PartitionTree.from_json(tree_path.read_text())
            for row in subgroup_rows(tree, test, drv):
                rows.append({"run": int(run_dir.name[4:]), "method": tree_path.parent.name, **row})
    return rows_csv(_uniform(rows))


def _uniform(rows):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    return [{k: r.get(k) for k in keys} for r in rows]


def default_plan(name="synthetic", variant="uncorrelated", n_runs=30, seed=0) -> ExperimentPlan:
    return ExperimentPlan(name, {"kind": "synthetic", "variant": variant},
                          config=ExperimentConfig(n_runs=n_runs, seed=seed))


__all__ = [
    "ExperimentPlan", "ExperimentReport", "RunRecord", "MethodResult", "run_experiment", "run_once",
    "run_method", "sweep", "sweep_csv", "subgroup_table", "subgroup_rows", "report_dir", "default_plan",
    "method_outcomes", "method_config",
]
