"""Per-user, per-meal-subset pipeline: fit, bootstrap, curves, metrics, ranges.

Every stage reads and writes files under one output directory:

    models/<user>/<subset>/{aca,linreg}.json
    ensembles/<user>/<subset>/{aca,linreg}.json
    curves/<user>/<subset>/<model>__<covariate>.json
    metrics.csv  bends.csv  ranges.csv  run_log.json

Each stage's output is a pure function of the run configuration and the
files the stage reads, and saved floats round-trip exactly, so running the
stages one at a time reproduces a full run byte for byte.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io
from .analysis import ci_coverage, detect_bend, extract_ranges, rmse_full, rmse_marginal
from .core import AcaFitConfig, FitReport, MarginalCurve, aca_marginalize
from .dataset import (
    DEFAULT_GRID_NODES,
    DEFAULT_MIN_MEALS,
    MEAL_TYPES,
    REAL_COVARIATES,
    Dataset,
    InsufficientDataError,
    MealRecord,
    build_dataset,
    load_meals_csv,
    users_in,
)
from .assignment import dataset_assignments
from .linreg import lm_marginalize
from .synth import generate_population, load_synth_spec
from .uncertainty import (
    AcaFitter,
    BootstrapConfig,
    ConfidenceBand,
    CurveEnsemble,
    FittedAca,
    FittedLinreg,
    LinregFitter,
    bootstrap_ensembles,
    collapse_duplicates,
    empirical_band,
)

log = logging.getLogger(__name__)

MODELS = ("aca", "linreg")
SUBSETS = ("all", "breakfast", "lunch", "dinner")
METRIC_COLUMNS = ("user_id", "subset", "model", "rmse_full", "rmse_marginal", "coverage_mean_pct", "coverage_pooled_pct")
BEND_COLUMNS = ("user_id", "subset", "model", "covariate", "max_bend_deg", "threshold_deg", "flagged")
RANGE_COLUMNS = ("user_id", "subset", "covariate", "threshold", "kind", "lo", "hi")


@dataclass(frozen=True)
class RunConfig:
    out: Path
    input: Path | None = None
    synth: Path | None = None
    seed: int = 0
    fit: AcaFitConfig = field(default_factory=AcaFitConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    grid_nodes: int = DEFAULT_GRID_NODES
    min_meals: int = DEFAULT_MIN_MEALS
    users: tuple[str, ...] | None = None
    subsets: tuple[str, ...] = SUBSETS
    covariates: tuple[str, ...] = REAL_COVARIATES
    eval_points: int | None = None  # None: evaluate at the grid nodes
    thresholds: tuple[float, ...] = ()
    bend_threshold: float = 10.0
    include_meal_type: bool = True
    jobs: int = 1

    def __post_init__(self):
        if (self.input is None) == (self.synth is None):
            raise ValueError("give exactly one of an input CSV or a synth spec")
        for s in self.subsets:
            if s != "all" and s not in MEAL_TYPES:
                raise ValueError(f"unknown subset {s!r}; use 'all' or one of {MEAL_TYPES}")
        for c in self.covariates:
            if c not in REAL_COVARIATES:
                raise ValueError(f"curves are produced for real covariates only, got {c!r}")
        if self.eval_points is not None and self.eval_points < 3:
            raise ValueError("need at least 3 eval points per curve")
        if self.grid_nodes < 2:
            raise ValueError("need at least 2 grid nodes")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")

    def resolved(self) -> dict:
        """Every setting that shapes the outputs, for the run log."""
        return {
            "input": None if self.input is None else str(self.input),
            "synth": None if self.synth is None else str(self.synth),
            "seed": self.seed,
            "aca": io.fit_config_to_json(self.fit),
            "bootstrap": {
                "iterations": self.bootstrap.iterations,
                "sample_size": self.bootstrap.sample_size,
                "level": self.bootstrap.level,
                "seed": self.bootstrap.seed,
                "quantile_rule": "linear interpolation between order statistics, position 1 + q (B - 1)",
                "replica_seeds": "SeedSequence(seed, spawn_key=(b,)) -> (resample seed, fit seed)",
            },
            "grid_nodes": self.grid_nodes,
            "min_meals": self.min_meals,
            "users": None if self.users is None else list(self.users),
            "subsets": list(self.subsets),
            "covariates": list(self.covariates),
            "eval_points": "grid nodes" if self.eval_points is None else self.eval_points,
            "thresholds": list(self.thresholds),
            "bend_threshold_deg": self.bend_threshold,
            "meal_type_in_pooled_fits": self.include_meal_type,
            "categorical_encoding": "aca: one factor row per level; linreg: treatment coding, first level as reference",
            "missing_values": "aca: uniform assignment row; linreg: column mean; coverage: sample left out",
        }


@dataclass(frozen=True)
class Task:
    user: str
    subset: str
    dataset: Dataset


# -- inputs ------------------------------------------------------------------


def load_records(config: RunConfig) -> list[MealRecord]:
    if config.input is not None:
        return load_meals_csv(config.input)
    return generate_population(load_synth_spec(config.synth), config.seed)


def plan(config: RunConfig, records: Sequence[MealRecord]) -> tuple[list[Task], list[dict]]:
    """Datasets to analyse, and the (user, subset) pairs skipped with reasons."""
    users = users_in(records)
    if config.users is not None:
        missing = [u for u in config.users if u not in users]
        if missing:
            raise ValueError(f"users not found in input: {missing}")
        users = [u for u in users if u in config.users]
    tasks, skipped = [], []
    for user in users:
        total = sum(r.user_id == user for r in records)
        if total < config.min_meals:
            reason = str(InsufficientDataError(user, total, config.min_meals))
            log.info("skipping user %s: %s", user, reason)
            skipped.append({"user_id": user, "subset": "*", "reason": reason})
            continue
        for subset in config.subsets:
            try:
                ds = build_dataset(
                    records,
                    user,
                    None if subset == "all" else subset,
                    config.min_meals,
                    grid_nodes=config.grid_nodes,
                    include_meal_type=config.include_meal_type,
                )
            except InsufficientDataError:
                reason = f"no {subset} meals"
                log.info("skipping user %s subset %s: %s", user, subset, reason)
                skipped.append({"user_id": user, "subset": subset, "reason": reason})
                continue
            tasks.append(Task(user, subset, ds))
    return tasks, skipped


def eval_axis(dataset: Dataset, covariate: str, n: int | None) -> np.ndarray:
    nodes = np.asarray(dataset.covariate(covariate).spec.kind.nodes)
    if n is None:
        return nodes
    axis = np.linspace(nodes[0], nodes[-1], n)
    axis[0], axis[-1] = nodes[0], nodes[-1]
    return axis


def _queries(task: Task, config: RunConfig) -> dict:
    return {c: ([c], [eval_axis(task.dataset, c, config.eval_points)]) for c in config.covariates}


def _dir(root: Path, kind: str, task: Task) -> Path:
    return Path(root) / kind / task.user / task.subset


# -- stage: fit --------------------------------------------------------------


def fit_task(task: Task, config: RunConfig) -> tuple[FittedAca, FittedLinreg]:
    aca = AcaFitter(config.fit).fit(task.dataset, config.seed)
    lin = LinregFitter().fit(task.dataset)
    return aca, lin


def save_models(task: Task, config: RunConfig, aca: FittedAca, lin: FittedLinreg) -> None:
    d = _dir(config.out, "models", task)
    io.write_json(d / "aca.json", io.aca_model_to_json(aca.model, aca.report))
    io.write_json(d / "linreg.json", io.linreg_model_to_json(lin.model))


def load_models(task: Task, config: RunConfig) -> tuple[FittedAca, FittedLinreg]:
    d = _dir(config.out, "models", task)
    raw = io.read_json(d / "aca.json")
    model = io.aca_model_from_json(raw)
    if model.specs != task.dataset.specs:
        raise ValueError(f"{d / 'aca.json'} does not match the dataset of {task.user}/{task.subset}")
    fit = raw.get("fit") or {}
    report = FitReport(
        tuple(fit.get("objective_trace", ())),
        fit.get("sweeps_run", 0),
        fit.get("converged", False),
        fit.get("singular_solves", 0),
        fit.get("rejected_updates", 0),
        fit.get("restart", 0),
    )
    unique, counts = collapse_duplicates(task.dataset)
    aca = FittedAca(model, report, unique, counts)
    lin = FittedLinreg(io.linreg_model_from_json(io.read_json(d / "linreg.json")))
    return aca, lin


# -- stage: bootstrap --------------------------------------------------------


def bootstrap_task(task: Task, config: RunConfig) -> dict[str, dict[str, CurveEnsemble]]:
    """Paired ensembles: both fitters see the same resampled rows per replica."""
    queries = _queries(task, config)
    fitters = {"aca": AcaFitter(config.fit), "linreg": LinregFitter()}
    out = {}
    for name, fitter in fitters.items():
        out[name] = bootstrap_ensembles(task.dataset, fitter, queries, config.bootstrap, jobs=config.jobs)
        for b, msg in next(iter(out[name].values())).failed:
            log.warning("%s/%s %s replica %d failed: %s", task.user, task.subset, name, b, msg)
    return out


def save_ensembles(task: Task, config: RunConfig, ensembles) -> None:
    d = _dir(config.out, "ensembles", task)
    for name, by_cov in ensembles.items():
        io.write_json(d / f"{name}.json", {c: io.ensemble_to_json(e) for c, e in by_cov.items()})


def load_ensembles(task: Task, config: RunConfig) -> dict[str, dict[str, CurveEnsemble]]:
    d = _dir(config.out, "ensembles", task)
    out = {}
    for name in MODELS:
        raw = io.read_json(d / f"{name}.json")
        out[name] = {c: io.ensemble_from_json(raw[c]) for c in config.covariates}
    return out


def bands_of(ensembles, level: float) -> dict[str, dict[str, ConfidenceBand]]:
    return {name: {c: empirical_band(e, level) for c, e in by_cov.items()} for name, by_cov in ensembles.items()}


# -- stage: marginal curves --------------------------------------------------


def curves_task(task: Task, config: RunConfig, fitted, ensembles) -> dict[tuple[str, str], dict]:
    """Curve records keyed by (model, covariate)."""
    bands = bands_of(ensembles, config.bootstrap.level)
    out = {}
    for name, model in zip(MODELS, fitted):
        for c in config.covariates:
            axis = ensembles[name][c].eval_points[0]
            curve = model.marginal([c], [axis])
            band = bands[name][c]
            out[(name, c)] = {
                "model": name,
                "user_id": task.user,
                "subset": task.subset,
                "covariate": c,
                "units": task.dataset.covariate(c).spec.units,
                "eval_points": io._floats(axis),
                "mean": io._floats(curve.mean),
                "lower": io._floats(band.lower),
                "upper": io._floats(band.upper),
                "level": config.bootstrap.level,
                "seed": config.seed,
            }
    return out


def save_curves(task: Task, config: RunConfig, curves) -> None:
    d = _dir(config.out, "curves", task)
    for (name, c), rec in curves.items():
        io.write_json(d / f"{name}__{c}.json", rec)


def load_curves(task: Task, config: RunConfig) -> dict[tuple[str, str], dict]:
    d = _dir(config.out, "curves", task)
    return {(n, c): io.read_json(d / f"{n}__{c}.json") for n in MODELS for c in config.covariates}


def curve_of(rec: Mapping) -> MarginalCurve:
    return MarginalCurve(
        (rec["covariate"],),
        (np.asarray(rec["eval_points"], dtype=float),),
        np.asarray(rec["mean"], dtype=float),
        (rec["units"],),
    )


# -- stage: evaluate ---------------------------------------------------------


def sample_marginals(fitted, dataset: Dataset, covariates: Sequence[str]) -> dict[str, np.ndarray]:
    """Each covariate's marginal evaluated at every sample's own value."""
    out = {}
    for c in covariates:
        z = np.asarray(dataset.covariate(c).values, dtype=float)
        if isinstance(fitted, FittedAca):
            curve = aca_marginalize(fitted.model, dataset_assignments(fitted.dataset), [c], [z], fitted.weights)
        else:
            curve = lm_marginalize(fitted.model, [c], [z])
        out[c] = np.asarray(curve.mean, dtype=float)
    return out


def evaluate_task(task: Task, config: RunConfig, fitted, curves) -> tuple[list[list], list[list]]:
    ds = task.dataset
    metric_rows, bend_rows = [], []
    for name, model in zip(MODELS, fitted):
        full = rmse_full(model.predict(ds), ds.x)
        marg = rmse_marginal(sample_marginals(model, ds, config.covariates), ds.x)
        bands = {}
        for c in config.covariates:
            rec = curves[(name, c)]
            band = ConfidenceBand(np.asarray(rec["lower"]), np.asarray(rec["upper"]), rec["level"])
            bands[c] = (np.asarray(rec["eval_points"]), band)
        per, mean, pooled = ci_coverage(ds, bands)
        metric_rows.append([task.user, task.subset, name, full, marg, mean, pooled] + [per[c] for c in config.covariates])
        for c in config.covariates:
            b = detect_bend(curve_of(curves[(name, c)]), config.bend_threshold)
            bend_rows.append([task.user, task.subset, name, c, b.max_bend, b.threshold, b.flagged])
    return metric_rows, bend_rows


def metric_header(config: RunConfig) -> list[str]:
    return list(METRIC_COLUMNS) + [f"coverage_{c}_pct" for c in config.covariates]


# -- stage: ranges -----------------------------------------------------------


def ranges_task(task: Task, config: RunConfig, curves) -> list[list]:
    """Threshold ranges of the ACA curves."""
    rows = []
    for c in config.covariates:
        curve = curve_of(curves[("aca", c)])
        for t in config.thresholds:
            rs = extract_ranges(curve, t)
            for kind, ivs in (("above", rs.above), ("below", rs.below)):
                rows.extend([task.user, task.subset, c, t, kind, lo, hi] for lo, hi in ivs)
    return rows


# -- drivers -----------------------------------------------------------------


def _fit_summary(task: Task, aca: FittedAca, lin: FittedLinreg) -> dict:
    r = aca.report
    return {
        "user_id": task.user,
        "subset": task.subset,
        "m": task.dataset.m,
        "covariates": list(task.dataset.names),
        "aca_objective": r.objective_trace[-1] if r.objective_trace else None,
        "aca_sweeps": r.sweeps_run,
        "aca_converged": r.converged,
        "aca_best_restart": r.restart,
        "aca_singular_solves": r.singular_solves,
        "linreg_rank_deficient": lin.model.rank_deficient,
    }


def run_pipeline(config: RunConfig) -> dict:
    """All stages for every (user, subset); returns the run log."""
    records = load_records(config)
    tasks, skipped = plan(config, records)
    metric_rows, bend_rows, range_rows, fits, failures = [], [], [], [], []
    for task in tasks:
        log.info("analysing user %s subset %s (m=%d)", task.user, task.subset, task.dataset.m)
        fitted = fit_task(task, config)
        save_models(task, config, *fitted)
        ensembles = bootstrap_task(task, config)
        save_ensembles(task, config, ensembles)
        curves = curves_task(task, config, fitted, ensembles)
        save_curves(task, config, curves)
        m, b = evaluate_task(task, config, fitted, curves)
        metric_rows += m
        bend_rows += b
        range_rows += ranges_task(task, config, curves)
        fits.append(_fit_summary(task, *fitted))
        for name, by_cov in ensembles.items():
            failed = next(iter(by_cov.values())).failed
            if failed:
                failures.append({"user_id": task.user, "subset": task.subset, "model": name,
                                 "failed_replicas": [{"replica": b_, "error": e} for b_, e in failed]})
    write_tables(config, metric_rows, bend_rows, range_rows)
    run_log = {
        "config": config.resolved(),
        "analysed": fits,
        "skipped": skipped,
        "bootstrap_failures": failures,
    }
    io.write_json(Path(config.out) / "run_log.json", run_log)
    return run_log


def write_tables(config: RunConfig, metric_rows, bend_rows, range_rows) -> None:
    out = Path(config.out)
    io.write_csv(out / "metrics.csv", metric_header(config), metric_rows)
    io.write_csv(out / "bends.csv", BEND_COLUMNS, bend_rows)
    io.write_csv(out / "ranges.csv", RANGE_COLUMNS, range_rows)


def run_stage(stage: str, config: RunConfig) -> None:
    """One stage for every (user, subset), reading earlier stages from disk."""
    records = load_records(config)
    tasks, _ = plan(config, records)
    metric_rows, bend_rows, range_rows = [], [], []
    for task in tasks:
        if stage == "fit":
            save_models(task, config, *fit_task(task, config))
        elif stage == "bootstrap":
            save_ensembles(task, config, bootstrap_task(task, config))
        elif stage == "marginal":
            curves = curves_task(task, config, load_models(task, config), load_ensembles(task, config))
            save_curves(task, config, curves)
        elif stage == "evaluate":
            m, b = evaluate_task(task, config, load_models(task, config), load_curves(task, config))
            metric_rows += m
            bend_rows += b
        elif stage == "ranges":
            range_rows += ranges_task(task, config, load_curves(task, config))
        else:
            raise ValueError(f"unknown stage {stage!r}")
    out = Path(config.out)
    if stage == "evaluate":
        io.write_csv(out / "metrics.csv", metric_header(config), metric_rows)
        io.write_csv(out / "bends.csv", BEND_COLUMNS, bend_rows)
    elif stage == "ranges":
        io.write_csv(out / "ranges.csv", RANGE_COLUMNS, range_rows)
