"""JSON and CSV persistence for models, ensembles, curves and tables.

Floats are written with their shortest round-trip representation, so a
saved model or ensemble reloads to bit-identical arrays. Nothing written
here carries timestamps or host details.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import AcaFitConfig, AcaModel, FitReport
from .dataset import Categorical, CovariateSpec, Prototyped, RealGrid
from .linreg import LinearModel
from .uncertainty import CurveEnsemble

FORMAT_VERSION = 1


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj), encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if v != v else repr(float(v))
    return str(v)


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


# -- specs -------------------------------------------------------------------


def spec_to_json(spec: CovariateSpec) -> dict:
    k = spec.kind
    if isinstance(k, Categorical):
        return {"name": spec.name, "kind": "categorical", "levels": list(k.levels)}
    if isinstance(k, RealGrid):
        return {"name": spec.name, "kind": "grid", "nodes": list(k.nodes), "units": k.units}
    if isinstance(k, Prototyped):
        return {
            "name": spec.name,
            "kind": "prototyped",
            "count": k.count,
            "locality_penalty": k.locality_penalty,
            "prototypes": None if k.prototypes is None else list(k.prototypes),
            "units": k.units,
        }
    raise TypeError(f"unsupported covariate kind {type(k).__name__}")


def spec_from_json(raw: Mapping) -> CovariateSpec:
    kind = raw["kind"]
    if kind == "categorical":
        return CovariateSpec(raw["name"], Categorical(tuple(raw["levels"])))
    if kind == "grid":
        return CovariateSpec(raw["name"], RealGrid(tuple(raw["nodes"]), raw.get("units", "")))
    if kind == "prototyped":
        protos = raw.get("prototypes")
        return CovariateSpec(
            raw["name"],
            Prototyped(raw["count"], raw["locality_penalty"], None if protos is None else tuple(protos), raw.get("units", "")),
        )
    raise ValueError(f"unknown covariate kind {kind!r}")


# -- models ------------------------------------------------------------------


def fit_config_to_json(config: AcaFitConfig) -> dict:
    lam = dict(config.lam) if isinstance(config.lam, Mapping) else config.lam
    return {
        "d": config.d,
        "lam": lam,
        "max_sweeps": config.max_sweeps,
        "tol": config.tol,
        "seed": config.seed,
        "init_scale": config.init_scale,
        "n_init": config.n_init,
        "penalty_order": config.penalty_order,
        "penalty_scaling": config.penalty_scaling,
    }


def fit_config_from_json(raw: Mapping) -> AcaFitConfig:
    return AcaFitConfig(**raw)


def aca_model_to_json(model: AcaModel, report: FitReport | None = None) -> dict:
    out = {
        "format": FORMAT_VERSION,
        "model": "aca",
        "config": fit_config_to_json(model.config),
        "covariates": [spec_to_json(s) for s in model.specs],
        "factors": [_floats(V) for V in model.factors],
        "penalties": [_floats(C) for C in model.penalties],
    }
    if report is not None:
        out["fit"] = {
            "objective_trace": list(report.objective_trace),
            "sweeps_run": report.sweeps_run,
            "converged": report.converged,
            "singular_solves": report.singular_solves,
            "rejected_updates": report.rejected_updates,
            "restart": report.restart,
        }
    return out


def aca_model_from_json(raw: Mapping) -> AcaModel:
    if raw.get("model") != "aca":
        raise ValueError("not an ACA model file")
    specs = tuple(spec_from_json(s) for s in raw["covariates"])
    d = raw["config"]["d"]
    factors = tuple(np.asarray(V, dtype=float).reshape(s.size, d) for V, s in zip(raw["factors"], specs))
    penalties = tuple(np.asarray(C, dtype=float).reshape(s.size, s.size) for C, s in zip(raw["penalties"], specs))
    return AcaModel(specs, factors, fit_config_from_json(raw["config"]), penalties)


def linreg_model_to_json(model: LinearModel) -> dict:
    return {
        "format": FORMAT_VERSION,
        "model": "linreg",
        "intercept": model.intercept,
        "columns": list(model.columns),
        "coefficients": _floats(model.coefficients),
        "column_means": _floats(model.covariate_means),
        "covariates": list(model.covariates),
        "levels": {k: list(v) for k, v in model.levels.items()},
        "units": dict(model.units),
        "encoding": "treatment (first level is the reference)",
        "rank_deficient": model.rank_deficient,
    }


def linreg_model_from_json(raw: Mapping) -> LinearModel:
    if raw.get("model") != "linreg":
        raise ValueError("not a linear model file")
    return LinearModel(
        intercept=float(raw["intercept"]),
        columns=tuple(raw["columns"]),
        coefficients=np.asarray(raw["coefficients"], dtype=float),
        covariate_means=np.asarray(raw["column_means"], dtype=float),
        covariates=tuple(raw["covariates"]),
        levels={k: tuple(v) for k, v in raw["levels"].items()},
        units=dict(raw["units"]),
        rank_deficient=bool(raw["rank_deficient"]),
    )


# -- ensembles ---------------------------------------------------------------


def _axis(a) -> list:
    a = np.asarray(a)
    return [str(v) for v in a] if a.dtype == object else _floats(a)


def ensemble_to_json(ens: CurveEnsemble) -> dict:
    return {
        "eval_points": [_axis(a) for a in ens.eval_points],
        "curves": _floats(ens.curves),
        "replica_seeds": [list(s) for s in ens.replica_seeds],
        "replicas": list(ens.replicas),
        "failed": [{"replica": b, "error": msg} for b, msg in ens.failed],
    }


def ensemble_from_json(raw: Mapping) -> CurveEnsemble:
    axes = tuple(
        np.asarray(a, dtype=object) if any(isinstance(v, str) for v in a) else np.asarray(a, dtype=float)
        for a in raw["eval_points"]
    )
    shape = (len(raw["replicas"]),) + tuple(len(a) for a in axes)
    return CurveEnsemble(
        eval_points=axes,
        curves=np.asarray(raw["curves"], dtype=float).reshape(shape),
        replica_seeds=tuple((int(a), int(b)) for a, b in raw["replica_seeds"]),
        replicas=tuple(int(b) for b in raw["replicas"]),
        failed=tuple((int(f["replica"]), str(f["error"])) for f in raw["failed"]),
    )
