"""Paired bootstrap ensembles and empirical pointwise confidence bands.

Replica ``b`` draws its resample and its fit seed from
``SeedSequence(seed, spawn_key=(b,))``, so the ensemble does not depend on
the order or concurrency in which replicas run, and two fitters bootstrapped
with the same seed see identical resampled rows.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Hashable, Mapping, Protocol, Sequence

import numpy as np

from .assignment import dataset_assignments
from .core import AcaFitConfig, AcaModel, FitReport, MarginalCurve, aca_fit, aca_marginalize, predict_matrix
from .dataset import Dataset
from .linreg import LinearModel, lm_marginalize, lm_predict, ols_fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapConfig:
    iterations: int = 100
    sample_size: int = 500
    level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one bootstrap iteration")
        if self.sample_size < 1:
            raise ValueError("bootstrap sample size must be >= 1")
        _check_level(self.level)


def _check_level(level: float) -> None:
    if not 0 < level < 1:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")


@dataclass(frozen=True)
class CurveEnsemble:
    eval_points: tuple[np.ndarray, ...]
    curves: np.ndarray  # (n_ok, *grid shape)
    replica_seeds: tuple[tuple[int, int], ...]  # (resample seed, fit seed) per replica
    replicas: tuple[int, ...] = ()  # indices of the replicas behind ``curves``
    failed: tuple[tuple[int, str], ...] = ()
    replica_rows: tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)


@dataclass(frozen=True)
class ConfidenceBand:
    lower: np.ndarray
    upper: np.ndarray
    level: float


# -- fitters -----------------------------------------------------------------


class Fitted(Protocol):
    def marginal(self, H: Sequence[str], eval_points: Sequence) -> MarginalCurve: ...

    def predict(self, dataset: Dataset) -> np.ndarray: ...


def collapse_duplicates(dataset: Dataset) -> tuple[Dataset, np.ndarray]:
    """Unique rows (first-appearance order) and their multiplicities."""
    keys: dict = {}
    first, counts = [], []
    cols = [c.values for c in dataset.covariates]
    for i in range(dataset.m):
        key = (dataset.x[i].item(),) + tuple(_key(c[i]) for c in cols)
        j = keys.get(key)
        if j is None:
            keys[key] = len(first)
            first.append(i)
            counts.append(1)
        else:
            counts[j] += 1
    return dataset.take(np.array(first)), np.array(counts, dtype=float)


def _key(v):
    if isinstance(v, float) and v != v:
        return "nan"
    return v.item() if isinstance(v, np.generic) else v


@dataclass(frozen=True)
class FittedAca:
    model: AcaModel
    report: FitReport
    dataset: Dataset  # unique training rows
    weights: np.ndarray

    def marginal(self, H, eval_points) -> MarginalCurve:
        return aca_marginalize(self.model, dataset_assignments(self.dataset), H, eval_points, self.weights)

    def predict(self, dataset: Dataset) -> np.ndarray:
        """Full-model predictions at every row of ``dataset``."""
        return predict_matrix(self.model, dataset_assignments(dataset))


@dataclass(frozen=True)
class AcaFitter:
    config: AcaFitConfig = AcaFitConfig()
    name: str = "aca"

    def fit(self, dataset: Dataset, seed: int | None = None) -> FittedAca:
        unique, counts = collapse_duplicates(dataset)
        config = self.config if seed is None else _with_seed(self.config, seed)
        model, report = aca_fit(unique.x, dataset_assignments(unique), unique.specs, config, weights=counts)
        return FittedAca(model, report, unique, counts)


def _with_seed(config: AcaFitConfig, seed: int) -> AcaFitConfig:
    return replace(config, seed=int(seed))


@dataclass(frozen=True)
class FittedLinreg:
    model: LinearModel

    def marginal(self, H, eval_points) -> MarginalCurve:
        return lm_marginalize(self.model, H, eval_points)

    def predict(self, dataset: Dataset) -> np.ndarray:
        ds = dataset
        return np.array([
            lm_predict(self.model, {c.name: c.values[i] for c in ds.covariates}) for i in range(ds.m)
        ])


@dataclass(frozen=True)
class LinregFitter:
    name: str = "linreg"

    def fit(self, dataset: Dataset, seed: int | None = None) -> FittedLinreg:
        return FittedLinreg(ols_fit(dataset))


# -- resampling --------------------------------------------------------------


def replica_seeds(seed: int, b: int) -> tuple[int, int]:
    """(resample seed, fit seed) of replica ``b``: a pure function of its arguments."""
    state = np.random.SeedSequence(seed, spawn_key=(b,)).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def resample(dataset: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` rows drawn uniformly with replacement; covariate specs carried over."""
    return dataset.take(resample_rows(dataset.m, n, rng))


def resample_rows(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ValueError("cannot resample an empty dataset")
    if n < 1:
        raise ValueError("resample size must be >= 1")
    return rng.integers(0, m, size=n)


def _replica(dataset, fitter, queries, config, b):
    rs, fs = replica_seeds(config.seed, b)
    rows = resample_rows(dataset.m, config.sample_size, np.random.default_rng(rs))
    try:
        fitted = fitter.fit(dataset.take(rows), fs)
        curves = {key: np.asarray(fitted.marginal(H, pts).mean) for key, (H, pts) in queries.items()}
        for key, c in curves.items():
            if not np.all(np.isfinite(c)):
                raise FloatingPointError(f"non-finite marginal values for query {key!r}")
        return (rs, fs), rows, curves, None
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.warning("bootstrap replica %d failed: %s", b, exc)
        return (rs, fs), rows, None, f"{type(exc).__name__}: {exc}"


def bootstrap_ensembles(
    dataset: Dataset,
    fitter,
    queries: Mapping[Hashable, tuple[Sequence[str], Sequence]],
    config: BootstrapConfig,
    *,
    jobs: int = 1,
) -> dict[Hashable, CurveEnsemble]:
    """One fit per replica, marginalized for every query.

    ``queries`` maps a key to ``(H, eval_points)``. Replicas that fail are
    left out of the curves and listed in ``failed``; if every replica fails
    a ``RuntimeError`` is raised.
    """
    if dataset.m < 1:
        raise ValueError("cannot bootstrap an empty dataset")
    B = config.iterations
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda b: _replica(dataset, fitter, queries, config, b), range(B)))
    else:
        results = [_replica(dataset, fitter, queries, config, b) for b in range(B)]

    seeds = tuple(r[0] for r in results)
    rows = tuple(r[1] for r in results)
    ok = [b for b, r in enumerate(results) if r[2] is not None]
    failed = tuple((b, r[3]) for b, r in enumerate(results) if r[2] is None)
    if not ok:
        raise RuntimeError(f"all {B} bootstrap replicas failed; first error: {failed[0][1]}")
    out = {}
    for key, (H, pts) in queries.items():
        axes = tuple(np.asarray(list(p), dtype=object) if _is_labels(p) else np.asarray(p, dtype=float) for p in pts)
        curves = np.stack([results[b][2][key] for b in ok])
        out[key] = CurveEnsemble(axes, curves, seeds, tuple(ok), failed, rows)
    return out


def _is_labels(points) -> bool:
    return any(isinstance(p, str) for p in points)


def bootstrap_curves(
    dataset: Dataset,
    fitter,
    query: tuple[Sequence[str], Sequence],
    config: BootstrapConfig,
    *,
    jobs: int = 1,
) -> CurveEnsemble:
    """Bootstrap ensemble of one marginal query ``(H, eval_points)``."""
    return bootstrap_ensembles(dataset, fitter, {"query": query}, config, jobs=jobs)["query"]


def empirical_band(ensemble: CurveEnsemble, level: float) -> ConfidenceBand:
    """Pointwise quantiles at ``(1 - level) / 2`` and ``(1 + level) / 2``.

    Quantiles interpolate linearly between order statistics: the ``q``
    quantile of ``B`` sorted values sits at 1-based position ``1 + q (B - 1)``.
    """
    _check_level(level)
    curves = np.asarray(ensemble.curves, dtype=float)
    if curves.shape[0] == 0:
        raise ValueError("empty ensemble")
    lo_q = (1.0 - level) / 2.0
    lower, upper = np.quantile(curves, [lo_q, 1.0 - lo_q], axis=0, method="linear")
    return ConfidenceBand(lower, upper, level)
