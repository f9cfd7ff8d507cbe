"""Ordinary least squares baseline with the same marginalization interface."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import MarginalCurve
from .dataset import Categorical, Dataset


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LinearModel:
    """``xbar(z) = intercept + sum_c coefficients[c] * z_c`` over design columns.

    Real covariates contribute one column each. A categorical covariate
    contributes one indicator column per non-reference level, named
    ``"<covariate>=<level>"``; the first level is the reference.
    """

    intercept: float
    columns: tuple[str, ...]
    coefficients: np.ndarray
    covariate_means: np.ndarray  # training mean of each design column
    covariates: tuple[str, ...]
    levels: Mapping[str, tuple[str, ...]]
    units: Mapping[str, str]
    rank_deficient: bool = False

    def coefficient(self, column: str) -> float:
        return float(self.coefficients[self.columns.index(column)])

    def columns_of(self, covariate: str) -> list[int]:
        if covariate not in self.covariates:
            raise KeyError(f"unknown covariate {covariate!r}; model has {list(self.covariates)}")
        if covariate in self.levels:
            return [self.columns.index(f"{covariate}={lev}") for lev in self.levels[covariate][1:]]
        return [self.columns.index(covariate)]


def _encode(name: str, values, levels: tuple[str, ...] | None) -> tuple[list[str], np.ndarray]:
    """Design columns of one covariate; missing entries stay NaN."""
    if levels is None:
        return [name], np.asarray(values, dtype=float)[:, None]
    cols = [f"{name}={lev}" for lev in levels[1:]]
    out = np.zeros((len(values), len(cols)))
    for i, v in enumerate(values):
        if v is None or (isinstance(v, float) and np.isnan(v)):
            out[i] = np.nan
        elif v in levels[1:]:
            out[i, levels.index(v) - 1] = 1.0
        elif v != levels[0]:
            raise ValueError(f"label {v!r} is not a level of {name!r}")
    return cols, out


def design_matrix(dataset: Dataset) -> tuple[list[str], np.ndarray, dict]:
    names, blocks, levels = [], [], {}
    for cov in dataset.covariates:
        lv = cov.spec.kind.levels if isinstance(cov.spec.kind, Categorical) else None
        if lv is not None:
            levels[cov.name] = lv
        cols, block = _encode(cov.name, cov.values, lv)
        names += cols
        blocks.append(block)
    Z = np.hstack(blocks) if blocks else np.zeros((dataset.m, 0))
    return names, Z, levels


def ols_fit(dataset: Dataset, weights=None) -> LinearModel:
    """Least-squares fit with intercept.

    Missing covariate values are replaced by the column mean. A
    rank-deficient design gets the minimum-norm solution and a
    :class:`RankDeficientWarning`. ``weights`` are row multiplicities.
    """
    if dataset.m < 1:
        raise ValueError("cannot fit a regression to zero rows")
    names, Z, levels = design_matrix(dataset)
    w = np.ones(dataset.m) if weights is None else np.asarray(weights, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.array([
            np.average(col[~np.isnan(col)], weights=w[~np.isnan(col)]) if np.any(~np.isnan(col)) else 0.0
            for col in Z.T
        ])
    Z = np.where(np.isnan(Z), means[None, :], Z)
    X = np.hstack([np.ones((dataset.m, 1)), Z])
    sw = np.sqrt(w)
    beta, _, rank, _ = np.linalg.lstsq(X * sw[:, None], dataset.x * sw, rcond=None)
    deficient = rank < X.shape[1]
    if deficient:
        warnings.warn(
            f"design matrix has rank {rank} < {X.shape[1]} columns; using minimum-norm solution",
            RankDeficientWarning,
            stacklevel=2,
        )
    units = {c.name: c.spec.units for c in dataset.covariates}
    return LinearModel(
        intercept=float(beta[0]),
        columns=tuple(names),
        coefficients=beta[1:],
        covariate_means=means,
        covariates=dataset.names,
        levels=levels,
        units=units,
        rank_deficient=bool(deficient),
    )


def _row(model: LinearModel, z: Mapping) -> np.ndarray:
    row = np.array(model.covariate_means, dtype=float)
    for name in model.covariates:
        if name not in z:
            raise KeyError(f"missing covariate {name!r}")
        _, enc = _encode(name, [z[name]], model.levels.get(name))
        cols = model.columns_of(name)
        vals = enc[0]
        row[cols] = np.where(np.isnan(vals), row[cols], vals)
    return row


def lm_predict(model: LinearModel, z: Mapping) -> float:
    """``intercept + coefficients . z`` with ``z`` keyed by covariate name."""
    return float(model.intercept + model.coefficients @ _row(model, z))


def lm_marginalize(model: LinearModel, H: Sequence[str], eval_points: Sequence) -> MarginalCurve:
    """Marginal mean over ``H``; excluded covariates sit at their training means.

    Evaluated on the Cartesian product of the ``eval_points`` axes. With an
    empty ``H`` the result is the constant ``intercept + coefficients . means``
    (the training mean of the response).
    """
    H = tuple(H)
    if len(eval_points) != len(H):
        raise ValueError("need one eval axis per covariate in H")
    for h in H:
        model.columns_of(h)
    in_h = [c for h in H for c in model.columns_of(h)]
    out = np.ones(len(model.columns), dtype=bool)
    out[in_h] = False
    base = model.intercept + float(model.coefficients[out] @ model.covariate_means[out])
    mean = np.asarray(base)
    axes = []
    for t, (h, pts) in enumerate(zip(H, eval_points)):
        cols = model.columns_of(h)
        lv = model.levels.get(h)
        axis = np.asarray(list(pts), dtype=object) if lv else np.asarray(pts, dtype=float)
        _, enc = _encode(h, list(axis) if lv else axis, lv)
        enc = np.where(np.isnan(enc), model.covariate_means[cols][None, :], enc)
        term = enc @ model.coefficients[cols]
        mean = mean[..., None] + term.reshape((1,) * t + term.shape)
        axes.append(axis)
    units = tuple(model.units.get(h, "") for h in H)
    return MarginalCurve(H, tuple(axes), np.asarray(mean, dtype=float), units)
