"""Row-stochastic assignment matrices.

Every covariate value is expressed as a convex combination of the columns
of its representation: one-hot rows for categories, at most two adjacent
nonzeros for piecewise-linear grids, and local convex combinations of
learned prototypes. Missing values get a uniform row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import Categorical, CovariateSpec, Dataset, Prototyped, RealGrid


@dataclass(frozen=True)
class AssignmentMatrix:
    entries: np.ndarray  # (m, J)
    columns: tuple  # labels, node values or prototype indices

    def __post_init__(self):
        e = np.array(self.entries, dtype=float, copy=True)
        if e.ndim != 2 or e.shape[1] != len(self.columns):
            raise ValueError(f"entries shape {e.shape} does not match {len(self.columns)} columns")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape


def _is_missing(v) -> bool:
    if v is None:
        return True
    try:
        return bool(np.isnan(v))
    except TypeError:
        return False


# -- categorical -------------------------------------------------------------


def categorical_assign(values: Sequence, levels: Sequence[str]) -> AssignmentMatrix:
    levels = tuple(levels)
    index = {lev: j for j, lev in enumerate(levels)}
    out = np.zeros((len(values), len(levels)))
    for i, v in enumerate(values):
        if _is_missing(v):
            out[i] = 1.0 / len(levels)
        elif v in index:
            out[i, index[v]] = 1.0
        else:
            raise ValueError(f"label {v!r} (row {i}) is not one of the levels {levels}")
    return AssignmentMatrix(out, levels)


# -- real grids --------------------------------------------------------------


def build_grid(values: Sequence[float], n_nodes: int) -> np.ndarray:
    """Equally spaced nodes over the range of the non-missing values.

    A constant column gets nodes spanning ``value - 0.5 .. value + 0.5``.
    """
    if n_nodes < 2:
        raise ValueError("a grid needs at least 2 nodes")
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("cannot build a grid: all values are missing")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    nodes = np.linspace(lo, hi, n_nodes)
    # linspace can miss the endpoint by an ulp
    nodes[0], nodes[-1] = lo, hi
    return nodes


def grid_assign(values: Sequence[float], nodes: Sequence[float]) -> AssignmentMatrix:
    """Piecewise-linear interpolation weights on ``nodes``.

    Values outside the grid clamp to the nearest end node.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
        raise ValueError("grid nodes must be strictly increasing with at least 2 entries")
    z = np.asarray(values, dtype=float)
    J = nodes.size
    out = np.zeros((z.size, J))
    missing = ~np.isfinite(z)
    out[missing] = 1.0 / J

    zc = np.clip(z[~missing], nodes[0], nodes[-1])
    j = np.clip(np.searchsorted(nodes, zc, side="right") - 1, 0, J - 2)
    t = (zc - nodes[j]) / (nodes[j + 1] - nodes[j])
    rows = np.flatnonzero(~missing)
    out[rows, j] = 1.0 - t
    out[rows, j + 1] = t
    return AssignmentMatrix(out, tuple(float(n) for n in nodes))


# -- prototypes --------------------------------------------------------------


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    # the projection is shift invariant; shifting keeps huge steps from cancelling
    v = v - v.max(axis=1, keepdims=True)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, n + 1)
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray  # (J, p)
    weights: np.ndarray  # (m, J), columns on the simplex
    objective_trace: tuple[float, ...] = field(default=(), compare=False)


def _as_points(values) -> np.ndarray:
    z = np.asarray(values, dtype=float)
    return z[:, None] if z.ndim == 1 else z


def prototype_objective(z, alpha, beta, locality_penalty: float) -> float:
    """Reconstruction error plus locality cost for prototypes ``beta.T @ z``."""
    z = _as_points(z)
    y = beta.T @ z
    recon = z - alpha @ y
    dist = ((z[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return float((recon**2).sum() + locality_penalty * (dist * alpha).sum())


def locality_cost(z, alpha, prototypes) -> float:
    z = _as_points(z)
    y = _as_points(prototypes)
    dist = ((z[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return float((dist * alpha).sum())


def _pg_alpha(z, y, alpha, lam, max_iter, tol):
    """Simplex-constrained least squares for each row of ``alpha`` (prototypes fixed)."""
    G = y @ y.T
    zy = z @ y.T
    dist = ((z[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    L = 2.0 * max(np.linalg.eigvalsh(G).max(), 1e-300)
    for _ in range(max_iter):
        grad = 2.0 * (alpha @ G - zy) + lam * dist
        new = project_simplex(alpha - grad / L)
        step = np.abs(new - alpha).max()
        alpha = new
        if step < tol:
            break
    return alpha


def _pg_beta(z, alpha, beta, lam, max_iter, tol):
    """Simplex-constrained least squares for each column of ``beta`` (alpha fixed)."""
    s = alpha.sum(axis=0)
    M = alpha.T @ alpha + lam * np.diag(s)
    L = 2.0 * max(np.linalg.eigvalsh(M).max() * np.linalg.norm(z, 2) ** 2, 1e-300)
    AtZ = alpha.T @ z
    for _ in range(max_iter):
        y = beta.T @ z
        grad_y = 2.0 * (M @ y - (1.0 + lam) * AtZ)
        grad = z @ grad_y.T
        new = project_simplex((beta - grad / L).T).T
        step = np.abs(new - beta).max()
        beta = new
        if step < tol:
            break
    return beta


def prototypal_assign(
    values,
    count: int,
    locality_penalty: float = 0.0,
    seed: int = 0,
    *,
    max_iter: int = 200,
    tol: float = 1e-8,
    n_alternations: int = 50,
) -> tuple[PrototypeSet, AssignmentMatrix]:
    """Learn ``count`` prototypes as convex combinations of the data points.

    Alternates between the assignment weights ``alpha`` (each point as a
    convex combination of prototypes) and the prototype weights ``beta``
    (each prototype as a convex combination of points). Both sub-problems are
    solved by projected gradient with step ``1/L``, which never increases the
    objective, so the recorded trace is non-increasing.

    Parameters
    ----------
    values : (m,) or (m, p) array
        Points to represent; missing values are not allowed here.
    count : int
        Number of prototypes J, at most m.
    locality_penalty : float
        Weight of the locality term sum_ij |z_i - y_j|^2 alpha_ij.
    seed : int
        Seeds the choice of initial prototypes among the data points.
    max_iter : int
        Projected-gradient iterations per sub-problem.
    """
    z = _as_points(values)
    m = z.shape[0]
    if not np.all(np.isfinite(z)):
        raise ValueError("prototypal analysis needs complete, finite values")
    if count > m:
        raise ValueError(f"cannot fit {count} prototypes to {m} points")
    if max_iter < 1 or n_alternations < 1:
        raise ValueError("iteration budget must be at least 1")

    rng = np.random.default_rng(seed)
    beta = np.zeros((m, count))
    beta[rng.choice(m, size=count, replace=False), np.arange(count)] = 1.0
    alpha = np.full((m, count), 1.0 / count)
    lam = float(locality_penalty)

    trace = [prototype_objective(z, alpha, beta, lam)]
    for _ in range(n_alternations):
        alpha = _pg_alpha(z, beta.T @ z, alpha, lam, max_iter, tol)
        beta = _pg_beta(z, alpha, beta, lam, max_iter, tol)
        trace.append(prototype_objective(z, alpha, beta, lam))
        if abs(trace[-2] - trace[-1]) <= tol * max(abs(trace[-2]), 1e-300):
            break

    y = beta.T @ z
    protos = PrototypeSet(prototypes=y, weights=beta, objective_trace=tuple(trace))
    return protos, AssignmentMatrix(alpha, tuple(range(count)))


def assign_to_prototypes(values, prototypes, locality_penalty: float, *, max_iter: int = 200, tol: float = 1e-8) -> AssignmentMatrix:
    """Assignment rows for (possibly new) values against fixed prototypes.

    Missing scalar values get a uniform row.
    """
    y = _as_points(prototypes)
    z = _as_points(values)
    J = y.shape[0]
    out = np.full((z.shape[0], J), 1.0 / J)
    ok = np.all(np.isfinite(z), axis=1)
    if ok.any():
        out[ok] = _pg_alpha(z[ok], y, out[ok], float(locality_penalty), max_iter, tol)
    return AssignmentMatrix(out, tuple(range(J)))


def prototype_covariate(
    dataset: Dataset, name: str, count: int, locality_penalty: float = 0.0, seed: int = 0
) -> Dataset:
    """Replace a real covariate's representation by learned prototypes.

    Prototypes are sorted ascending so neighbouring columns are neighbours in
    value, which the smoothness penalty relies on.
    """
    cov = dataset.covariate(name)
    values = np.asarray(cov.values, dtype=float)
    protos, _ = prototypal_assign(values[np.isfinite(values)], count, locality_penalty, seed)
    ordered = np.sort(protos.prototypes[:, 0])
    kind = Prototyped(count, locality_penalty, tuple(ordered), cov.spec.units)
    return dataset.replace_spec(CovariateSpec(name, kind))


# -- dispatch ----------------------------------------------------------------


def assign(spec: CovariateSpec, values) -> AssignmentMatrix:
    """Assignment matrix of ``values`` under a covariate's representation."""
    kind = spec.kind
    if isinstance(kind, Categorical):
        return categorical_assign(values, kind.levels)
    if isinstance(kind, RealGrid):
        return grid_assign(values, kind.nodes)
    if isinstance(kind, Prototyped):
        if kind.prototypes is None:
            raise ValueError(f"covariate {spec.name!r} has no fitted prototypes")
        return assign_to_prototypes(values, kind.prototypes, kind.locality_penalty)
    raise TypeError(f"unsupported covariate kind {type(kind).__name__}")


def dataset_assignments(dataset: Dataset) -> list[AssignmentMatrix]:
    return [assign(c.spec, c.values) for c in dataset.covariates]
