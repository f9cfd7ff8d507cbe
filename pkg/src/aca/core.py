"""Attributable components: a penalized, separable low-rank conditional mean.

The conditional mean of ``x`` given covariates ``z_1..z_L`` is modelled as

    xbar(z) = sum_k prod_l sum_j alpha(l)_j(z_l) V(l)[j, k]

with one factor matrix ``V(l)`` (columns = components) per covariate and
assignment rows ``alpha(l)`` from :mod:`aca.assignment`. Fitting minimizes

    sum_i (x_i - xbar(z^i))^2
      + sum_l lam_l sum_k (prod_{b != l} |V(b)[:, k]|^2) V(l)[:, k]' C_l V(l)[:, k]

one factor matrix at a time. The objective is quadratic in each ``V(l)``, so
every block update is an exact linear solve.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .assignment import AssignmentMatrix, assign
from .dataset import Categorical, CovariateSpec, Prototyped, RealGrid

log = logging.getLogger(__name__)


# -- penalties ---------------------------------------------------------------


def _difference_operator(t: np.ndarray, order: int) -> np.ndarray:
    """Finite-difference derivative operator on the (possibly uneven) points ``t``."""
    n = t.size
    if order == 1:
        D = np.zeros((n - 1, n))
        h = np.diff(t)
        D[np.arange(n - 1), np.arange(n - 1)] = -1.0 / h
        D[np.arange(n - 1), np.arange(1, n)] = 1.0 / h
        return D
    D = np.zeros((n - 2, n))
    for r in range(n - 2):
        h0, h1 = t[r + 1] - t[r], t[r + 2] - t[r + 1]
        D[r, r] = 2.0 / (h0 * (h0 + h1))
        D[r, r + 1] = -2.0 / (h0 * h1)
        D[r, r + 2] = 2.0 / (h1 * (h0 + h1))
    return D


def penalty_matrix(spec: CovariateSpec, order: int = 2) -> np.ndarray:
    """Smoothness (real) or variance (categorical) penalty ``C_l``.

    Real grids use the squared ``order``-th difference operator (1 or 2) with
    node positions rescaled to [0, 1], so the penalty does not depend on the
    covariate's units. Prototypes use unit spacing in sorted order. Second
    differences need 3 nodes; smaller grids fall back to first differences.
    Categorical covariates use the centering matrix ``I - 11'/n``.
    """
    if order not in (1, 2):
        raise ValueError(f"penalty order must be 1 or 2, got {order}")
    kind = spec.kind
    n = spec.size
    if n == 1:
        return np.zeros((1, 1))
    if isinstance(kind, Categorical):
        return np.eye(n) - np.full((n, n), 1.0 / n)
    if isinstance(kind, RealGrid):
        nodes = np.asarray(kind.nodes)
        t = (nodes - nodes[0]) / (nodes[-1] - nodes[0])
    elif isinstance(kind, Prototyped):
        t = np.linspace(0.0, 1.0, n)
    else:
        raise TypeError(f"unsupported covariate kind {type(kind).__name__}")
    D = _difference_operator(t, order if n >= 3 else 1)
    C = D.T @ D
    return 0.5 * (C + C.T)


def penalty_scale(m: int, specs: Sequence[CovariateSpec]) -> float:
    """Factor ``m / prod_l m(l)`` applied to every penalty matrix.

    The penalty prefactors are products of squared factor norms, which grow
    with the number of grid nodes of every covariate. Dividing by the product
    of the grid sizes turns them into mean-square norms, and multiplying by
    the sample size keeps the balance between data and penalty fixed as ``m``
    changes (bootstrap replicas are smoothed like the original fit).
    """
    return float(m) / float(np.prod([s.size for s in specs], dtype=float))


# -- model -------------------------------------------------------------------


@dataclass(frozen=True)
class AcaFitConfig:
    d: int = 2
    lam: float | Mapping[str, float] = 0.03
    max_sweeps: int = 500
    tol: float = 1e-8
    seed: int = 0
    init_scale: float = 0.1
    n_init: int = 3
    # difference order of the smoothness penalty on real and prototyped covariates
    penalty_order: int = 1
    # "sample": scale every C_l by m / prod_l m(l) (see penalty_scale); "none": raw C_l
    penalty_scaling: str = "sample"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("need at least one component")
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be > 0")
        if self.penalty_order not in (1, 2):
            raise ValueError(f"penalty order must be 1 or 2, got {self.penalty_order}")
        if self.penalty_scaling not in ("sample", "none"):
            raise ValueError(f"unknown penalty scaling {self.penalty_scaling!r}")
        lams = self.lam.values() if isinstance(self.lam, Mapping) else [self.lam]
        if any(not (v >= 0) for v in lams):
            raise ValueError("penalty strengths must be >= 0")

    def lambdas(self, names: Sequence[str]) -> np.ndarray:
        if isinstance(self.lam, Mapping):
            return np.array([float(self.lam.get(n, 0.0)) for n in names])
        return np.full(len(names), float(self.lam))


@dataclass(frozen=True)
class AcaModel:
    specs: tuple[CovariateSpec, ...]
    factors: tuple[np.ndarray, ...]
    config: AcaFitConfig
    penalties: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not self.specs:
            raise ValueError("a model needs at least one covariate")
        if not (len(self.specs) == len(self.factors) == len(self.penalties)):
            raise ValueError("specs, factors and penalties must align")
        ds = {V.shape[1] for V in self.factors}
        if len(ds) != 1:
            raise ValueError("all factor matrices need the same number of components")
        for s, V, C in zip(self.specs, self.factors, self.penalties):
            if V.shape[0] != s.size or C.shape != (s.size, s.size):
                raise ValueError(f"factor/penalty shape mismatch for covariate {s.name!r}")
            if not np.all(np.isfinite(V)):
                raise ValueError(f"non-finite factor entries for covariate {s.name!r}")
        object.__setattr__(self, "factors", tuple(_readonly(V) for V in self.factors))
        object.__setattr__(self, "penalties", tuple(_readonly(C) for C in self.penalties))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.specs)

    @property
    def d(self) -> int:
        return self.factors[0].shape[1]

    @property
    def lambdas(self) -> np.ndarray:
        return self.config.lambdas(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown covariate {name!r}; model has {list(self.names)}") from None

    def with_factors(self, factors: Sequence[np.ndarray]) -> "AcaModel":
        return AcaModel(self.specs, tuple(factors), self.config, self.penalties)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FitReport:
    objective_trace: tuple[float, ...]
    sweeps_run: int
    converged: bool
    singular_solves: int = 0
    rejected_updates: int = 0
    restart: int = 0


@dataclass(frozen=True)
class MarginalCurve:
    covariates: tuple[str, ...]
    eval_points: tuple[np.ndarray, ...]  # one axis per covariate
    mean: np.ndarray  # shape = tuple(len(axis) for axis in eval_points)
    units: tuple[str, ...] = field(default=(), compare=False)

    @property
    def points(self) -> np.ndarray:
        """Eval axis of a single-covariate curve."""
        if len(self.eval_points) != 1:
            raise ValueError("curve has more than one axis")
        return self.eval_points[0]


# -- objective ---------------------------------------------------------------


def _entries(alphas: Sequence[AssignmentMatrix | np.ndarray]) -> list[np.ndarray]:
    return [a.entries if isinstance(a, AssignmentMatrix) else np.asarray(a, dtype=float) for a in alphas]


def _check_shapes(factors, x: np.ndarray, A: list[np.ndarray], names) -> None:
    if len(A) != len(factors):
        raise ValueError(f"got {len(A)} assignment matrices for {len(factors)} covariates")
    for name, a, V in zip(names, A, factors):
        if a.shape != (x.size, V.shape[0]):
            raise ValueError(
                f"assignment for {name!r} has shape {a.shape}, expected {(x.size, V.shape[0])}"
            )


def _weights(weights, m: int) -> np.ndarray:
    if weights is None:
        return np.ones(m)
    w = np.asarray(weights, dtype=float)
    if w.shape != (m,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be m finite non-negative values")
    return w


def _leave_one_out(a: np.ndarray) -> np.ndarray:
    """Row ``l`` holds the product of all rows of ``a`` except ``l``."""
    n = a.shape[0]
    pre = np.ones((n + 1,) + a.shape[1:])
    suf = np.ones((n + 1,) + a.shape[1:])
    pre[1:] = np.cumprod(a, axis=0)
    suf[:-1] = np.cumprod(a[::-1], axis=0)[::-1]
    return pre[:-1] * suf[1:]


class _Problem:
    """Data, row weights and penalties of one fit.

    Factor-dependent quantities are passed around as ``(S, norms2, quads)``:
    the per-covariate inner sums ``A_l @ V_l`` (m, d), squared column norms
    (L, d), and penalty quadratic forms ``V_l[:, k]' C_l V_l[:, k]`` (L, d).
    """

    def __init__(self, x, A, penalties, lambdas, weights):
        self.x = x
        self.A = A
        self.C = penalties
        self.lam = np.asarray(lambdas, dtype=float)
        self.w = weights

    def block_terms(self, l, V):
        return self.A[l] @ V, np.sum(V * V, axis=0), np.einsum("jk,jh,hk->k", V, self.C[l], V)

    def terms(self, factors):
        parts = [self.block_terms(l, V) for l, V in enumerate(factors)]
        S = [p[0] for p in parts]
        return S, np.stack([p[1] for p in parts]), np.stack([p[2] for p in parts])

    def penalty(self, norms2, quads) -> float:
        return float(np.sum(self.lam[:, None] * _leave_one_out(norms2) * quads))

    def value(self, S, norms2, quads) -> float:
        pred = np.prod(np.stack(S), axis=0).sum(axis=1)
        return float(np.sum(self.w * (self.x - pred) ** 2)) + self.penalty(norms2, quads)

    def system(self, l, S, norms2, quads):
        """Normal equations ``H v = r`` of the objective restricted to ``V(l)``.

        ``v`` is ``V(l)`` flattened row-major, i.e. index ``j * d + k``.
        """
        L = len(S)
        m, d = S[0].shape
        P = np.prod(np.stack([s for b, s in enumerate(S) if b != l]), axis=0) if L > 1 else np.ones((m, d))
        a = self.A[l]
        J = a.shape[1]
        Phi = (a[:, :, None] * P[:, None, :]).reshape(m, J * d)
        WPhi = Phi * self.w[:, None]
        H = Phi.T @ WPhi
        r = WPhi.T @ self.x
        # own penalty: lam_l * prod_{b != l} |V(b)_k|^2 * V(l)_k' C_l V(l)_k
        own = self.lam[l] * _leave_one_out(norms2)[l]
        # every other covariate's penalty carries |V(l)_k|^2 as a prefactor
        without_l = norms2.copy()
        without_l[l] = 1.0
        lam = self.lam.copy()
        lam[l] = 0.0
        q = np.sum(lam[:, None] * _leave_one_out(without_l) * quads, axis=0)
        H4 = H.reshape(J, d, J, d)
        eye = np.eye(J)
        for k in range(d):
            H4[:, k, :, k] += own[k] * self.C[l] + q[k] * eye
        return 0.5 * (H + H.T), r

    def solve(self, l, S, norms2, quads):
        H, r = self.system(l, S, norms2, quads)
        v, singular = _solve_psd(H, r)
        return v.reshape(self.A[l].shape[1], S[0].shape[1]), singular


def aca_objective(model: AcaModel, x, alphas: Sequence[AssignmentMatrix], weights=None) -> float:
    """Penalized least-squares objective of ``model`` on ``(x, alphas)``.

    ``weights`` multiplies each squared residual (row multiplicities).
    """
    x = np.asarray(x, dtype=float)
    A = _entries(alphas)
    _check_shapes(model.factors, x, A, model.names)
    prob = _Problem(x, A, model.penalties, model.lambdas, _weights(weights, x.size))
    return prob.value(*prob.terms(model.factors))


# -- block update ------------------------------------------------------------


def _solve_psd(H: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``H v = r`` for symmetric PSD ``H``; minimum-norm if (near) singular."""
    w, U = np.linalg.eigh(H)
    top = max(w[-1], 0.0)
    if top == 0.0:
        return np.zeros_like(r), True
    keep = w > top * H.shape[0] * np.finfo(float).eps * 10
    coef = U.T @ r
    v = U[:, keep] @ (coef[keep] / w[keep])
    return v, not keep.all()


def solve_block(
    l: int, model: AcaModel, x, alphas: Sequence[AssignmentMatrix], weights=None
) -> tuple[np.ndarray, bool]:
    """Exact minimizer of the objective over ``V(l)`` with the other factors fixed.

    Returns the new factor matrix and whether the linear system was singular
    (in which case the minimum-norm minimizer is returned).
    """
    x = np.asarray(x, dtype=float)
    A = _entries(alphas)
    _check_shapes(model.factors, x, A, model.names)
    prob = _Problem(x, A, model.penalties, model.lambdas, _weights(weights, x.size))
    return prob.solve(l, *prob.terms(model.factors))


# -- fitting -----------------------------------------------------------------


def init_factors(specs: Sequence[CovariateSpec], config: AcaFitConfig, restart: int = 0) -> list[np.ndarray]:
    """Uniform draws on [-init_scale, init_scale]; restart ``r > 0`` uses stream ``[seed, r]``."""
    rng = np.random.default_rng(config.seed if restart == 0 else [config.seed, restart])
    s = config.init_scale
    return [rng.uniform(-s, s, size=(spec.size, config.d)) for spec in specs]


def _descend(prob: _Problem, factors: list[np.ndarray], config: AcaFitConfig):
    S, norms2, quads = prob.terms(factors)
    f = prob.value(S, norms2, quads)
    trace = [f]
    singular = rejected = 0
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_sweeps + 1):
        for l in range(len(factors)):
            V, sing = prob.solve(l, S, norms2, quads)
            singular += sing
            S_l, n_l, q_l = prob.block_terms(l, V)
            S_new = S[:l] + [S_l] + S[l + 1:]
            n_new, q_new = norms2.copy(), quads.copy()
            n_new[l], q_new[l] = n_l, q_l
            f_new = prob.value(S_new, n_new, q_new)
            # an exact block minimizer cannot increase the objective; guard rounding
            if f_new <= f:
                factors[l], S, norms2, quads, f = V, S_new, n_new, q_new, f_new
            else:
                rejected += 1
        prev = trace[-1]
        trace.append(f)
        if f == 0.0 or abs(prev - f) <= config.tol * abs(prev):
            converged = True
            break
    return factors, FitReport(tuple(trace), sweeps, converged, singular, rejected)


def aca_fit(
    x,
    alphas: Sequence[AssignmentMatrix],
    specs: Sequence[CovariateSpec],
    config: AcaFitConfig = AcaFitConfig(),
    *,
    init: Sequence[np.ndarray] | None = None,
    weights=None,
) -> tuple[AcaModel, FitReport]:
    """Fit factor matrices by cycling exact block updates over the covariates.

    Each of ``config.n_init`` random starts sweeps ``l = 1..L`` until the
    relative objective change over a sweep drops below ``config.tol`` or
    ``config.max_sweeps`` is reached; the start with the lowest final
    objective wins. A block update that would raise the objective (possible
    only through rounding) is discarded, so every trace is non-increasing.

    ``weights`` are row multiplicities; fitting unique rows with their counts
    is equivalent to fitting the expanded sample.
    """
    x = np.asarray(x, dtype=float)
    specs = tuple(specs)
    if not specs:
        raise ValueError("need at least one covariate")
    if x.ndim != 1 or x.size < 1:
        raise ValueError("need at least one observation")
    if not np.all(np.isfinite(x)):
        raise ValueError("response contains non-finite values")
    w = _weights(weights, x.size)
    A = _entries(alphas)
    if config.penalty_scaling == "sample":
        scale = penalty_scale(w.sum(), specs)
    else:
        scale = 1.0
    penalties = tuple(scale * penalty_matrix(s, config.penalty_order) for s in specs)
    if init is not None and config.n_init != 1:
        raise ValueError("an explicit init is only valid with n_init = 1")

    best = None
    for r in range(config.n_init):
        factors = [np.array(V, dtype=float) for V in init] if init is not None else init_factors(specs, config, r)
        model = AcaModel(specs, tuple(factors), config, penalties)
        _check_shapes(model.factors, x, A, model.names)
        prob = _Problem(x, A, penalties, model.lambdas, w)
        factors, report = _descend(prob, list(factors), config)
        if not report.converged:
            log.debug("aca_fit start %d stopped after %d sweeps without converging", r, report.sweeps_run)
        if best is None or report.objective_trace[-1] < best[1].objective_trace[-1]:
            best = (factors, report, r)
    factors, report, r = best
    report = replace(report, restart=r)
    return AcaModel(specs, tuple(factors), config, penalties), report


# -- prediction and marginals ------------------------------------------------


def aca_predict(model: AcaModel, alpha_rows: Sequence[np.ndarray]) -> float:
    """Model value at one point given one assignment row per covariate."""
    rows = [np.asarray(r, dtype=float) for r in alpha_rows]
    if len(rows) != len(model.factors):
        raise ValueError(f"got {len(rows)} assignment rows for {len(model.factors)} covariates")
    prod = np.ones(model.d)
    for name, r, V in zip(model.names, rows, model.factors):
        if r.shape != (V.shape[0],):
            raise ValueError(f"assignment row for {name!r} has shape {r.shape}, expected {(V.shape[0],)}")
        prod = prod * (r @ V)
    return float(prod.sum())


def predict_matrix(model: AcaModel, alphas: Sequence[AssignmentMatrix]) -> np.ndarray:
    """Model values at every row of the assignment matrices."""
    A = _entries(alphas)
    if len(A) != len(model.factors):
        raise ValueError(f"got {len(A)} assignment matrices for {len(model.factors)} covariates")
    S = [a @ V for a, V in zip(A, model.factors)]
    return np.prod(np.stack(S), axis=0).sum(axis=1)


def eval_assignment(spec: CovariateSpec, points) -> np.ndarray:
    """Assignment rows for query points of one covariate."""
    if spec.is_categorical:
        return assign(spec, list(points)).entries
    return assign(spec, np.asarray(points, dtype=float)).entries


def aca_marginalize(
    model: AcaModel,
    alphas: Sequence[AssignmentMatrix],
    H: Sequence[str],
    eval_points: Sequence,
    weights=None,
) -> MarginalCurve:
    """Marginal mean over the covariates in ``H``, averaging the rest over the sample.

    ``eval_points`` holds one axis of query values per member of ``H``; the
    result is evaluated on their Cartesian product. ``weights`` are row
    multiplicities of the sample behind ``alphas``.
    """
    H = tuple(H)
    if not H:
        raise ValueError("H must name at least one covariate")
    if len(eval_points) != len(H):
        raise ValueError("need one eval axis per covariate in H")
    idx = [model.index(h) for h in H]
    if len(set(idx)) != len(idx):
        raise ValueError("repeated covariate in H")
    A = _entries(alphas)
    if len(A) != len(model.factors):
        raise ValueError(f"got {len(A)} assignment matrices for {len(model.factors)} covariates")

    outside = [l for l in range(len(model.factors)) if l not in idx]
    if outside:
        terms = np.prod(np.stack([A[l] @ model.factors[l] for l in outside]), axis=0)
        if weights is None:
            bracket = terms.mean(axis=0)
        else:
            w = _weights(weights, terms.shape[0])
            bracket = (w[:, None] * terms).sum(axis=0) / w.sum()
    else:
        bracket = np.ones(model.d)

    axes = []
    mean = bracket
    for t, (l, pts) in enumerate(zip(idx, eval_points)):
        spec = model.specs[l]
        axis = list(pts) if spec.is_categorical else np.asarray(pts, dtype=float)
        axes.append(np.asarray(axis, dtype=object) if spec.is_categorical else axis)
        S = eval_assignment(spec, axis) @ model.factors[l]  # (n_t, d)
        mean = mean[..., None, :] * S.reshape((1,) * t + S.shape)
    mean = mean.sum(axis=-1)
    units = tuple(model.specs[l].units for l in idx)
    return MarginalCurve(H, tuple(axes), mean, units)
