"""Instance builders and independently coded reference implementations.

The references here are written in the most literal way possible (explicit
loops, dense matrices) and share no code with the package beyond the data
types they read.
"""

from __future__ import annotations

import itertools

import numpy as np

from aca.assignment import AssignmentMatrix, categorical_assign, grid_assign
from aca.core import AcaFitConfig, AcaModel, penalty_matrix
from aca.dataset import Categorical, Covariate, CovariateSpec, Dataset, RealGrid


# -- random instances --------------------------------------------------------


def random_specs(rng, L, kinds=("grid", "cat"), max_size=6):
    specs = []
    for l in range(L):
        kind = kinds[rng.integers(len(kinds))]
        n = int(rng.integers(2, max_size + 1))
        if kind == "cat":
            specs.append(CovariateSpec(f"c{l}", Categorical(tuple(f"k{j}" for j in range(n)))))
        else:
            nodes = np.cumsum(rng.uniform(0.5, 2.0, size=n)) + rng.uniform(-5, 5)
            specs.append(CovariateSpec(f"g{l}", RealGrid(tuple(nodes), "u")))
    return specs


def random_values(rng, spec, m, missing=0.0):
    if spec.is_categorical:
        vals = np.array([spec.kind.levels[j] for j in rng.integers(spec.size, size=m)], dtype=object)
        if missing:
            vals[rng.uniform(size=m) < missing] = None
        return vals
    nodes = np.asarray(spec.kind.nodes)
    span = nodes[-1] - nodes[0]
    vals = rng.uniform(nodes[0] - 0.1 * span, nodes[-1] + 0.1 * span, size=m)
    if missing:
        vals[rng.uniform(size=m) < missing] = np.nan
    return vals


def random_dataset(rng, m, specs, missing=0.0, noise=1.0):
    covs = [Covariate(s, random_values(rng, s, m, missing)) for s in specs]
    return Dataset(rng.normal(scale=noise, size=m) + 2.0, tuple(covs))


def assignments(specs, columns):
    out = []
    for s, v in zip(specs, columns):
        out.append(categorical_assign(v, s.kind.levels) if s.is_categorical else grid_assign(v, s.kind.nodes))
    return out


def random_model(rng, specs, d, lam=0.5, scale=1.0):
    factors = tuple(rng.normal(scale=scale, size=(s.size, d)) for s in specs)
    pens = tuple(penalty_matrix(s) for s in specs)
    return AcaModel(tuple(specs), factors, AcaFitConfig(d=d, lam=lam), pens)


# -- reference implementations -----------------------------------------------


def naive_predict(model, A, i):
    total = 0.0
    for k in range(model.d):
        prod = 1.0
        for l, V in enumerate(model.factors):
            s = 0.0
            for j in range(V.shape[0]):
                s += A[l][i, j] * V[j, k]
            prod *= s
        total += prod
    return total


def naive_objective(model, x, A, weights=None):
    """Weighted data term plus the cross-scaled smoothness penalty, by loops."""
    m = len(x)
    w = np.ones(m) if weights is None else weights
    data = 0.0
    for i in range(m):
        data += w[i] * (x[i] - naive_predict(model, A, i)) ** 2
    lam = model.lambdas
    pen = 0.0
    L = len(model.factors)
    for l in range(L):
        C = model.penalties[l]
        for k in range(model.d):
            pref = 1.0
            for b in range(L):
                if b != l:
                    pref *= float(np.sum(model.factors[b][:, k] ** 2))
            v = model.factors[l][:, k]
            quad = 0.0
            for a in range(len(v)):
                for c in range(len(v)):
                    quad += v[a] * C[a, c] * v[c]
            pen += lam[l] * pref * quad
    return data + pen


def naive_marginal(model, A, H, z_rows):
    """Average over samples of the product of excluded inner sums, per component.

    ``z_rows[t]`` is the assignment row of the query point for ``H[t]``.
    """
    names = model.names
    idx = [names.index(h) for h in H]
    m = A[0].shape[0]
    total = 0.0
    for k in range(model.d):
        bracket = 0.0
        for i in range(m):
            prod = 1.0
            for l in range(len(names)):
                if l in idx:
                    continue
                prod *= float(A[l][i] @ model.factors[l][:, k])
            bracket += prod
        bracket /= m
        inner = 1.0
        for t, l in enumerate(idx):
            inner *= float(z_rows[t] @ model.factors[l][:, k])
        total += bracket * inner
    return total


def hard_assignment_update(model, l, x, codes):
    """Closed-form block update for hard assignments without penalty.

    ``codes[b][i]`` is the column index of sample ``i`` in covariate ``b``.
    Row j of the new factor is (sum_{i in I_j} x_i P_i) (sum_{i in I_j} P_i' P_i)^-1
    with P_i the elementwise product of the other covariates' factor rows.
    """
    V = model.factors[l]
    d = V.shape[1]
    out = np.zeros_like(V)
    for j in range(V.shape[0]):
        num = np.zeros(d)
        den = np.zeros((d, d))
        for i in range(len(x)):
            if codes[l][i] != j:
                continue
            P = np.ones(d)
            for b, Vb in enumerate(model.factors):
                if b != l:
                    P = P * Vb[codes[b][i]]
            num += x[i] * P
            den += np.outer(P, P)
        out[j] = num @ np.linalg.inv(den)
    return out


def ols_normal_equations(X, y):
    """Intercept plus coefficients from (X'X) b = X'y with an explicit column of ones."""
    Xa = np.column_stack([np.ones(len(y)), X])
    G = Xa.T @ Xa
    rhs = Xa.T @ y
    # Gaussian elimination with partial pivoting, written out
    n = G.shape[0]
    M = np.column_stack([G, rhs]).astype(float)
    for c in range(n):
        p = c + int(np.argmax(np.abs(M[c:, c])))
        M[[c, p]] = M[[p, c]]
        M[c] /= M[c, c]
        for r in range(n):
            if r != c:
                M[r] -= M[r, c] * M[c]
    return M[:, -1]


def order_statistic_quantile(values, q):
    """Linear interpolation between order statistics at 1-based position 1 + q (n - 1)."""
    s = sorted(values)
    pos = 1 + q * (len(s) - 1)
    lo = int(np.floor(pos))
    frac = pos - lo
    if lo >= len(s):
        return float(s[-1])
    return float(s[lo - 1] + frac * (s[lo] - s[lo - 1]))


def dense_ranges(t, y, threshold, n=10_000):
    """Above/below intervals from dense evaluation of the interpolated curve."""
    grid = np.linspace(t[0], t[-1], n)
    vals = np.interp(grid, t, y)
    sign = np.sign(vals - threshold)
    above, below = [], []
    start = 0
    for i in range(1, n + 1):
        if i == n or sign[i] != sign[start]:
            seg = (grid[start], grid[i - 1])
            if sign[start] > 0:
                above.append(seg)
            elif sign[start] < 0:
                below.append(seg)
            start = i
    return above, below, grid[1] - grid[0]


def turning_angles(t, y):
    """Angles (degrees) between successive chords after unit rescaling, via acos."""
    t = (np.asarray(t, float) - np.min(t)) / np.ptp(t)
    y = (np.asarray(y, float) - np.min(y)) / np.ptp(y)
    out = []
    for i in range(1, len(t) - 1):
        a = np.array([t[i] - t[i - 1], y[i] - y[i - 1]])
        b = np.array([t[i + 1] - t[i], y[i + 1] - y[i]])
        c = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        out.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
    return out


def all_codes(specs, columns):
    codes = []
    for s, v in zip(specs, columns):
        levels = list(s.kind.levels)
        codes.append([levels.index(x) for x in v])
    return codes


def cartesian(*axes):
    return list(itertools.product(*axes))
