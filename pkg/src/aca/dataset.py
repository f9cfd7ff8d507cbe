"""Meal-log ingestion and typed dataset assembly.

A meal log is a CSV with one row per meal (see ``CSV_HEADER``). Records are
validated on load; ``build_dataset`` restricts them to one user (and
optionally one meal type) and produces a :class:`Dataset` whose response is
the BG impact ``post_bg - pre_bg``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

CSV_HEADER = (
    "user_id",
    "meal_type",
    "carbs_g",
    "fat_g",
    "protein_g",
    "fiber_g",
    "pre_bg_mgdl",
    "post_bg_mgdl",
)

MEAL_TYPES = ("breakfast", "lunch", "dinner", "other")
NUTRIENTS = ("carbs", "fat", "protein", "fiber")
REAL_COVARIATES = NUTRIENTS + ("pre_bg",)
UNITS = {"carbs": "g", "fat": "g", "protein": "g", "fiber": "g", "pre_bg": "mg/dl"}

# nutrition evaluations only accepted entries up to this many grams
NUTRIENT_ENTRY_CAP = 100.0
DEFAULT_MIN_MEALS = 30
DEFAULT_GRID_NODES = 11


class IngestError(ValueError):
    """A meal log could not be read or a record failed validation."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.row = row
        self.column = column


class InsufficientDataError(ValueError):
    """A user has fewer meals than the configured minimum."""

    def __init__(self, user: str, count: int, min_meals: int):
        super().__init__(
            f"insufficient data for user {user!r}: {count} meals, need at least {min_meals}"
        )
        self.user = user
        self.count = count
        self.min_meals = min_meals


@dataclass(frozen=True)
class MealRecord:
    user_id: str
    meal_type: str
    carbs: float | None
    fat: float | None
    protein: float | None
    fiber: float | None
    pre_bg: float
    post_bg: float
    # set when a nutrient exceeds NUTRIENT_ENTRY_CAP (kept, not clamped)
    over_cap: tuple[str, ...] = ()

    def __post_init__(self):
        if self.meal_type not in MEAL_TYPES:
            raise ValueError(f"unknown meal type {self.meal_type!r}")
        for name in NUTRIENTS:
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v!r}")
        for name in ("pre_bg", "post_bg"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")

    def nutrient(self, name: str) -> float | None:
        return getattr(self, name)


# -- covariate specs ---------------------------------------------------------


@dataclass(frozen=True)
class Categorical:
    levels: tuple[str, ...]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("categorical covariate needs at least one level")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"categorical levels must be distinct: {self.levels}")

    @property
    def size(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class RealGrid:
    nodes: tuple[float, ...]
    units: str = ""

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a real grid needs at least 2 nodes")
        if not np.all(np.isfinite(nodes)) or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be finite and strictly increasing")
        object.__setattr__(self, "nodes", tuple(float(v) for v in nodes))

    @property
    def size(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Prototyped:
    """Scalar covariate represented through learned prototypes.

    ``prototypes`` is filled in by :func:`aca.assignment.prototype_covariate`;
    a spec without prototypes cannot produce assignments.
    """

    count: int
    locality_penalty: float = 0.0
    prototypes: tuple[float, ...] | None = None
    units: str = ""

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("prototype count must be >= 1")
        if not (self.locality_penalty >= 0):
            raise ValueError("locality penalty must be >= 0")
        if self.prototypes is not None:
            if len(self.prototypes) != self.count:
                raise ValueError("prototype count does not match stored prototypes")
            object.__setattr__(self, "prototypes", tuple(float(v) for v in self.prototypes))

    @property
    def size(self) -> int:
        return self.count


CovariateKind = Union[Categorical, RealGrid, Prototyped]


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: CovariateKind

    @property
    def size(self) -> int:
        """Number of assignment columns (levels, nodes or prototypes)."""
        return self.kind.size

    @property
    def is_categorical(self) -> bool:
        return isinstance(self.kind, Categorical)

    @property
    def units(self) -> str:
        return "" if self.is_categorical else self.kind.units


@dataclass(frozen=True)
class Covariate:
    spec: CovariateSpec
    values: np.ndarray  # float with NaN for missing, or object array of labels / None

    @property
    def name(self) -> str:
        return self.spec.name


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    covariates: tuple[Covariate, ...]
    provenance: str = ""

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("a dataset needs at least one observation")
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ValueError(f"covariate names must be unique: {names}")
        covs = []
        for c in self.covariates:
            if len(c.values) != x.size:
                raise ValueError(
                    f"covariate {c.name!r} has {len(c.values)} entries, expected {x.size}"
                )
            covs.append(Covariate(c.spec, _frozen(c.values)))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "covariates", tuple(covs))

    @property
    def m(self) -> int:
        return self.x.size

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.covariates)

    @property
    def specs(self) -> tuple[CovariateSpec, ...]:
        return tuple(c.spec for c in self.covariates)

    def covariate(self, name: str) -> Covariate:
        for c in self.covariates:
            if c.name == name:
                return c
        raise KeyError(f"unknown covariate {name!r}; have {list(self.names)}")

    def take(self, rows: np.ndarray, provenance: str | None = None) -> "Dataset":
        """Row subset (with repetition allowed); specs are carried over unchanged."""
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(
            x=self.x[rows],
            covariates=tuple(Covariate(c.spec, c.values[rows]) for c in self.covariates),
            provenance=self.provenance if provenance is None else provenance,
        )

    def replace_spec(self, spec: CovariateSpec) -> "Dataset":
        covs = tuple(
            Covariate(spec, c.values) if c.name == spec.name else c for c in self.covariates
        )
        return Dataset(self.x, covs, self.provenance)


# -- loading -----------------------------------------------------------------


def bg_impact(pre: float, post: float) -> float:
    """Glycemic impact of a meal in mg/dl: post-meal minus pre-meal BG."""
    if not (math.isfinite(pre) and math.isfinite(post)):
        raise ValueError(f"BG readings must be finite, got pre={pre!r}, post={post!r}")
    return post - pre


def _parse_float(text: str, row: int, column: str, *, optional: bool) -> float | None:
    text = text.strip()
    if text == "":
        if optional:
            return None
        raise IngestError("missing value", row=row, column=column)
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"non-numeric value {text!r}", row=row, column=column) from None
    if not math.isfinite(value):
        raise IngestError(f"non-finite value {text!r}", row=row, column=column)
    return value


def _record_from_row(row: dict, lineno: int) -> MealRecord:
    user = row["user_id"].strip()
    if not user:
        raise IngestError("empty user_id", row=lineno, column="user_id")
    meal = row["meal_type"].strip().lower()
    if meal not in MEAL_TYPES:
        raise IngestError(
            f"unknown meal type {row['meal_type']!r}; expected one of {MEAL_TYPES}",
            row=lineno,
            column="meal_type",
        )
    nutrients = {}
    flagged = []
    for name in NUTRIENTS:
        column = f"{name}_g"
        v = _parse_float(row[column], lineno, column, optional=True)
        if v is not None and v < 0:
            raise IngestError(f"negative nutrient value {v}", row=lineno, column=column)
        if v is not None and v > NUTRIENT_ENTRY_CAP:
            flagged.append(name)
        nutrients[name] = v
    bg = {}
    for name, column in (("pre_bg", "pre_bg_mgdl"), ("post_bg", "post_bg_mgdl")):
        v = _parse_float(row[column], lineno, column, optional=False)
        if v <= 0:
            raise IngestError(f"BG reading must be positive, got {v}", row=lineno, column=column)
        bg[name] = v
    return MealRecord(user_id=user, meal_type=meal, **nutrients, **bg, over_cap=tuple(flagged))


def read_meals_csv(path: str | Path) -> tuple[list[MealRecord], list[IngestError]]:
    """Read a meal log, keeping valid rows and collecting rejected ones.

    Header problems and a missing file raise immediately. Row numbers count
    the header as row 1.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        missing = [h for h in CSV_HEADER if h not in header]
        unknown = [h for h in header if h not in CSV_HEADER]
        if missing:
            raise IngestError(f"missing column(s) {missing} in header", row=1)
        if unknown:
            raise IngestError(f"unknown column(s) {unknown} in header", row=1)
        reader.fieldnames = list(header)
        records, rejected = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                if None in row or any(v is None for v in row.values()):
                    raise IngestError("wrong number of fields", row=lineno)
                records.append(_record_from_row(row, lineno))
            except IngestError as exc:
                rejected.append(exc)
    return records, rejected


def load_meals_csv(path: str | Path) -> list[MealRecord]:
    """Read a meal log, returning records in file order.

    Raises :class:`IngestError` if any row fails validation; the message
    names every rejected row.
    """
    records, rejected = read_meals_csv(path)
    if rejected:
        first = rejected[0]
        detail = "; ".join(str(e) for e in rejected)
        raise IngestError(f"{len(rejected)} invalid row(s): {detail}", row=first.row, column=first.column)
    return records


def write_meals_csv(records: Sequence[MealRecord], path: str | Path) -> None:
    def fmt(v: float | None) -> str:
        return "" if v is None else repr(float(v))

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(
                [r.user_id, r.meal_type, fmt(r.carbs), fmt(r.fat), fmt(r.protein),
                 fmt(r.fiber), fmt(r.pre_bg), fmt(r.post_bg)]
            )


# -- dataset assembly --------------------------------------------------------


def build_dataset(
    records: Sequence[MealRecord],
    user: str,
    meal_filter: str | None = None,
    min_meals: int = DEFAULT_MIN_MEALS,
    *,
    grid_nodes: int = DEFAULT_GRID_NODES,
    include_meal_type: bool = True,
) -> Dataset:
    """Assemble the dataset for one user, optionally restricted to one meal type.

    ``min_meals`` applies to the user's total meal count, before the meal
    filter. Real covariates get an equally spaced grid of ``grid_nodes`` nodes
    over the observed range of the subset. ``meal_type`` enters as a
    categorical covariate only for pooled fits.
    """
    from .assignment import build_grid

    mine = [r for r in records if r.user_id == user]
    if len(mine) < min_meals:
        raise InsufficientDataError(user, len(mine), min_meals)
    if meal_filter is not None:
        meal_filter = meal_filter.lower()
        if meal_filter not in MEAL_TYPES:
            raise ValueError(f"unknown meal type {meal_filter!r}")
        mine = [r for r in mine if r.meal_type == meal_filter]
    if not mine:
        raise InsufficientDataError(user, 0, 1)

    x = np.array([bg_impact(r.pre_bg, r.post_bg) for r in mine])
    covs = []
    for name in REAL_COVARIATES:
        values = np.array([np.nan if r.nutrient(name) is None else r.nutrient(name) for r in mine])
        spec = CovariateSpec(name, RealGrid(tuple(build_grid(values, grid_nodes)), UNITS[name]))
        covs.append(Covariate(spec, values))
    if meal_filter is None and include_meal_type:
        present = tuple(t for t in MEAL_TYPES if any(r.meal_type == t for r in mine))
        labels = np.array([r.meal_type for r in mine], dtype=object)
        covs.append(Covariate(CovariateSpec("meal_type", Categorical(present)), labels))

    subset = meal_filter or "all"
    return Dataset(x=x, covariates=tuple(covs), provenance=f"user={user} subset={subset} m={len(mine)}")


def users_in(records: Sequence[MealRecord]) -> list[str]:
    """User ids in order of first appearance."""
    return list(dict.fromkeys(r.user_id for r in records))
