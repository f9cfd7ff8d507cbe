"""Synthetic meal logs with a known glycemic response law.

Each user is described by a :class:`SynthConfig`. Nutrients are drawn from
per-nutrient laws, the noiseless BG impact comes from a named response law,
and Gaussian noise is added on top. BG impacts are quantized to multiples of
2**-10 mg/dl so that ``post_bg - pre_bg`` reproduces the generated impact
exactly in floating point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import MEAL_TYPES, NUTRIENTS, MealRecord

QUANTUM = 2.0**-10


@dataclass(frozen=True)
class NutrientLaw:
    low: float
    high: float
    shape: str = "uniform"  # "uniform" or "skewed" (Beta(1.5, 4) mass near low)

    def __post_init__(self):
        if not (0 <= self.low < self.high):
            raise ValueError(f"need 0 <= low < high, got [{self.low}, {self.high}]")
        if self.shape not in ("uniform", "skewed"):
            raise ValueError(f"unknown law shape {self.shape!r}")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.uniform(size=n) if self.shape == "uniform" else rng.beta(1.5, 4.0, size=n)
        return np.round(self.low + (self.high - self.low) * u, 1)


@dataclass(frozen=True)
class OutlierSpec:
    covariate: str = "fiber"
    value: float = 50.0
    count: int = 2


DEFAULT_LAWS = {
    "carbs": NutrientLaw(0.0, 100.0, "uniform"),
    "fat": NutrientLaw(0.0, 60.0, "skewed"),
    "protein": NutrientLaw(0.0, 60.0, "skewed"),
    "fiber": NutrientLaw(0.0, 15.0, "skewed"),
}


def _linear(c, f, p, fi, bg):
    return 0.6 * c + 0.2 * f - 0.1 * p - 1.5 * fi - 0.1 * (bg - 140.0)


def _quadratic(c, f, p, fi, bg):
    return 0.025 * (c - 50.0) ** 2 - 10.0


def _piecewise_flat(c, f, p, fi, bg):
    return 40.0 - 3.0 * np.minimum(fi, 10.0)


RESPONSES = {
    "linear": _linear,
    "quadratic": _quadratic,
    "piecewise-flat-with-outliers": _piecewise_flat,
}


@dataclass(frozen=True)
class SynthConfig:
    n: int
    response: str = "linear"
    noise_sd: float = 10.0
    user_id: str = "synthetic"
    laws: Mapping[str, NutrientLaw] = field(default_factory=lambda: dict(DEFAULT_LAWS))
    pre_bg: NutrientLaw = NutrientLaw(90.0, 200.0, "uniform")
    outliers: OutlierSpec | None = None
    # exact per-meal-type counts (must sum to n); uniform random draw when absent
    meal_counts: Mapping[str, int] | None = None
    # "constant", or "heteroscedastic": sd grows linearly with carbs, averaging noise_sd
    noise_law: str = "constant"
    missing_rate: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.noise_sd >= 0:
            raise ValueError("noise_sd must be >= 0")
        if self.response not in RESPONSES:
            raise ValueError(f"unknown response {self.response!r}; choose from {sorted(RESPONSES)}")
        if self.noise_law not in ("constant", "heteroscedastic"):
            raise ValueError(f"unknown noise law {self.noise_law!r}")
        if set(self.laws) != set(NUTRIENTS):
            raise ValueError(f"need a law for each of {NUTRIENTS}")
        if self.meal_counts is not None:
            if set(self.meal_counts) - set(MEAL_TYPES) or sum(self.meal_counts.values()) != self.n:
                raise ValueError("meal_counts must use known meal types and sum to n")
        if self.outliers is not None:
            if self.outliers.covariate not in NUTRIENTS:
                raise ValueError("outliers must target a nutrient")
            if not 0 <= self.outliers.count <= self.n:
                raise ValueError("outlier count must be within [0, n]")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must be in [0, 1)")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SynthConfig":
        raw = dict(raw)
        laws = dict(DEFAULT_LAWS)
        for name, law in (raw.pop("laws", None) or {}).items():
            laws[name] = NutrientLaw(**law)
        if "pre_bg" in raw:
            raw["pre_bg"] = NutrientLaw(**raw["pre_bg"])
        if raw.get("outliers") is not None:
            raw["outliers"] = OutlierSpec(**raw["outliers"])
        return cls(laws=laws, **raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["laws"] = {k: asdict(v) for k, v in self.laws.items()}
        return d


def quantize(v):
    return np.round(np.asarray(v, dtype=float) / QUANTUM) * QUANTUM


def true_response(config: SynthConfig, carbs, fat, protein, fiber, pre_bg) -> np.ndarray:
    """Noiseless BG impact (quantized) under the config's response law."""
    f = RESPONSES[config.response]
    return quantize(f(*(np.asarray(v, dtype=float) for v in (carbs, fat, protein, fiber, pre_bg))))


def generate_synthetic_with_truth(
    config: SynthConfig, seed: int | Sequence[int]
) -> tuple[list[MealRecord], np.ndarray]:
    """Synthetic records and the noiseless impact of each one."""
    rng = np.random.default_rng(seed)
    n = config.n
    cols = {name: config.laws[name].draw(rng, n) for name in NUTRIENTS}
    pre = np.round(config.pre_bg.draw(rng, n))
    pre = np.maximum(pre, 1.0)

    if config.meal_counts is not None:
        meals = np.array([t for t in MEAL_TYPES for _ in range(config.meal_counts.get(t, 0))], dtype=object)
        meals = meals[rng.permutation(n)]
    else:
        meals = np.array(MEAL_TYPES, dtype=object)[rng.integers(0, len(MEAL_TYPES), size=n)]

    if config.outliers is not None and config.outliers.count:
        o = config.outliers
        bulk = cols[o.covariate]
        # keep bulk draws off the outlier value so the count is exact
        bulk[bulk == o.value] = np.nextafter(o.value, -np.inf)
        rows = rng.choice(n, size=o.count, replace=False)
        bulk[rows] = o.value

    truth = true_response(config, cols["carbs"], cols["fat"], cols["protein"], cols["fiber"], pre)
    if config.noise_law == "heteroscedastic":
        law = config.laws["carbs"]
        sd = config.noise_sd * 2.0 * (cols["carbs"] - law.low) / (law.high - law.low)
    else:
        sd = np.full(n, config.noise_sd)
    impact = quantize(truth + sd * rng.standard_normal(n))
    # keep post-meal BG physiological; only reachable with extreme noise draws
    impact = np.maximum(impact, quantize(40.0 - pre))
    post = pre + impact

    missing = {name: rng.uniform(size=n) < config.missing_rate for name in NUTRIENTS}
    records = []
    for i in range(n):
        nutrients = {
            name: (None if missing[name][i] else float(cols[name][i])) for name in NUTRIENTS
        }
        records.append(
            MealRecord(
                user_id=config.user_id,
                meal_type=str(meals[i]),
                pre_bg=float(pre[i]),
                post_bg=float(post[i]),
                **nutrients,
            )
        )
    return records, truth


def generate_synthetic(config: SynthConfig, seed: int | Sequence[int]) -> list[MealRecord]:
    return generate_synthetic_with_truth(config, seed)[0]


def load_synth_spec(path: str | Path) -> list[SynthConfig]:
    """Read a JSON synth spec: ``{"users": [SynthConfig fields, ...]}``."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    users = raw["users"] if isinstance(raw, dict) else raw
    configs = [SynthConfig.from_dict(u) for u in users]
    ids = [c.user_id for c in configs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate user ids in synth spec: {ids}")
    return configs


def generate_population(configs: Sequence[SynthConfig], seed: int) -> list[MealRecord]:
    """Records for several users; user ``i`` draws from the stream ``[seed, i]``."""
    records = []
    for i, cfg in enumerate(configs):
        records.extend(generate_synthetic(cfg, [seed, i]))
    return records
