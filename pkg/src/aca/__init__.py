"""Attributable components analysis (ACA) for meal and blood-glucose logs."""

from .analysis import BendReport, MetricsReport, RangeSet, ci_coverage, detect_bend, extract_ranges, rmse_full, rmse_marginal
from .assignment import AssignmentMatrix, assign, categorical_assign, grid_assign, prototypal_assign
from .core import (
    AcaFitConfig,
    AcaModel,
    FitReport,
    MarginalCurve,
    aca_fit,
    aca_marginalize,
    aca_objective,
    aca_predict,
    penalty_matrix,
    solve_block,
)
from .dataset import Dataset, MealRecord, build_dataset, load_meals_csv, read_meals_csv
from .linreg import LinearModel, lm_marginalize, lm_predict, ols_fit
from .synth import SynthConfig, generate_synthetic
from .uncertainty import BootstrapConfig, ConfidenceBand, CurveEnsemble, bootstrap_curves, empirical_band, resample

__version__ = "0.1.0"
