"""Post-selection bias correction via constructed instruments.

A library and CLI for linear regression after variable selection: an
L1-constrained selector picks a working support, an instrument column is
constructed from the removed predictors, and the kept coefficients are
refit in a partially linear model with kernel residualization. Includes
predictors, confidence intervals, and a seeded Monte Carlo harness.
"""

from .data import (
    CoefficientVector,
    Dataset,
    IndexSet,
    Partition,
    load_csv,
    partition,
    standardize,
)
from .estimator import QuasiIVRegressor, build_instrument, run_selection
from .instrument import (
    InstrumentPlan,
    WhitenPlan,
    build_instrument_m1,
    build_instrument_m2,
    rank_u_columns,
    select_d,
    spectral_factor,
    ustat_cross_gram,
    whiten,
)
from .plm import (
    PLMFit,
    confidence_intervals,
    fit_plm,
    fit_plm_weighted,
    gcv_bandwidth,
    nw_smooth,
    nw_weights,
)
from .predict import (
    PredictionBundle,
    predict_adjusted,
    predict_ls,
    predict_working,
    prediction_error,
)
from .selector import (
    SelectionResult,
    SelectorConfig,
    dantzig_select,
    default_lambda,
    sis_screen,
    theoretical_lambda,
    threshold_select,
)

__version__ = "0.1.0"

__all__ = [
    "CoefficientVector",
    "Dataset",
    "IndexSet",
    "InstrumentPlan",
    "PLMFit",
    "Partition",
    "PredictionBundle",
    "QuasiIVRegressor",
    "SelectionResult",
    "SelectorConfig",
    "WhitenPlan",
    "build_instrument",
    "build_instrument_m1",
    "build_instrument_m2",
    "confidence_intervals",
    "dantzig_select",
    "default_lambda",
    "fit_plm",
    "fit_plm_weighted",
    "gcv_bandwidth",
    "load_csv",
    "nw_smooth",
    "nw_weights",
    "partition",
    "predict_adjusted",
    "predict_ls",
    "predict_working",
    "prediction_error",
    "rank_u_columns",
    "run_selection",
    "select_d",
    "sis_screen",
    "spectral_factor",
    "standardize",
    "theoretical_lambda",
    "threshold_select",
    "ustat_cross_gram",
    "whiten",
    "__version__",
]
