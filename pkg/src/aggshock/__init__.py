"""Causal effects of aggregate shocks in panels, via data-driven unit
weights, a ratio estimator on post-period aggregates, and
weak-identification-robust inference."""

from .aggregate import EstimateResult, StageFit, aggregate_series, estimate, estimate_stage
from .errors import (
    AggshockError,
    CollinearInstrument,
    CollinearInstrumentPre,
    DataError,
    DegenerateInstrument,
    DegenerateScale,
    DegenerateSeries,
    DuplicateCell,
    InconsistentAggregate,
    InfeasibleConstraints,
    MaxIterations,
    MonteCarloUnstable,
    NonFiniteValue,
    NumericalError,
    RankDeficientPsi,
    RankTooLarge,
    SingularKKT,
    UnbalancedPanel,
)
from .exposures import ExposureFit, construct_exposures, mean_exposures
from .inference import (
    ConfidenceSet,
    GridSpec,
    InferenceReport,
    TestResult,
    VarianceEstimate,
    ar_test,
    confidence_set,
    estimate_variance,
    run_inference,
)
from .panel import (
    AggregateData,
    BalancedPanel,
    ExposureVector,
    SampleSplit,
    default_t0,
    demean_two_way,
    load_panel,
    metadata,
    read_panel_csv,
    scaling_factors,
    write_panel_csv,
)
from .sim import (
    DgpSpec,
    McReport,
    apply_design,
    calibrate_from_panel,
    design_flags,
    rejection_rates,
    run_monte_carlo,
    simulate_once,
    synthetic_spec,
)
from .tsls import TslsResult, tsls_estimate, tsls_fixed_effects, tsls_timeseries, tsls_weights
from .tsmodel import (
    LambdaModel,
    PsiSpec,
    build_lambda_post,
    build_psi,
    fit_ar1,
    fit_lambda_model,
    z_residuals,
)
from .weights import (
    BalanceReport,
    WeightConfig,
    WeightSolution,
    balance_diagnostics,
    default_zeta,
    solve_weights,
    solve_weights_constrained,
)

__version__ = "0.1.0"
