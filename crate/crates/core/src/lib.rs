//! MUTARE: multiple threshold autoregressive panel models.
//!
//! A panel time series model in which lag `j` enters the conditional
//! mean only when all of the last `j` observations exceed a common
//! unknown threshold, with a per-subject random intercept. The crate
//! provides simulation, maximum-likelihood estimation with the
//! threshold profiled over the observed-value grid, double-penalized
//! memory-order selection (adaptive-lasso shrinkage plus an order
//! charge) solved exactly by enumeration or branch-and-bound, tuning by
//! blocked cross-validation or held-out prediction error, and a Monte
//! Carlo harness for the built-in simulation studies.

pub mod error;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod montecarlo;
pub mod numeric;
pub mod penalty;
pub mod selection;
pub mod solver;
pub mod tuning;

mod design;

pub use error::{MutareError, Result};
pub use likelihood::{
    asymptotic_covariance, candidate_thresholds, estimate_variance_components, gls_beta,
    log_likelihood, profile_tau, CovarianceSpec, ProfiledFit,
};
pub use model::{
    build_regressor_row, conditional_mean, simulate_panel, MutareParams, PanelSeries, RegressorRow,
};
pub use penalty::{
    adaptive_weights, double_penalized_objective, order_of, penalty_prop1, penalty_prop2,
    PenaltyConfig,
};
pub use selection::{
    fit_mutare, fit_mutare_with, fit_to_json, ic_tables_with, select_order_ic, FitDiagnostics,
    FitOptions, FitResult, IcCriterion, IcTable,
};
pub use solver::{
    lasso_subproblem, solve_branch_and_bound, solve_branch_and_bound_with,
    solve_order_enumeration, BnbNode, BnbOptions, SolveResult, WhitenedProblem,
};
pub use tuning::{
    hblock_cv_score, test_panel_score, tune, tune_report, write_tuning_report, CvPlan, TuneGrid,
    TuneMethod, TuneReport, TuneRow,
};
