//! Penalized kriging with automatic neighbor selection.
//!
//! The crate implements simple, ordinary, universal and local kriging, a
//! LASSO / adaptive-LASSO penalized kriging solver (constraint elimination
//! plus proximal gradient with soft-thresholding), selection of the penalty
//! level through an effective-sample-size criterion, weighted-least-squares
//! variogram fitting, Gaussian random field simulation and the experiment
//! and prediction workflows built on top of them.

pub mod covariance;
pub mod error;
pub mod ess;
pub mod geometry;
pub mod io;
pub mod kriging;
pub mod penalized;
pub mod simulation;
pub mod variogram;
pub mod workflow;

mod bessel;
mod neldermead;

pub use covariance::{
    build_c0, build_correlation_matrix, build_sigma, correlation, scale_from_practical_range,
    Component, CorrelationFamily, CorrelationKind, CovarianceModel, PracticalRange,
};
pub use error::{Error, Result};
pub use ess::{
    ess, ess_of_locations, harmonic_score, select_eta, EssReport, EtaRecord, EtaSelection, EtaTrace, SearchConfig,
};
pub use geometry::{
    convex_hull_filter, distance, knn_candidates, order_by_distance, LocationSet, Metric,
    NeighborIndex, NeighborOrdering, Point,
};
pub use kriging::{
    local_kriging, mse_of_weights, ordinary_kriging, simple_kriging, universal_kriging,
    KrigingResult, KrigingSystem,
};
pub use penalized::{
    adaptive_weights, reduce, reduced_gradient, soft_threshold, solution_path, solve,
    PenalizedSolution, PenaltyMode, PenaltySpec, ReducedProblem, SolverConfig, StepRule,
};
pub use simulation::{pick_sites, run_sweep, simulate_grf, ExperimentConfig, SiteLabel, SweepRecord};
pub use variogram::{empirical_variogram, model_variogram, wls_fit, EmpiricalVariogram, VariogramFit};
