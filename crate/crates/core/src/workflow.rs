//! Per-site prediction pipelines shared by the sweep harness and the CLI.

use std::time::Instant;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{build_correlation_matrix_for, CovarianceModel};
use crate::error::{Error, Result};
use crate::ess::{select_eta, EtaSelection, SearchConfig};
use crate::geometry::{LocationSet, NeighborIndex, NeighborOrdering, Point};
use crate::kriging::{local_kriging, ordinary_kriging, KrigingResult, KrigingSystem};
use crate::penalized::{
    adaptive_weights, reduce, PenalizedSolver, PenaltyMode, ReducedProblem, SolverConfig,
};
use crate::variogram::{empirical_variogram, wls_fit, EmpiricalVariogram, FitOptions, VariogramFit, VariogramTemplate};

/// Candidate-count threshold above which the K-NN screen is applied by default.
pub const KNN_AUTO_LIMIT: usize = 2000;
pub const DEFAULT_KNN: usize = 300;

/// One prediction site: candidates ordered by distance and the assembled
/// ordinary-kriging system over them.
pub struct SiteProblem<'a> {
    pub locs: &'a LocationSet,
    pub model: CovarianceModel,
    /// Candidate indices into `locs`, nearest first.
    pub ordered: Vec<usize>,
    pub distances: Vec<f64>,
    pub system: KrigingSystem,
    pub target: Point,
}

impl<'a> SiteProblem<'a> {
    pub fn new(
        locs: &'a LocationSet,
        candidates: &[usize],
        z: &[f64],
        model: &CovarianceModel,
        s0: Point,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Argument("no candidate neighbors".into()));
        }
        let d = locs.distances_to(s0)?;
        let mut ordered = candidates.to_vec();
        ordered.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        let distances = ordered.iter().map(|&i| d[i]).collect();
        let system = KrigingSystem::assemble(locs, &ordered, z, model, s0)?;
        Ok(Self {
            locs,
            model: model.clone(),
            ordered,
            distances,
            system,
            target: s0,
        })
    }

    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    pub fn global(&self) -> Result<KrigingResult> {
        ordinary_kriging(&self.system)
    }

    pub fn reduced(&self) -> Result<ReducedProblem> {
        reduce(&self.system)
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        build_correlation_matrix_for(self.locs, &self.ordered, &self.model)
    }

    /// Ordering of the system rows (already sorted, so the identity).
    pub fn ordering(&self) -> NeighborOrdering {
        NeighborOrdering {
            target: self.target,
            permutation: (0..self.len()).collect(),
            distances: self.distances.clone(),
        }
    }

    pub fn local(&self, k: usize) -> Result<KrigingResult> {
        local_kriging(&self.system, &self.ordering(), k)
    }
}

/// All-ones weights for the LASSO, 1/|λ̃ᵢ| from the kriging weights otherwise.
pub fn penalty_weights(mode: PenaltyMode, stage1: &DVector<f64>, p: usize, dim: usize) -> Vec<f64> {
    match mode {
        PenaltyMode::Lasso => vec![1.0; dim],
        PenaltyMode::Adaptive => adaptive_weights(stage1, p),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gk,
    Lk,
    PkLasso,
    PkAdaptive,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gk" => Ok(Self::Gk),
            "lk" => Ok(Self::Lk),
            "pk-lasso" => Ok(Self::PkLasso),
            "pk-adaptive" => Ok(Self::PkAdaptive),
            other => Err(Error::Argument(format!(
                "unknown method `{other}` (expected gk, lk, pk-lasso or pk-adaptive)"
            ))),
        }
    }
}

/// Neighborhood size for local kriging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalK {
    Fixed(usize),
    /// Same count as the adaptive penalized solution at that site.
    MatchPk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub method: Method,
    pub local_k: LocalK,
    /// Candidate screen; `None` applies the default rule.
    pub knn: Option<usize>,
    pub search: SearchConfig,
    pub solver: SolverConfig,
    /// Solve at this η instead of selecting one.
    pub forced_eta: Option<f64>,
    pub timings: bool,
    pub include_nugget: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            method: Method::PkAdaptive,
            local_k: LocalK::MatchPk,
            knn: None,
            search: SearchConfig::default(),
            solver: SolverConfig::default(),
            forced_eta: None,
            timings: false,
            include_nugget: true,
        }
    }
}

impl PredictOptions {
    pub fn candidate_cap(&self, n: usize) -> Option<usize> {
        match self.knn {
            Some(k) => Some(k.min(n)),
            None if n > KNN_AUTO_LIMIT => Some(DEFAULT_KNN),
            None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub x: f64,
    pub y: f64,
    pub prediction: f64,
    pub variance: f64,
    pub nnz: usize,
    pub eta_star: Option<f64>,
    pub seconds: Option<f64>,
    pub error: Option<String>,
}

struct SiteOutcome {
    prediction: f64,
    variance: f64,
    nnz: usize,
    eta: Option<f64>,
}

/// Penalized solve with η selected (or forced) at one site.
pub fn penalized_at_site(
    sp: &SiteProblem<'_>,
    mode: PenaltyMode,
    search: &SearchConfig,
    solver: &SolverConfig,
    forced_eta: Option<f64>,
) -> Result<(EtaSelection, ReducedProblem)> {
    let gk = sp.global()?;
    let rp = sp.reduced()?;
    let weights = penalty_weights(mode, &gk.weights, rp.p, rp.dim());
    if let Some(eta) = forced_eta {
        let mut s = PenalizedSolver::new(&rp, &weights, *solver)?;
        let mut init = rp.unpenalized()?;
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() {
                init[i] = 0.0;
            }
        }
        let solution = s.solve(eta, &init)?;
        let sel = EtaSelection {
            eta_star: eta,
            trace: crate::ess::EtaTrace {
                records: vec![],
                var_low: solution.variance,
                var_high: rp.constant,
                n_base: rp.n,
                n_ess_all: f64::NAN,
                eta_min: eta,
                eta_max: rp.eta_max(&weights),
            },
            solution,
            evaluations: 1,
            degenerate: false,
        };
        return Ok((sel, rp));
    }
    match select_eta(&rp, &sp.correlation(), &weights, search, solver) {
        Ok(sel) => Ok((sel, rp)),
        Err(Error::DegenerateRedundancy) => {
            warn!("site {:?}: candidates carry no redundancy; using eta = 0", sp.target);
            penalized_at_site(sp, mode, search, solver, Some(0.0))
        }
        Err(Error::DegenerateVariance { .. }) => {
            let eta = rp.eta_max(&weights);
            warn!("site {:?}: reference variances coincide; using eta_max", sp.target);
            penalized_at_site(sp, mode, search, solver, Some(eta))
        }
        Err(e) => Err(e),
    }
}

fn predict_site(
    locs: &LocationSet,
    index: &NeighborIndex<'_>,
    z: &[f64],
    model: &CovarianceModel,
    s0: Point,
    opts: &PredictOptions,
) -> Result<SiteOutcome> {
    let n = locs.len();
    let candidates = match opts.candidate_cap(n) {
        Some(k) => index.knn(s0, k)?.permutation,
        None => (0..n).collect(),
    };
    let mut sp = SiteProblem::new(locs, &candidates, z, model, s0)?;
    if !opts.include_nugget {
        sp.system = sp.system.clone().without_nugget_variance(model.nugget);
    }
    if let Some(i) = sp.system.exact {
        return Ok(SiteOutcome {
            prediction: sp.system.z[i],
            variance: 0.0,
            nnz: 1,
            eta: None,
        });
    }
    let pk = |mode| -> Result<SiteOutcome> {
        let (sel, rp) = penalized_at_site(&sp, mode, &opts.search, &opts.solver, opts.forced_eta)?;
        Ok(SiteOutcome {
            prediction: rp.predict(&sel.solution.weights),
            variance: sel.solution.variance,
            nnz: sel.solution.nnz(),
            eta: Some(sel.eta_star),
        })
    };
    match opts.method {
        Method::Gk => {
            let r = sp.global()?;
            Ok(SiteOutcome {
                prediction: r.prediction,
                variance: r.variance,
                nnz: r.weights.iter().filter(|w| **w != 0.0).count(),
                eta: None,
            })
        }
        Method::Lk => {
            let (k, eta) = match opts.local_k {
                LocalK::Fixed(k) => (k.min(sp.len()), None),
                LocalK::MatchPk => {
                    let o = pk(PenaltyMode::Adaptive)?;
                    (o.nnz, o.eta)
                }
            };
            let r = sp.local(k)?;
            Ok(SiteOutcome {
                prediction: r.prediction,
                variance: r.variance,
                nnz: k,
                eta,
            })
        }
        Method::PkLasso => pk(PenaltyMode::Lasso),
        Method::PkAdaptive => pk(PenaltyMode::Adaptive),
    }
}

/// Predicts at every grid point; rows follow grid order and per-site
/// failures are reported in the row's `error` field.
pub fn predict(
    locs: &LocationSet,
    z: &[f64],
    model: &CovarianceModel,
    grid: &[Point],
    opts: &PredictOptions,
) -> Result<Vec<PredictionRow>> {
    if z.len() != locs.len() {
        return Err(Error::Argument(format!("{} values for {} locations", z.len(), locs.len())));
    }
    if locs.is_empty() {
        return Err(Error::Empty("no observations".into()));
    }
    model.validate()?;
    let index = NeighborIndex::new(locs);
    Ok(grid
        .par_iter()
        .map(|&s0| {
            let start = Instant::now();
            let out = predict_site(locs, &index, z, model, s0, opts);
            let seconds = opts.timings.then(|| start.elapsed().as_secs_f64());
            match out {
                Ok(o) => PredictionRow {
                    x: s0[0],
                    y: s0[1],
                    prediction: o.prediction,
                    variance: o.variance,
                    nnz: o.nnz,
                    eta_star: o.eta,
                    seconds,
                    error: None,
                },
                Err(e) => PredictionRow {
                    x: s0[0],
                    y: s0[1],
                    prediction: f64::NAN,
                    variance: f64::NAN,
                    nnz: 0,
                    eta_star: None,
                    seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

/// Empirical variogram followed by the weighted-least-squares fit.
pub fn fit_variogram(
    locs: &LocationSet,
    z: &[f64],
    template: &VariogramTemplate,
    n_bins: usize,
    max_lag: Option<f64>,
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<(EmpiricalVariogram, VariogramFit)> {
    if locs.is_empty() {
        return Err(Error::Empty("dataset has no rows".into()));
    }
    let emp = empirical_variogram(locs, z, n_bins, max_lag)?;
    let fit = wls_fit(&emp, template, init, opts)?;
    Ok((emp, fit))
}
