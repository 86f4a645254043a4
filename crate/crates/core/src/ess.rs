//! Effective sample size and the two-stage search for the penalty level η.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceModel;
use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::penalized::{PenalizedSolution, PenalizedSolver, ReducedProblem, SolverConfig};

/// Slack allowed when clamping v_η into [0, 1].
pub const MEASURE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssReport {
    pub k: usize,
    pub n_ess: f64,
    pub redundancy: f64,
}

/// n_ess = k² / Σᵢⱼ Rᵢⱼ over the active indices.
pub fn ess(r: &DMatrix<f64>, active: &[usize]) -> Result<EssReport> {
    let mut total = 0.0;
    for &j in active {
        let col = r.column(j);
        for &i in active {
            total += col[i];
        }
    }
    report(active.len(), total)
}

/// Same as [`ess`] for the correlation matrix of `model` over `idx`, summed
/// pair by pair without forming the matrix.
pub fn ess_of_locations(locs: &LocationSet, idx: &[usize], model: &CovarianceModel) -> Result<EssReport> {
    let c0 = model.total_sill();
    let off: f64 = if c0 == 0.0 {
        0.0
    } else {
        idx.par_iter()
            .enumerate()
            .map(|(a, &i)| idx[..a].iter().map(|&j| model.cov(locs.dist(i, j))).sum::<f64>())
            .sum::<f64>()
            / c0
    };
    report(idx.len(), idx.len() as f64 + 2.0 * off)
}

fn report(k: usize, total: f64) -> Result<EssReport> {
    if k == 0 {
        return Err(Error::Argument("effective sample size of an empty set".into()));
    }
    let kf = k as f64;
    let mut n_ess = kf * kf / total;
    if !(n_ess <= kf) {
        if !(total > 0.0) {
            warn!("nonpositive correlation sum {total:.3e}; effective sample size set to k");
        } else {
            warn!("effective sample size {n_ess:.6} exceeds k = {k}; clamped");
        }
        n_ess = kf;
    }
    Ok(EssReport {
        k,
        n_ess,
        redundancy: kf - n_ess,
    })
}

/// 2sv/(s+v), 0 when both vanish.
pub fn harmonic_score(s: f64, v: f64) -> f64 {
    if s + v == 0.0 {
        0.0
    } else {
        2.0 * s * v / (s + v)
    }
}

/// s_η = (k_η − n_ess(η)) / (N_base − n_ess(all candidates)).
pub fn sparsity_measure(report: &EssReport, n_base: usize, n_ess_all: f64) -> Result<f64> {
    let r0 = n_base as f64 - n_ess_all;
    if !(r0 > 1e-12) {
        return Err(Error::DegenerateRedundancy);
    }
    Ok((report.redundancy / r0).clamp(0.0, 1.0))
}

/// v_η = (σ²_η − σ²_low)/(σ²_high − σ²_low), clamped to [0, 1].
pub fn variance_measure(variance: f64, low: f64, high: f64) -> Result<f64> {
    if !(high > low + 1e-12) {
        return Err(Error::DegenerateVariance { low, high });
    }
    let v = (variance - low) / (high - low);
    if v < -MEASURE_SLACK || v > 1.0 + MEASURE_SLACK {
        warn!("variance measure {v:.3e} outside [0, 1]");
    }
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Stage-1 grid size κ₀.
    pub kappa0: usize,
    /// Stage-2 points per candidate κ₁.
    pub kappa1: usize,
    pub candidates: usize,
    /// η_min = ratio · η_max.
    pub min_ratio: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            kappa0: 150,
            kappa1: 10,
            candidates: 5,
            min_ratio: 1e-9,
        }
    }
}

impl SearchConfig {
    pub fn budget(&self) -> usize {
        self.kappa0 + self.candidates * self.kappa1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaRecord {
    pub eta: f64,
    pub k: usize,
    pub n_ess: f64,
    pub s: f64,
    pub v: f64,
    pub score: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EtaTrace {
    /// Records sorted by η.
    pub records: Vec<EtaRecord>,
    /// σ²_{η_min}, standing in for the global kriging variance.
    pub var_low: f64,
    /// Variance of the p-neighbor endpoint σ²_∞.
    pub var_high: f64,
    pub n_base: usize,
    pub n_ess_all: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl EtaTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["eta", "nnz", "n_ess", "s", "v", "score"])?;
        for r in &self.records {
            w.write_record(&[
                format!("{:e}", r.eta),
                r.k.to_string(),
                format!("{}", r.n_ess),
                format!("{}", r.s),
                format!("{}", r.v),
                format!("{}", r.score),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EtaSelection {
    pub eta_star: f64,
    pub solution: PenalizedSolution,
    pub trace: EtaTrace,
    /// Number of penalized solves performed.
    pub evaluations: usize,
    /// Set when every score is zero and η_min is returned.
    pub degenerate: bool,
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n)
                .map(|i| {
                    if i == 0 {
                        lo
                    } else if i == n - 1 {
                        hi
                    } else {
                        (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

/// Two-stage η search maximizing the harmonic mean of s_η and v_η.
///
/// `r` is the correlation matrix of the N candidates in the same row order
/// as the reduced problem; `weights` are the penalty weights (all ones for
/// the plain LASSO).
pub fn select_eta(
    rp: &ReducedProblem,
    r: &DMatrix<f64>,
    weights: &[f64],
    search: &SearchConfig,
    solver_cfg: &SolverConfig,
) -> Result<EtaSelection> {
    if search.kappa0 < 2 || search.candidates == 0 {
        return Err(Error::Argument("the search needs kappa0 >= 2 and at least one candidate".into()));
    }
    if r.nrows() != rp.n || r.ncols() != rp.n {
        return Err(Error::Argument("correlation matrix does not match the candidate set".into()));
    }
    let n_base = rp.n;
    let all: Vec<usize> = (0..n_base).collect();
    let n_ess_all = ess(r, &all)?.n_ess;
    if !(n_base as f64 - n_ess_all > 1e-12) {
        return Err(Error::DegenerateRedundancy);
    }
    let eta_max = rp.eta_max(weights);
    let var_high = clamp_nonneg(rp.constant);
    let mut solver = PenalizedSolver::new(rp, weights, *solver_cfg)?;
    let mut start = rp.unpenalized()?;
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() {
            start[i] = 0.0;
        }
    }
    if !(eta_max > 0.0) {
        let solution = solver.solve(0.0, &DVector::zeros(rp.dim()))?;
        return Ok(degenerate_selection(solution, n_base, n_ess_all, var_high));
    }
    let eta_min = search.min_ratio * eta_max;

    // Stage 1: ascending warm-started chain.
    let mut evaluated: Vec<(f64, PenalizedSolution)> = Vec::with_capacity(search.budget());
    let mut init = start.clone();
    for eta in log_grid(eta_min, eta_max, search.kappa0) {
        let sol = solver.solve(eta, &init)?;
        init = sol.mu();
        evaluated.push((eta, sol));
    }
    let var_low = evaluated[0].1.variance;
    if !(var_high > var_low + 1e-12) {
        return Err(Error::DegenerateVariance { low: var_low, high: var_high });
    }
    let score_of = |sol: &PenalizedSolution| -> Result<EtaRecord> {
        let rep = ess(r, &sol.active_set)?;
        let s = sparsity_measure(&rep, n_base, n_ess_all)?;
        let v = variance_measure(sol.variance, var_low, var_high)?;
        Ok(EtaRecord {
            eta: sol.eta,
            k: rep.k,
            n_ess: rep.n_ess,
            s,
            v,
            score: harmonic_score(s, v),
            variance: sol.variance,
        })
    };
    let mut records: Vec<EtaRecord> = evaluated
        .iter()
        .map(|(_, s)| score_of(s))
        .collect::<Result<_>>()?;

    // Stage 2: local log grids around the best stage-1 points.
    let mut ranked: Vec<&EtaRecord> = records.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.eta.total_cmp(&b.eta)));
    let mut refine: Vec<f64> = ranked
        .iter()
        .take(search.candidates)
        .flat_map(|c| log_grid(c.eta / 2.0, 2.0 * c.eta, search.kappa1))
        .collect();
    refine.sort_by(f64::total_cmp);
    refine.dedup_by(|a, b| a.to_bits() == b.to_bits());
    refine.retain(|e| !evaluated.iter().any(|(x, _)| x.to_bits() == e.to_bits()));
    for eta in refine {
        let nearest = evaluated
            .iter()
            .filter(|(x, _)| *x < eta)
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, s)| s.mu())
            .unwrap_or_else(|| start.clone());
        let sol = solver.solve(eta, &nearest)?;
        records.push(score_of(&sol)?);
        evaluated.push((eta, sol));
    }
    let evaluations = evaluated.len();

    let best = records
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.score.total_cmp(&b.score).then(b.eta.total_cmp(&a.eta)))
        .map(|(i, _)| i)
        .expect("nonempty trace");
    let degenerate = records[best].score == 0.0;
    let pick = if degenerate { 0 } else { best };
    let eta_star = records[pick].eta;
    let solution = evaluated.swap_remove(pick).1;

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].eta.total_cmp(&records[b].eta));
    let records = order.into_iter().map(|i| records[i]).collect();
    Ok(EtaSelection {
        eta_star,
        solution,
        trace: EtaTrace {
            records,
            var_low,
            var_high,
            n_base,
            n_ess_all,
            eta_min,
            eta_max,
        },
        evaluations,
        degenerate,
    })
}

fn clamp_nonneg(v: f64) -> f64 {
    if v < 0.0 && v > -1e-10 {
        0.0
    } else {
        v
    }
}

fn degenerate_selection(solution: PenalizedSolution, n_base: usize, n_ess_all: f64, var_high: f64) -> EtaSelection {
    EtaSelection {
        eta_star: 0.0,
        trace: EtaTrace {
            records: vec![],
            var_low: solution.variance,
            var_high,
            n_base,
            n_ess_all,
            eta_min: 0.0,
            eta_max: 0.0,
        },
        solution,
        evaluations: 1,
        degenerate: true,
    }
}

/// Equicorrelation matrix with off-diagonal ρ.
pub fn equicorrelation(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { rho })
}
