//! Empirical (Matheron) variograms and weighted-least-squares model fitting.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{Component, CorrelationFamily, CorrelationKind, CovarianceModel};
use crate::error::{Error, Result};
use crate::geometry::LocationSet;
use crate::neldermead::{self, Options};

pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalVariogram {
    /// Mean pair distance in each retained bin.
    pub bin_centers: Vec<f64>,
    pub gamma: Vec<f64>,
    pub counts: Vec<u64>,
    pub max_lag: f64,
    pub n_bins: usize,
}

impl EmpiricalVariogram {
    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "gamma_hat", "n_pairs"])?;
        for j in 0..self.len() {
            w.write_record(&[
                format!("{}", self.bin_centers[j]),
                format!("{}", self.gamma[j]),
                self.counts[j].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const BLOCK: usize = 64;

#[derive(Clone)]
struct Acc {
    dist: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<u64>,
}

impl Acc {
    fn new(n: usize) -> Self {
        Self {
            dist: vec![0.0; n],
            sq: vec![0.0; n],
            count: vec![0; n],
        }
    }

    fn merge(mut self, other: Acc) -> Acc {
        for j in 0..self.count.len() {
            self.dist[j] += other.dist[j];
            self.sq[j] += other.sq[j];
            self.count[j] += other.count[j];
        }
        self
    }
}

/// Largest pairwise distance.
pub fn max_pair_distance(locs: &LocationSet) -> f64 {
    let n = locs.len();
    (0..n)
        .into_par_iter()
        .map(|i| (i + 1..n).map(|j| locs.dist(i, j)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max)
}

/// Matheron estimator on `n_bins` equal-width bins over (0, max_lag].
/// `max_lag` defaults to half the largest pairwise distance.
pub fn empirical_variogram(
    locs: &LocationSet,
    z: &[f64],
    n_bins: usize,
    max_lag: Option<f64>,
) -> Result<EmpiricalVariogram> {
    let n = locs.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least two locations, got {n}")));
    }
    if z.len() != n {
        return Err(Error::Argument(format!("{} values for {n} locations", z.len())));
    }
    if n_bins == 0 {
        return Err(Error::Argument("number of bins must be positive".into()));
    }
    let max_lag = match max_lag {
        Some(m) => m,
        None => 0.5 * max_pair_distance(locs),
    };
    if !(max_lag > 0.0 && max_lag.is_finite()) {
        return Err(Error::Argument(format!("maximum lag must be positive, got {max_lag}")));
    }
    let width = max_lag / n_bins as f64;
    let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let partial: Vec<Acc> = blocks
        .par_iter()
        .map(|&start| {
            let mut acc = Acc::new(n_bins);
            for i in start..(start + BLOCK).min(n) {
                for j in i + 1..n {
                    let h = locs.dist(i, j);
                    if h > max_lag || h == 0.0 {
                        continue;
                    }
                    let b = ((h / width).ceil() as usize).clamp(1, n_bins) - 1;
                    let d = z[i] - z[j];
                    acc.dist[b] += h;
                    acc.sq[b] += d * d;
                    acc.count[b] += 1;
                }
            }
            acc
        })
        .collect();
    let acc = partial.into_iter().fold(Acc::new(n_bins), Acc::merge);
    let mut out = EmpiricalVariogram {
        bin_centers: vec![],
        gamma: vec![],
        counts: vec![],
        max_lag,
        n_bins,
    };
    for j in 0..n_bins {
        let c = acc.count[j];
        if c > 0 {
            out.bin_centers.push(acc.dist[j] / c as f64);
            out.gamma.push(acc.sq[j] / (2.0 * c as f64));
            out.counts.push(c);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyVariogram(max_lag));
    }
    Ok(out)
}

/// γ(h) = τ² + Σ σ²ᵢ(1 − ρᵢ(h)) for h > 0, and 0 at h = 0.
pub fn model_variogram(model: &CovarianceModel, h: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    model.nugget
        + model
            .components
            .iter()
            .map(|c| c.sill * (1.0 - c.family.eval(h)))
            .sum::<f64>()
}

/// Structure of the model to fit: one entry per nested component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramTemplate {
    pub components: Vec<TemplateComponent>,
    #[serde(default = "yes")]
    pub nugget: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateComponent {
    pub kind: CorrelationKind,
    #[serde(default)]
    pub nu: Option<f64>,
}

impl VariogramTemplate {
    pub fn single(kind: CorrelationKind) -> Self {
        Self {
            components: vec![TemplateComponent { kind, nu: None }],
            nugget: true,
        }
    }

    pub fn nested(kinds: &[CorrelationKind]) -> Self {
        Self {
            components: kinds.iter().map(|&kind| TemplateComponent { kind, nu: None }).collect(),
            nugget: true,
        }
    }

    /// Parameter count: (sill, scale) per component plus the nugget.
    pub fn n_params(&self) -> usize {
        2 * self.components.len() + usize::from(self.nugget)
    }

    /// Builds a model from positive parameters `[σ²₁, φ₁, σ²₂, φ₂, …, τ²]`.
    pub fn model(&self, params: &[f64]) -> CovarianceModel {
        let components = self
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let nu = match c.kind {
                    CorrelationKind::Matern => c.nu.unwrap_or(1.5),
                    CorrelationKind::Exponential => 0.5,
                    CorrelationKind::Spherical => 0.0,
                };
                Component {
                    sill: params[2 * i],
                    family: CorrelationFamily {
                        kind: c.kind,
                        scale: params[2 * i + 1],
                        nu,
                    },
                }
            })
            .collect();
        let nugget = if self.nugget { params[2 * self.components.len()] } else { 0.0 };
        CovarianceModel {
            components,
            nugget,
            pr_threshold: crate::covariance::DEFAULT_PR_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub starts: usize,
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            restarts: 2,
            seed: 0,
            max_iter: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariogramFit {
    pub model: CovarianceModel,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final objective of every start, in start order.
    pub start_objectives: Vec<f64>,
    /// Objective at the first start's initial parameters.
    pub init_objective: f64,
}

/// Σⱼ nⱼ (γ̂(hⱼ) − γ(hⱼ; θ))².
pub fn wls_objective(emp: &EmpiricalVariogram, model: &CovarianceModel) -> f64 {
    (0..emp.len())
        .map(|j| {
            let r = emp.gamma[j] - model_variogram(model, emp.bin_centers[j]);
            emp.counts[j] as f64 * r * r
        })
        .sum()
}

fn default_init(emp: &EmpiricalVariogram, template: &VariogramTemplate) -> Vec<f64> {
    let gmax = emp.gamma.iter().copied().fold(0.0, f64::max).max(1e-12);
    let k = template.components.len().max(1) as f64;
    let mut p = Vec::with_capacity(template.n_params());
    for i in 0..template.components.len() {
        p.push(0.8 * gmax / k);
        p.push(emp.max_lag * (i as f64 + 1.0) / (2.0 * k));
    }
    if template.nugget {
        p.push(0.2 * gmax);
    }
    p
}

/// Weighted-least-squares fit (weights nⱼ) by multi-start Nelder–Mead on
/// log-parameters. Start 0 uses `init` (or a heuristic), the rest are drawn
/// log-uniformly from a box scaled by the data.
pub fn wls_fit(
    emp: &EmpiricalVariogram,
    template: &VariogramTemplate,
    init: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<VariogramFit> {
    let np = template.n_params();
    if template.components.is_empty() {
        return Err(Error::Argument("template has no components".into()));
    }
    if emp.len() < np {
        return Err(Error::Argument(format!("{} bins for {np} free parameters", emp.len())));
    }
    let init: Vec<f64> = match init {
        Some(v) if v.len() == np && v.iter().all(|x| *x > 0.0) => v.to_vec(),
        Some(v) => {
            return Err(Error::Argument(format!(
                "initial parameters must be {np} positive values, got {v:?}"
            )))
        }
        None => default_init(emp, template),
    };
    let gmax = emp.gamma.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut starts = vec![init.clone()];
    for s in 1..opts.starts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
        let mut draw = |lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
        let mut p = Vec::with_capacity(np);
        for _ in 0..template.components.len() {
            p.push(draw(1e-2 * gmax, 2.0 * gmax));
            p.push(draw(1e-2 * emp.max_lag, 2.0 * emp.max_lag));
        }
        if template.nugget {
            p.push(draw(1e-4 * gmax, gmax));
        }
        starts.push(p);
    }
    let objective = |theta: &[f64]| -> f64 {
        let params: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        wls_objective(emp, &template.model(&params))
    };
    let nm = Options {
        max_iter: opts.max_iter,
        ..Options::default()
    };
    let results: Vec<(Vec<f64>, f64, usize, bool)> = starts
        .par_iter()
        .map(|p| {
            let mut x: Vec<f64> = p.iter().map(|v| v.ln()).collect();
            let mut iters = 0;
            let mut best = neldermead::minimize(objective, &x, nm);
            iters += best.iterations;
            for _ in 0..opts.restarts {
                x = best.x.clone();
                let again = neldermead::minimize(objective, &x, nm);
                iters += again.iterations;
                if again.value <= best.value {
                    best = neldermead::Minimum { iterations: iters, ..again };
                }
            }
            (best.x, best.value, iters, best.converged)
        })
        .collect();
    let start_objectives: Vec<f64> = results.iter().map(|r| r.1).collect();
    let ib = (0..results.len())
        .min_by(|&a, &b| results[a].1.total_cmp(&results[b].1).then(a.cmp(&b)))
        .expect("at least one start");
    let (theta, value, _, _) = &results[ib];
    let params: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let fit = VariogramFit {
        model: template.model(&params),
        objective: *value,
        converged: results.iter().any(|r| r.3),
        iterations: results.iter().map(|r| r.2).sum(),
        start_objectives,
        init_objective: wls_objective(emp, &template.model(&init)),
    };
    if !fit.converged {
        return Err(Error::FitFailed(Box::new(fit)));
    }
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::correlation;
    use crate::geometry::Metric;
    use crate::simulation::simulate_grf;

    fn random_locs(n: usize, seed: u64) -> LocationSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LocationSet::new((0..n).map(|_| [rng.random(), rng.random()]).collect(), Metric::Euclidean).unwrap()
    }

    #[test]
    fn constant_field_is_flat() {
        let locs = random_locs(50, 1);
        let emp = empirical_variogram(&locs, &[3.5; 50], 10, None).unwrap();
        assert!(emp.gamma.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_point_variogram() {
        let locs = LocationSet::new(vec![[0.0, 0.0], [1.0, 0.0]], Metric::Euclidean).unwrap();
        let emp = empirical_variogram(&locs, &[1.0, 3.0], 4, Some(2.0)).unwrap();
        assert_eq!(emp.gamma, vec![2.0]);
        assert_eq!(emp.counts, vec![1]);
        assert_eq!(emp.bin_centers, vec![1.0]);
        assert!(matches!(
            empirical_variogram(&locs, &[1.0, 3.0], 4, Some(0.5)),
            Err(Error::EmptyVariogram(_))
        ));
    }

    #[test]
    fn binned_estimate_matches_pair_enumeration() {
        let locs = random_locs(300, 2);
        let model = CovarianceModel::single(1.0, CorrelationFamily::exponential(0.2));
        let z = simulate_grf(&locs, &model, 0.0, 5).unwrap();
        let emp = empirical_variogram(&locs, &z, 12, Some(0.6)).unwrap();
        let width = 0.05;
        let mut sums = vec![(0.0, 0.0, 0u64); 12];
        for i in 0..300 {
            for j in 0..300 {
                if i < j {
                    let h = locs.dist(i, j);
                    if h <= 0.6 {
                        let b = ((h / width).ceil() as usize).clamp(1, 12) - 1;
                        sums[b].0 += h;
                        sums[b].1 += (z[i] - z[j]).powi(2);
                        sums[b].2 += 1;
                    }
                }
            }
        }
        let kept: Vec<_> = sums.iter().filter(|s| s.2 > 0).collect();
        assert_eq!(kept.len(), emp.len());
        for (j, s) in kept.iter().enumerate() {
            assert_eq!(emp.counts[j], s.2);
            assert!((emp.gamma[j] - s.1 / (2.0 * s.2 as f64)).abs() < 1e-12);
            assert!((emp.bin_centers[j] - s.0 / s.2 as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let locs = random_locs(80, 3);
        let z: Vec<f64> = (0..80).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = z.iter().map(|v| v + 100.0).collect();
        let a = empirical_variogram(&locs, &z, 8, None).unwrap();
        let b = empirical_variogram(&locs, &shifted, 8, None).unwrap();
        for (x, y) in a.gamma.iter().zip(&b.gamma) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn model_variogram_identities() {
        let m = CovarianceModel::new(
            vec![
                Component { sill: 50.0, family: CorrelationFamily::spherical(0.15) },
                Component { sill: 50.0, family: CorrelationFamily::spherical(0.65) },
            ],
            20.0,
        )
        .unwrap();
        assert_eq!(model_variogram(&m, 0.0), 0.0);
        assert_eq!(model_variogram(&m, 1e6), 120.0);
        let want = 20.0 + 50.0 + 50.0 * (1.0 - correlation(&CorrelationFamily::spherical(0.65), 0.15).unwrap());
        assert!((model_variogram(&m, 0.15) - want).abs() < 1e-12);
        for h in [0.01, 0.1, 0.3, 0.7, 2.0] {
            assert!((m.total_sill() - m.cov(h) - model_variogram(&m, h)).abs() < 1e-12);
        }
    }

    fn synthetic(model: &CovarianceModel) -> EmpiricalVariogram {
        let h: Vec<f64> = (1..=15).map(|j| 0.04 * j as f64 - 0.02).collect();
        EmpiricalVariogram {
            gamma: h.iter().map(|&x| model_variogram(model, x)).collect(),
            counts: (1..=15).map(|j| 100 + 10 * j as u64).collect(),
            bin_centers: h,
            max_lag: 0.6,
            n_bins: 15,
        }
    }

    #[test]
    fn recovers_exact_exponential() {
        let truth = CovarianceModel::single(1.0, CorrelationFamily::exponential(0.2)).with_nugget(0.1);
        let emp = synthetic(&truth);
        let fit = wls_fit(&emp, &VariogramTemplate::single(CorrelationKind::Exponential), None, &FitOptions::default())
            .unwrap();
        let c = &fit.model.components[0];
        assert!((c.sill - 1.0).abs() < 0.01);
        assert!((c.family.scale - 0.2).abs() < 0.002);
        assert!((fit.model.nugget - 0.1).abs() < 0.001);
        assert!(fit.objective <= fit.init_objective);
        assert!(fit.start_objectives.iter().all(|&o| fit.objective <= o));
    }

    #[test]
    fn flat_variogram_goes_to_nugget() {
        let emp = EmpiricalVariogram {
            bin_centers: (1..=10).map(|j| 0.05 * j as f64).collect(),
            gamma: vec![2.0; 10],
            counts: vec![50; 10],
            max_lag: 0.5,
            n_bins: 10,
        };
        let fit = wls_fit(&emp, &VariogramTemplate::single(CorrelationKind::Spherical), None, &FitOptions::default());
        let model = match fit {
            Ok(f) => f.model,
            Err(Error::FitFailed(f)) => f.model,
            Err(e) => panic!("{e}"),
        };
        // A spherical range below the first lag is indistinguishable from a
        // nugget, so only the fitted curve is checked.
        for h in &emp.bin_centers {
            let g = model_variogram(&model, *h);
            assert!((g - 2.0).abs() < 1e-3, "{h}: {g} {model:?}");
        }
    }

    #[test]
    fn too_few_bins() {
        let truth = CovarianceModel::single(1.0, CorrelationFamily::exponential(0.2));
        let mut emp = synthetic(&truth);
        emp.gamma.truncate(2);
        emp.counts.truncate(2);
        emp.bin_centers.truncate(2);
        let t = VariogramTemplate::single(CorrelationKind::Exponential);
        assert!(matches!(wls_fit(&emp, &t, None, &FitOptions::default()), Err(Error::Argument(_))));
    }
}
