//! Gaussian random field simulation and the practical-range sweep comparing
//! penalized, local and global kriging.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{build_sigma, scale_from_practical_range, CorrelationFamily, CorrelationKind, CovarianceModel, PracticalRange};
use crate::error::{Error, Result};
use crate::ess::{select_eta, SearchConfig};
use crate::geometry::{LocationSet, Metric, NeighborIndex, Point};
use crate::penalized::{PenaltyMode, SolverConfig};
use crate::workflow::{penalty_weights, SiteProblem};

const JITTER: f64 = 1e-10;
const JITTER_TRIES: usize = 3;

/// Lower-triangular factor L with LLᵀ = Σ, reused across draws.
#[derive(Debug, Clone)]
pub struct GrfSampler {
    factor: Option<DMatrix<f64>>,
    n: usize,
    mean: f64,
}

impl GrfSampler {
    pub fn new(locs: &LocationSet, model: &CovarianceModel, mean: f64) -> Result<Self> {
        let n = locs.len();
        if model.total_sill() == 0.0 {
            return Ok(Self { factor: None, n, mean });
        }
        let sigma = build_sigma(locs, model);
        let mut jitter = 0.0;
        for attempt in 0..=JITTER_TRIES {
            let mut s = sigma.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    s[(i, i)] += jitter;
                }
            }
            if let Some(ch) = s.cholesky() {
                if attempt > 0 {
                    log::warn!("covariance factorized after adding {jitter:.1e} to the diagonal");
                }
                return Ok(Self { factor: Some(ch.unpack()), n, mean });
            }
            jitter += JITTER;
        }
        Err(Error::SingularMatrix(format!(
            "covariance of {n} locations is not positive definite after {JITTER_TRIES} jitter retries"
        )))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match &self.factor {
            None => vec![self.mean; self.n],
            Some(l) => {
                let xi = DVector::from_iterator(self.n, (0..self.n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                (l * xi).iter().map(|v| v + self.mean).collect()
            }
        }
    }
}

/// One realization Z = Lξ + mean, with ξ drawn from ChaCha8 seeded by `seed`.
pub fn simulate_grf(locs: &LocationSet, model: &CovarianceModel, mean: f64, seed: u64) -> Result<Vec<f64>> {
    let sampler = GrfSampler::new(locs, model, mean)?;
    Ok(sampler.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `n` points uniform on the unit square.
pub fn uniform_locations(n: usize, seed: u64) -> Result<LocationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LocationSet::new((0..n).map(|_| [rng.random(), rng.random()]).collect(), Metric::Euclidean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteLabel {
    /// Isolated observation: largest nearest-neighbor distance.
    FN,
    /// Typical observation: nearest-neighbor distance closest to the mean.
    AN,
    /// Dense region: smallest distance to the k-th neighbor.
    DN,
    /// Side of the square, (0, 0.5).
    SN,
    /// Corner of the square, (0, 0).
    CN,
}

impl SiteLabel {
    pub const ALL: [SiteLabel; 5] = [SiteLabel::FN, SiteLabel::AN, SiteLabel::DN, SiteLabel::SN, SiteLabel::CN];
}

impl std::fmt::Display for SiteLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for SiteLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FN" => Ok(Self::FN),
            "AN" => Ok(Self::AN),
            "DN" => Ok(Self::DN),
            "SN" => Ok(Self::SN),
            "CN" => Ok(Self::CN),
            other => Err(Error::Argument(format!("unknown site label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub label: SiteLabel,
    pub point: Point,
    /// Observation index when the site is itself an observation.
    pub index: Option<usize>,
}

/// The five prediction sites. FN/AN/DN are observations; ties go to the
/// lowest index.
pub fn pick_sites(locs: &LocationSet, dn_k: usize) -> Result<Vec<Site>> {
    let n = locs.len();
    if n < 2 {
        return Err(Error::Argument("site selection needs at least two locations".into()));
    }
    let k = dn_k.clamp(1, n - 1);
    let index = NeighborIndex::new(locs);
    let mut nn = Vec::with_capacity(n);
    let mut kth = Vec::with_capacity(n);
    for i in 0..n {
        let ord = index.knn(locs.point(i), k + 1)?;
        // Entry 0 is the point itself (distance 0).
        nn.push(ord.distances[1]);
        kth.push(ord.distances[k]);
    }
    let argbest = |key: &dyn Fn(usize) -> f64| -> usize {
        (0..n).fold(0, |best, i| if key(i) < key(best) { i } else { best })
    };
    let mean_nn = nn.iter().sum::<f64>() / n as f64;
    let fn_i = argbest(&|i| -nn[i]);
    let an_i = argbest(&|i| (nn[i] - mean_nn).abs());
    let dn_i = argbest(&|i| kth[i]);
    Ok(vec![
        Site { label: SiteLabel::FN, point: locs.point(fn_i), index: Some(fn_i) },
        Site { label: SiteLabel::AN, point: locs.point(an_i), index: Some(an_i) },
        Site { label: SiteLabel::DN, point: locs.point(dn_i), index: Some(dn_i) },
        Site { label: SiteLabel::SN, point: [0.0, 0.5], index: None },
        Site { label: SiteLabel::CN, point: [0.0, 0.0], index: None },
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub kind: CorrelationKind,
    #[serde(default)]
    pub nu: Option<f64>,
}

impl FamilySpec {
    pub fn nu(&self) -> f64 {
        match self.kind {
            CorrelationKind::Matern => self.nu.unwrap_or(1.5),
            CorrelationKind::Exponential => 0.5,
            CorrelationKind::Spherical => 0.0,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            CorrelationKind::Matern => format!("matern{}", self.nu()),
            k => k.to_string(),
        }
    }

    /// Unit-sill, nugget-free model with the given practical range.
    pub fn model(&self, pr: f64) -> Result<CovarianceModel> {
        let scale = scale_from_practical_range(self.kind, self.nu(), PracticalRange::new(pr))?;
        Ok(CovarianceModel::single(
            1.0,
            CorrelationFamily { kind: self.kind, scale, nu: self.nu() },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_locations: usize,
    pub families: Vec<FamilySpec>,
    pub pr_grid: Vec<f64>,
    pub seed: u64,
    pub sites: Vec<SiteLabel>,
    pub mode: PenaltyMode,
    pub dn_k: usize,
    pub search: SearchConfig,
    pub solver: SolverConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_locations: 500,
            families: vec![
                FamilySpec { kind: CorrelationKind::Exponential, nu: None },
                FamilySpec { kind: CorrelationKind::Spherical, nu: None },
                FamilySpec { kind: CorrelationKind::Matern, nu: Some(1.5) },
            ],
            pr_grid: vec![0.014, 0.03, 0.053, 0.08, 0.104, 0.117, 0.18, 0.251, 0.3, 0.354],
            seed: 2024,
            sites: SiteLabel::ALL.to_vec(),
            mode: PenaltyMode::Adaptive,
            dn_k: 10,
            search: SearchConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if self.n_locations < 12 {
            return bad("n_locations", format!("need at least 12 locations, got {}", self.n_locations));
        }
        if self.families.is_empty() {
            return bad("families", "at least one family is required".into());
        }
        if self.pr_grid.is_empty() || self.pr_grid.iter().any(|p| !(*p > 0.0)) {
            return bad("pr_grid", "practical ranges must be positive and nonempty".into());
        }
        if self.pr_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("pr_grid", "practical ranges must be strictly ascending".into());
        }
        if self.sites.is_empty() {
            return bad("sites", "at least one site is required".into());
        }
        for f in &self.families {
            if f.kind == CorrelationKind::Matern && !(f.nu() > 0.0) {
                return bad("families.nu", format!("Matérn smoothness must be positive, got {}", f.nu()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRecord {
    pub family: String,
    pub pr: f64,
    pub site: SiteLabel,
    pub nnz: usize,
    pub var_pk: f64,
    pub var_lk: f64,
    pub var_gk: f64,
    /// Variance of the p-neighbor endpoint.
    pub var_endpoint: f64,
    pub eta_star: f64,
}

impl SweepRecord {
    pub fn rel_pk_pct(&self) -> f64 {
        100.0 * (self.var_pk / self.var_gk - 1.0)
    }

    pub fn rel_lk_pct(&self) -> f64 {
        100.0 * (self.var_lk / self.var_gk - 1.0)
    }
}

pub fn write_sweep_csv<W: Write>(out: W, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "family", "pr", "site", "nnz", "var_pk", "var_lk", "var_gk", "eta_star", "rel_pk_pct", "rel_lk_pct",
    ])?;
    for r in records {
        w.write_record(&[
            r.family.clone(),
            format!("{}", r.pr),
            r.site.to_string(),
            r.nnz.to_string(),
            format!("{}", r.var_pk),
            format!("{}", r.var_lk),
            format!("{}", r.var_gk),
            format!("{:e}", r.eta_star),
            format!("{:.6}", r.rel_pk_pct()),
            format!("{:.6}", r.rel_lk_pct()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (family, practical range, site) cell; records come back in
/// configuration order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRecord>> {
    config.validate()?;
    let locs = uniform_locations(config.n_locations, config.seed)?;
    let sites = pick_sites(&locs, config.dn_k)?;
    let chosen: Vec<Site> = config
        .sites
        .iter()
        .map(|l| *sites.iter().find(|s| s.label == *l).expect("every label is picked"))
        .collect();
    let mut cells = Vec::new();
    for fam in &config.families {
        for &pr in &config.pr_grid {
            for site in &chosen {
                cells.push((*fam, pr, *site));
            }
        }
    }
    let z = vec![0.0; locs.len()];
    cells
        .par_iter()
        .map(|(fam, pr, site)| run_cell(&locs, &z, fam, *pr, site, config))
        .collect()
}

fn run_cell(
    locs: &LocationSet,
    z: &[f64],
    fam: &FamilySpec,
    pr: f64,
    site: &Site,
    config: &ExperimentConfig,
) -> Result<SweepRecord> {
    let model = fam.model(pr)?;
    let candidates: Vec<usize> = (0..locs.len()).filter(|&i| Some(i) != site.index).collect();
    let sp = SiteProblem::new(locs, &candidates, z, &model, site.point)?;
    let gk = sp.global()?;
    let rp = sp.reduced()?;
    let weights = penalty_weights(config.mode, &gk.weights, rp.p, rp.dim());
    let sel = select_eta(&rp, &sp.correlation(), &weights, &config.search, &config.solver)?;
    let nnz = sel.solution.nnz();
    let lk = sp.local(nnz)?;
    Ok(SweepRecord {
        family: fam.label(),
        pr,
        site: site.label,
        nnz,
        var_pk: sel.solution.variance,
        var_lk: lk.variance,
        var_gk: gk.variance,
        var_endpoint: rp.constant,
        eta_star: sel.eta_star,
    })
}
