//! Parametric correlation families, practical-range parameterization, nested
//! covariance models with a nugget, and covariance matrix assembly.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bessel::bessel_k;
use crate::error::{Error, Result};
use crate::geometry::{LocationSet, Point};

/// Default correlation level that defines the practical range.
pub const DEFAULT_PR_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    Exponential,
    Spherical,
    Matern,
}

impl std::str::FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exponential" | "exp" => Ok(Self::Exponential),
            "spherical" | "sph" => Ok(Self::Spherical),
            "matern" | "matérn" => Ok(Self::Matern),
            other => Err(Error::Argument(format!("unknown correlation family `{other}`"))),
        }
    }
}

impl std::fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exponential => "exponential",
            Self::Spherical => "spherical",
            Self::Matern => "matern",
        })
    }
}

/// A correlation function ρ(h) with scale φ (and smoothness ν for Matérn).
///
/// Matérn uses ρ(h) = 2^{1-ν}/Γ(ν) · x^ν K_ν(x) with x = √(2ν)·h/φ, so that
/// ν = 1.5 gives (1 + √3 h/φ) exp(-√3 h/φ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationFamily {
    pub kind: CorrelationKind,
    pub scale: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

fn default_nu() -> f64 {
    1.5
}

impl CorrelationFamily {
    pub fn exponential(scale: f64) -> Self {
        Self {
            kind: CorrelationKind::Exponential,
            scale,
            nu: 0.5,
        }
    }

    pub fn spherical(scale: f64) -> Self {
        Self {
            kind: CorrelationKind::Spherical,
            scale,
            nu: 0.0,
        }
    }

    pub fn matern(nu: f64, scale: f64) -> Self {
        Self {
            kind: CorrelationKind::Matern,
            scale,
            nu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Argument(format!("scale must be positive, got {}", self.scale)));
        }
        if self.kind == CorrelationKind::Matern && !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Argument(format!(
                "Matérn smoothness must be positive, got {}",
                self.nu
            )));
        }
        Ok(())
    }

    /// ρ(h) for h >= 0, unchecked.
    #[inline]
    pub fn eval(&self, h: f64) -> f64 {
        if h == 0.0 {
            return 1.0;
        }
        let r = h / self.scale;
        match self.kind {
            CorrelationKind::Exponential => (-r).exp(),
            CorrelationKind::Spherical => {
                if r >= 1.0 {
                    0.0
                } else {
                    1.0 - 1.5 * r + 0.5 * r * r * r
                }
            }
            CorrelationKind::Matern => matern(self.nu, r),
        }
    }
}

fn matern(nu: f64, r: f64) -> f64 {
    if nu == 0.5 {
        return (-r).exp();
    }
    if nu == 1.5 {
        let x = 3f64.sqrt() * r;
        return (1.0 + x) * (-x).exp();
    }
    if nu == 2.5 {
        let x = 5f64.sqrt() * r;
        return (1.0 + x + x * x / 3.0) * (-x).exp();
    }
    matern_general(nu, r)
}

/// Bessel-function form of the Matérn correlation, valid for any ν > 0.
pub(crate) fn matern_general(nu: f64, r: f64) -> f64 {
    let x = (2.0 * nu).sqrt() * r;
    if x < 1e-10 {
        return 1.0;
    }
    let log_pref = (1.0 - nu) * std::f64::consts::LN_2 - statrs::function::gamma::ln_gamma(nu);
    let k = bessel_k(nu, x);
    if k == 0.0 {
        return 0.0;
    }
    (log_pref + nu * x.ln() + k.ln()).exp().min(1.0)
}

/// Checked correlation evaluation.
pub fn correlation(family: &CorrelationFamily, h: f64) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(Error::Argument(format!("lag must be nonnegative, got {h}")));
    }
    family.validate()?;
    Ok(family.eval(h))
}

/// Practical range: the lag at which correlation falls to `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PracticalRange {
    pub range: f64,
    pub threshold: f64,
}

impl PracticalRange {
    pub fn new(range: f64) -> Self {
        Self {
            range,
            threshold: DEFAULT_PR_THRESHOLD,
        }
    }
}

/// Scale φ such that ρ(PR; φ) equals the threshold (default 0.05).
pub fn scale_from_practical_range(kind: CorrelationKind, nu: f64, pr: PracticalRange) -> Result<f64> {
    let PracticalRange { range, threshold } = pr;
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Argument(format!("practical range must be positive, got {range}")));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    if kind == CorrelationKind::Exponential {
        return Ok(-range / threshold.ln());
    }
    // ρ(PR; φ) depends on PR/φ only; solve ρ(1; 1/u) = threshold for u = PR/φ.
    let fam = |u: f64| CorrelationFamily {
        kind,
        scale: 1.0 / u,
        nu,
    };
    fam(1.0).validate()?;
    let f = |u: f64| fam(u).eval(1.0) - threshold;
    let (mut lo, mut hi) = (1e-6, 1.0);
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Argument("practical range root not bracketed".into()));
        }
    }
    if f(lo) < 0.0 {
        return Err(Error::Argument("practical range root not bracketed".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(range / (0.5 * (lo + hi)))
}

/// One nested structure: partial sill times a correlation function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Component {
    pub sill: f64,
    pub family: CorrelationFamily,
}

/// C(h) = Σ σ²ᵢ ρᵢ(h) for h > 0, C(0) = Σ σ²ᵢ + τ².
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub components: Vec<Component>,
    pub nugget: f64,
    pub pr_threshold: f64,
}

impl CovarianceModel {
    pub fn new(components: Vec<Component>, nugget: f64) -> Result<Self> {
        let m = Self {
            components,
            nugget,
            pr_threshold: DEFAULT_PR_THRESHOLD,
        };
        m.validate()?;
        Ok(m)
    }

    /// Single-structure model without nugget.
    pub fn single(sill: f64, family: CorrelationFamily) -> Self {
        Self {
            components: vec![Component { sill, family }],
            nugget: 0.0,
            pr_threshold: DEFAULT_PR_THRESHOLD,
        }
    }

    pub fn with_nugget(mut self, nugget: f64) -> Self {
        self.nugget = nugget;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.components {
            if !(c.sill >= 0.0 && c.sill.is_finite()) {
                return Err(Error::Argument(format!("partial sill must be nonnegative, got {}", c.sill)));
            }
            c.family.validate()?;
        }
        if !(self.nugget >= 0.0 && self.nugget.is_finite()) {
            return Err(Error::Argument(format!("nugget must be nonnegative, got {}", self.nugget)));
        }
        Ok(())
    }

    pub fn partial_sill(&self) -> f64 {
        self.components.iter().map(|c| c.sill).sum()
    }

    pub fn total_sill(&self) -> f64 {
        self.partial_sill() + self.nugget
    }

    /// Covariance between two distinct sites at lag h (nugget excluded).
    #[inline]
    pub fn cov(&self, h: f64) -> f64 {
        self.components.iter().map(|c| c.sill * c.family.eval(h)).sum()
    }

    /// C(h) including the nugget at h = 0.
    pub fn cov_with_nugget(&self, h: f64) -> f64 {
        if h == 0.0 {
            self.total_sill()
        } else {
            self.cov(h)
        }
    }

    /// Practical range of the combined correlation C(h)/C(0), by bisection.
    pub fn practical_range(&self) -> f64 {
        let c0 = self.total_sill();
        let f = |h: f64| self.cov(h) / c0 - self.pr_threshold;
        let (mut lo, mut hi) = (0.0, self.components.iter().map(|c| c.family.scale).fold(1e-12, f64::max));
        while f(hi) > 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        doc.into_model()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument::from(self)).expect("model serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

/// JSON document: `{components: [{kind, sill, scale | practical_range, nu?}], nugget}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub components: Vec<ComponentDocument>,
    #[serde(default)]
    pub nugget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDocument {
    pub kind: CorrelationKind,
    pub sill: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub practical_range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

impl ModelDocument {
    pub fn into_model(self) -> Result<CovarianceModel> {
        let threshold = self.pr_threshold.unwrap_or(DEFAULT_PR_THRESHOLD);
        let mut components = Vec::with_capacity(self.components.len());
        for c in self.components {
            let nu = match c.kind {
                CorrelationKind::Matern => c.nu.unwrap_or(1.5),
                CorrelationKind::Exponential => 0.5,
                CorrelationKind::Spherical => 0.0,
            };
            let scale = match (c.scale, c.practical_range) {
                (Some(s), None) => s,
                (None, Some(pr)) => scale_from_practical_range(
                    c.kind,
                    nu,
                    PracticalRange {
                        range: pr,
                        threshold,
                    },
                )?,
                _ => {
                    return Err(Error::Config {
                        field: "components.scale".into(),
                        message: "exactly one of `scale` or `practical_range` is required".into(),
                    })
                }
            };
            components.push(Component {
                sill: c.sill,
                family: CorrelationFamily {
                    kind: c.kind,
                    scale,
                    nu,
                },
            });
        }
        let mut m = CovarianceModel::new(components, self.nugget)?;
        m.pr_threshold = threshold;
        Ok(m)
    }
}

impl From<&CovarianceModel> for ModelDocument {
    fn from(m: &CovarianceModel) -> Self {
        ModelDocument {
            components: m
                .components
                .iter()
                .map(|c| ComponentDocument {
                    kind: c.family.kind,
                    sill: c.sill,
                    scale: Some(c.family.scale),
                    practical_range: None,
                    nu: (c.family.kind == CorrelationKind::Matern).then_some(c.family.nu),
                })
                .collect(),
            nugget: m.nugget,
            pr_threshold: (m.pr_threshold != DEFAULT_PR_THRESHOLD).then_some(m.pr_threshold),
        }
    }
}

/// Σ over the locations at `idx` (in that order); nugget on the diagonal only.
pub fn build_sigma_for(locs: &LocationSet, idx: &[usize], model: &CovarianceModel) -> DMatrix<f64> {
    let n = idx.len();
    let diag = model.total_sill();
    let mut s = DMatrix::zeros(n, n);
    for a in 0..n {
        s[(a, a)] = diag;
        for b in 0..a {
            let c = model.cov(locs.dist(idx[a], idx[b]));
            s[(a, b)] = c;
            s[(b, a)] = c;
        }
    }
    s
}

pub fn build_sigma(locs: &LocationSet, model: &CovarianceModel) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..locs.len()).collect();
    build_sigma_for(locs, &idx, model)
}

/// c₀ over the locations at `idx` and σ₀² (total sill, nugget included).
pub fn build_c0_for(
    locs: &LocationSet,
    idx: &[usize],
    s0: Point,
    model: &CovarianceModel,
) -> Result<(DVector<f64>, f64)> {
    let d = locs.distances_to(s0)?;
    let c0 = DVector::from_iterator(idx.len(), idx.iter().map(|&i| model.cov(d[i])));
    Ok((c0, model.total_sill()))
}

pub fn build_c0(locs: &LocationSet, s0: Point, model: &CovarianceModel) -> Result<(DVector<f64>, f64)> {
    let idx: Vec<usize> = (0..locs.len()).collect();
    build_c0_for(locs, &idx, s0, model)
}

/// Correlation matrix R with Rᵢⱼ = C(hᵢⱼ)/C(0) and unit diagonal.
pub fn build_correlation_matrix_for(
    locs: &LocationSet,
    idx: &[usize],
    model: &CovarianceModel,
) -> DMatrix<f64> {
    let c0 = model.total_sill();
    let n = idx.len();
    let mut r = DMatrix::identity(n, n);
    if c0 == 0.0 {
        return r;
    }
    for a in 0..n {
        for b in 0..a {
            let v = model.cov(locs.dist(idx[a], idx[b])) / c0;
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    r
}

pub fn build_correlation_matrix(locs: &LocationSet, model: &CovarianceModel) -> DMatrix<f64> {
    let idx: Vec<usize> = (0..locs.len()).collect();
    build_correlation_matrix_for(locs, &idx, model)
}
