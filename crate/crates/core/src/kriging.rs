//! Exact kriging solvers: simple, ordinary, universal and local.
//!
//! Σ is factorized once by Cholesky; the unbiasedness constraint is handled
//! with the Schur complement A = XᵀΣ⁻¹X rather than an augmented system.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::covariance::{build_c0_for, build_sigma_for, CovarianceModel};
use crate::error::{Error, Result};
use crate::geometry::{LocationSet, NeighborOrdering, Point};

/// Variances in (-VARIANCE_CLAMP, 0) are treated as rounding noise.
pub const VARIANCE_CLAMP: f64 = 1e-10;

/// One prediction problem: covariances, design and data for N observations.
#[derive(Debug, Clone)]
pub struct KrigingSystem {
    pub sigma: DMatrix<f64>,
    pub c0: DVector<f64>,
    pub sigma0_sq: f64,
    /// N×p design matrix.
    pub x: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub z: DVector<f64>,
    /// Known mean at the observations and at s₀ (simple kriging).
    pub mean: Option<(DVector<f64>, f64)>,
    /// Row whose location coincides with s₀ when there is no nugget.
    pub exact: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingResult {
    pub weights: DVector<f64>,
    pub intercept: f64,
    pub prediction: f64,
    pub variance: f64,
    pub beta_hat: Option<DVector<f64>>,
}

impl KrigingSystem {
    pub fn new(
        sigma: DMatrix<f64>,
        c0: DVector<f64>,
        sigma0_sq: f64,
        x: DMatrix<f64>,
        x0: DVector<f64>,
        z: DVector<f64>,
    ) -> Result<Self> {
        let n = c0.len();
        if sigma.nrows() != n || sigma.ncols() != n || z.len() != n || x.nrows() != n {
            return Err(Error::Argument(format!(
                "dimension mismatch: sigma {}x{}, c0 {}, z {}, X {}x{}",
                sigma.nrows(),
                sigma.ncols(),
                n,
                z.len(),
                x.nrows(),
                x.ncols()
            )));
        }
        if x.ncols() != x0.len() {
            return Err(Error::Argument(format!(
                "X has {} columns but x0 has {} entries",
                x.ncols(),
                x0.len()
            )));
        }
        Ok(Self {
            sigma,
            c0,
            sigma0_sq,
            x,
            x0,
            z,
            mean: None,
            exact: None,
        })
    }

    /// Ordinary-kriging system over the observations `idx` (in that order).
    ///
    /// σ₀² includes the nugget; see [`KrigingSystem::without_nugget_variance`].
    pub fn assemble(
        locs: &LocationSet,
        idx: &[usize],
        z: &[f64],
        model: &CovarianceModel,
        s0: Point,
    ) -> Result<Self> {
        if z.len() != locs.len() {
            return Err(Error::Argument(format!(
                "{} values for {} locations",
                z.len(),
                locs.len()
            )));
        }
        let n = idx.len();
        let sigma = build_sigma_for(locs, idx, model);
        let (c0, sigma0_sq) = build_c0_for(locs, idx, s0, model)?;
        let zv = DVector::from_iterator(n, idx.iter().map(|&i| z[i]));
        let mut sys = Self::new(
            sigma,
            c0,
            sigma0_sq,
            DMatrix::from_element(n, 1, 1.0),
            DVector::from_element(1, 1.0),
            zv,
        )?;
        if model.nugget == 0.0 {
            if let Some(hit) = locs.coincident_with(s0)? {
                sys.exact = idx.iter().position(|&i| i == hit);
            }
        }
        Ok(sys)
    }

    /// Ordinary-kriging system over all observations.
    pub fn ordinary(locs: &LocationSet, z: &[f64], model: &CovarianceModel, s0: Point) -> Result<Self> {
        let idx: Vec<usize> = (0..locs.len()).collect();
        Self::assemble(locs, &idx, z, model, s0)
    }

    /// Replaces the constant mean with covariates (universal kriging).
    pub fn with_design(mut self, x: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        if x.nrows() != self.len() || x.ncols() != x0.len() {
            return Err(Error::Argument("design dimensions do not match the system".into()));
        }
        self.x = x;
        self.x0 = x0;
        Ok(self)
    }

    /// Attaches a known mean for simple kriging.
    pub fn with_known_mean(mut self, mu: DVector<f64>, mu0: f64) -> Result<Self> {
        if mu.len() != self.len() {
            return Err(Error::Argument("mean vector length does not match the system".into()));
        }
        self.mean = Some((mu, mu0));
        Ok(self)
    }

    /// Drops τ² from σ₀² so the variance refers to the noise-free process.
    pub fn without_nugget_variance(mut self, nugget: f64) -> Self {
        self.sigma0_sq -= nugget;
        self
    }

    pub fn len(&self) -> usize {
        self.c0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c0.is_empty()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Restriction to the rows `rows` (in that order).
    pub fn subsystem(&self, rows: &[usize]) -> KrigingSystem {
        let k = rows.len();
        let sigma = DMatrix::from_fn(k, k, |a, b| self.sigma[(rows[a], rows[b])]);
        let x = DMatrix::from_fn(k, self.p(), |a, j| self.x[(rows[a], j)]);
        let pick = |v: &DVector<f64>| DVector::from_iterator(k, rows.iter().map(|&r| v[r]));
        KrigingSystem {
            sigma,
            c0: pick(&self.c0),
            sigma0_sq: self.sigma0_sq,
            x,
            x0: self.x0.clone(),
            z: pick(&self.z),
            mean: self.mean.as_ref().map(|(mu, mu0)| (pick(mu), *mu0)),
            exact: self.exact.and_then(|e| rows.iter().position(|&r| r == e)),
        }
    }

    fn exact_result(&self, i: usize) -> KrigingResult {
        let mut w = DVector::zeros(self.len());
        w[i] = 1.0;
        KrigingResult {
            weights: w,
            intercept: 0.0,
            prediction: self.z[i],
            variance: 0.0,
            beta_hat: None,
        }
    }
}

pub(crate) fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::SingularMatrix(what.to_string()))
}

pub(crate) fn clamp_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -VARIANCE_CLAMP {
        warn!("clamping variance {v:.3e} to 0");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(v))
    }
}

/// λᵀΣλ − 2λᵀc₀ + σ₀².
pub fn mse_of_weights(lambda: &DVector<f64>, sys: &KrigingSystem) -> f64 {
    let sl = &sys.sigma * lambda;
    lambda.dot(&sl) - 2.0 * lambda.dot(&sys.c0) + sys.sigma0_sq
}

pub fn simple_kriging(sys: &KrigingSystem) -> Result<KrigingResult> {
    let (mu, mu0) = sys
        .mean
        .as_ref()
        .ok_or_else(|| Error::Argument("simple kriging requires a known mean".into()))?;
    if sys.is_empty() {
        return Ok(KrigingResult {
            weights: DVector::zeros(0),
            intercept: *mu0,
            prediction: *mu0,
            variance: clamp_variance(sys.sigma0_sq)?,
            beta_hat: None,
        });
    }
    if let Some(i) = sys.exact {
        let mut r = sys.exact_result(i);
        r.intercept = mu0 - mu[i];
        r.prediction = sys.z[i];
        return Ok(r);
    }
    let chol = cholesky(sys.sigma.clone(), "covariance matrix")?;
    let lambda = chol.solve(&sys.c0);
    let variance = clamp_variance(sys.sigma0_sq - sys.c0.dot(&lambda))?;
    let intercept = mu0 - lambda.dot(mu);
    Ok(KrigingResult {
        prediction: intercept + lambda.dot(&sys.z),
        intercept,
        weights: lambda,
        variance,
        beta_hat: None,
    })
}

pub fn ordinary_kriging(sys: &KrigingSystem) -> Result<KrigingResult> {
    if sys.p() != 1 || sys.x.iter().any(|&v| v != 1.0) || sys.x0[0] != 1.0 {
        return Err(Error::Argument(
            "ordinary kriging requires a single constant covariate".into(),
        ));
    }
    universal_kriging(sys)
}

pub fn universal_kriging(sys: &KrigingSystem) -> Result<KrigingResult> {
    let n = sys.len();
    let p = sys.p();
    if n < p || n == 0 {
        return Err(Error::RankDeficient(format!("{n} observations for {p} covariates")));
    }
    if let Some(i) = sys.exact {
        return Ok(sys.exact_result(i));
    }
    let chol = cholesky(sys.sigma.clone(), "covariance matrix")?;
    let si_c0 = chol.solve(&sys.c0);
    let si_x = chol.solve(&sys.x);
    let a = sys.x.transpose() * &si_x;
    let a_chol = factor_schur(a)?;
    let m = &sys.x0 - sys.x.transpose() * &si_c0;
    let a_inv_m = a_chol.solve(&m);
    let lambda = &si_c0 + &si_x * &a_inv_m;
    let variance = clamp_variance(sys.sigma0_sq - sys.c0.dot(&si_c0) + m.dot(&a_inv_m))?;
    let beta_hat = a_chol.solve(&(si_x.transpose() * &sys.z));
    Ok(KrigingResult {
        prediction: lambda.dot(&sys.z),
        intercept: 0.0,
        weights: lambda,
        variance,
        beta_hat: Some(beta_hat),
    })
}

fn factor_schur(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = a.diagonal().amax();
    let chol = Cholesky::new(a).ok_or_else(|| Error::RankDeficient("XᵀΣ⁻¹X is singular".into()))?;
    let l = chol.l_dirty().diagonal();
    let min = l.iter().fold(f64::INFINITY, |m, &v| m.min(v * v));
    if !(min > 1e-13 * scale) {
        return Err(Error::RankDeficient(format!(
            "XᵀΣ⁻¹X is numerically singular (pivot ratio {:.3e})",
            min / scale
        )));
    }
    Ok(chol)
}

/// Kriging on the first `k` rows of `ordering`, embedded back into N weights.
pub fn local_kriging(sys: &KrigingSystem, ordering: &NeighborOrdering, k: usize) -> Result<KrigingResult> {
    let n = sys.len();
    if k < sys.p() {
        return Err(Error::Argument(format!("K = {k} is smaller than p = {}", sys.p())));
    }
    if k > n || ordering.len() != n {
        return Err(Error::Argument(format!(
            "K = {k} with {} ordered neighbors for a system of size {n}",
            ordering.len()
        )));
    }
    let rows = &ordering.permutation[..k];
    let sub = sys.subsystem(rows);
    let r = if sub.mean.is_some() {
        simple_kriging(&sub)?
    } else {
        universal_kriging(&sub)?
    };
    let mut weights = DVector::zeros(n);
    for (a, &row) in rows.iter().enumerate() {
        weights[row] = r.weights[a];
    }
    Ok(KrigingResult { weights, ..r })
}
