//! LASSO and adaptive-LASSO penalized kriging.
//!
//! The unbiasedness constraint Xᵀλ = x₀ is eliminated by solving for the
//! first p weights, λ_p = X_p⁻ᵀ(x₀ − X₋ₚᵀ μ) with μ = λ₋ₚ. The mean squared
//! error becomes an unconstrained quadratic
//!
//!   Q(μ) = μᵀHμ − 2bᵀμ + q₀
//!
//! and the penalized problem min Q(μ) + η Σ wᵢ|μᵢ| is solved by proximal
//! gradient descent with soft-thresholding. An optional active-set polish
//! (feature-sign search) finishes the solve exactly once the support has
//! settled; it is accepted only when the optimality certificate passes.

use std::io::Write;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kriging::{clamp_variance, KrigingSystem};

/// Largest tolerated condition number of X_p.
pub const MAX_CONDITION: f64 = 1e12;

/// |λ̃ᵢ| below this marks a coordinate as permanently excluded.
pub const ADAPTIVE_ZERO: f64 = 1e-12;

/// Relative KKT tolerance.
pub const KKT_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub p: usize,
    pub n: usize,
    pub x_p_inv: DMatrix<f64>,
    pub x_minus_p: DMatrix<f64>,
    pub sigma_pp: DMatrix<f64>,
    pub sigma_pm: DMatrix<f64>,
    pub sigma_mp: DMatrix<f64>,
    pub sigma_mm: DMatrix<f64>,
    pub c0_p: DVector<f64>,
    pub c0_m: DVector<f64>,
    pub x0: DVector<f64>,
    pub sigma0_sq: f64,
    /// Condition number of X_p.
    pub condition: f64,
    /// λ_p at μ = 0, X_p⁻ᵀx₀.
    pub a_p: DVector<f64>,
    /// X_p⁻ᵀX₋ₚᵀ, so that λ_p = a_p − Mμ.
    pub m: DMatrix<f64>,
    /// Reduced Hessian H (half the Hessian of Q).
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constant: f64,
    pub z: DVector<f64>,
}

/// Eliminates the first p = rank(X) weights of `sys`.
pub fn reduce(sys: &KrigingSystem) -> Result<ReducedProblem> {
    let n = sys.len();
    let p = sys.p();
    if p == 0 || n < p {
        return Err(Error::Argument(format!("cannot eliminate p = {p} constraints from {n} weights")));
    }
    let r = n - p;
    let x_p = sys.x.rows(0, p).into_owned();
    let sv = x_p.clone().singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::ConstraintElimination { p, condition });
    }
    let x_p_inv = x_p
        .try_inverse()
        .ok_or(Error::ConstraintElimination { p, condition })?;
    let x_minus_p = sys.x.rows(p, r).into_owned();
    let sigma_pp = sys.sigma.view((0, 0), (p, p)).into_owned();
    let sigma_pm = sys.sigma.view((0, p), (p, r)).into_owned();
    let sigma_mp = sys.sigma.view((p, 0), (r, p)).into_owned();
    let sigma_mm = sys.sigma.view((p, p), (r, r)).into_owned();
    let c0_p = sys.c0.rows(0, p).into_owned();
    let c0_m = sys.c0.rows(p, r).into_owned();

    let x_p_inv_t = x_p_inv.transpose();
    let a_p = &x_p_inv_t * &sys.x0;
    let m = &x_p_inv_t * x_minus_p.transpose();
    let mt = m.transpose();
    let sm = &sigma_mp * &m;
    let mut hessian = &sigma_mm - &sm - sm.transpose() + &mt * (&sigma_pp * &m);
    hessian = (&hessian + hessian.transpose()) * 0.5;
    let sa = &sigma_pp * &a_p;
    let linear = (&c0_m - &sigma_mp * &a_p) - &mt * (&c0_p - &sa);
    let constant = a_p.dot(&sa) - 2.0 * a_p.dot(&c0_p) + sys.sigma0_sq;

    Ok(ReducedProblem {
        p,
        n,
        x_p_inv,
        x_minus_p,
        sigma_pp,
        sigma_pm,
        sigma_mp,
        sigma_mm,
        c0_p,
        c0_m,
        x0: sys.x0.clone(),
        sigma0_sq: sys.sigma0_sq,
        condition,
        a_p,
        m,
        hessian,
        linear,
        constant,
        z: sys.z.clone(),
    })
}

impl ReducedProblem {
    /// Number of penalized coordinates, N − p.
    pub fn dim(&self) -> usize {
        self.n - self.p
    }

    /// Full weight vector (λ_p, μ) satisfying Xᵀλ = x₀.
    pub fn reconstruct(&self, mu: &DVector<f64>) -> DVector<f64> {
        let lp = &self.a_p - &self.m * mu;
        let mut lambda = DVector::zeros(self.n);
        lambda.rows_mut(0, self.p).copy_from(&lp);
        lambda.rows_mut(self.p, self.dim()).copy_from(mu);
        lambda
    }

    /// Mean squared error of the weights reconstructed from μ.
    pub fn mse(&self, mu: &DVector<f64>) -> f64 {
        mu.dot(&(&self.hessian * mu)) - 2.0 * self.linear.dot(mu) + self.constant
    }

    /// Minimizer of Q without penalty (the kriging weights λ₋ₚ).
    pub fn unpenalized(&self) -> Result<DVector<f64>> {
        if self.dim() == 0 {
            return Ok(DVector::zeros(0));
        }
        let chol = Cholesky::new(self.hessian.clone())
            .ok_or_else(|| Error::SingularMatrix("reduced Hessian".into()))?;
        Ok(chol.solve(&self.linear))
    }

    /// Smallest η at which μ = 0 is optimal for the given weights.
    pub fn eta_max(&self, weights: &[f64]) -> f64 {
        self.linear
            .iter()
            .zip(weights)
            .filter(|(_, w)| w.is_finite())
            .map(|(b, w)| 2.0 * b.abs() / w)
            .fold(0.0, f64::max)
    }

    pub fn predict(&self, lambda: &DVector<f64>) -> f64 {
        lambda.dot(&self.z)
    }
}

/// ∇Q(μ), evaluated block-wise from Σ and c₀ through the elimination map.
pub fn reduced_gradient(rp: &ReducedProblem, mu: &DVector<f64>) -> DVector<f64> {
    if rp.dim() == 0 {
        return DVector::zeros(0);
    }
    let lp = &rp.a_p - &rp.m * mu;
    let r_p = &rp.sigma_pp * &lp + &rp.sigma_pm * mu - &rp.c0_p;
    let r_m = &rp.sigma_mp * &lp + &rp.sigma_mm * mu - &rp.c0_m;
    (r_m - rp.m.transpose() * r_p) * 2.0
}

/// sign(vᵢ)·max(|vᵢ| − tᵢ, 0); an infinite threshold yields exactly 0.
pub fn soft_threshold(v: &DVector<f64>, t: &DVector<f64>) -> DVector<f64> {
    v.zip_map(t, shrink)
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    let a = v.abs() - t;
    if a > 0.0 {
        a.copysign(v)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    Lasso,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub eta: f64,
    /// One weight per penalized coordinate; `f64::INFINITY` excludes it.
    pub weights: Vec<f64>,
    pub mode: PenaltyMode,
}

impl PenaltySpec {
    pub fn lasso(eta: f64, dim: usize) -> Self {
        Self {
            eta,
            weights: vec![1.0; dim],
            mode: PenaltyMode::Lasso,
        }
    }

    pub fn adaptive(eta: f64, weights: Vec<f64>) -> Self {
        Self {
            eta,
            weights,
            mode: PenaltyMode::Adaptive,
        }
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self { eta, ..self.clone() }
    }
}

/// wᵢ = 1/|λ̃ᵢ| for i ≥ p; tiny stage-1 weights map to +∞.
pub fn adaptive_weights(initial: &DVector<f64>, p: usize) -> Vec<f64> {
    initial
        .iter()
        .skip(p)
        .map(|l| {
            if l.abs() < ADAPTIVE_ZERO {
                f64::INFINITY
            } else {
                1.0 / l.abs()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule", content = "value")]
pub enum StepRule {
    /// α = scale/ℓ with ℓ the row-sum bound on the gradient's Lipschitz constant.
    Lipschitz(f64),
    /// Literal α.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step: StepRule,
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
    pub divergence_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: StepRule::Lipschitz(1.0),
            tol: 1e-8,
            max_iter: 10_000,
            polish: true,
            divergence_window: 50,
        }
    }
}

impl SolverConfig {
    /// Plain proximal gradient with α = 0.01, at most 1000 iterations.
    pub fn paper() -> Self {
        Self {
            step: StepRule::Fixed(0.01),
            max_iter: 1000,
            polish: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    /// Full weight vector λ̂ (N entries).
    pub weights: DVector<f64>,
    /// Indices with nonzero weight; always contains 0..p.
    pub active_set: Vec<usize>,
    pub eta: f64,
    pub variance: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_violation: f64,
    pub p: usize,
}

impl PenalizedSolution {
    pub fn nnz(&self) -> usize {
        self.active_set.len()
    }

    /// The penalized coordinates μ = λ₋ₚ.
    pub fn mu(&self) -> DVector<f64> {
        self.weights.rows(self.p, self.weights.len() - self.p).into_owned()
    }
}

/// Reusable solver for one reduced problem and one weight vector.
///
/// Keeps a Cholesky factor of H restricted to the last polished active set
/// and updates it column by column as the active set changes along a path.
pub struct PenalizedSolver<'a> {
    rp: &'a ReducedProblem,
    cfg: SolverConfig,
    free: Vec<usize>,
    h: DMatrix<f64>,
    b: DVector<f64>,
    w: DVector<f64>,
    ell: f64,
    factor: Option<ActiveFactor>,
}

struct ActiveFactor {
    order: Vec<usize>,
    chol: Cholesky<f64, Dyn>,
    updates: usize,
}

const STABLE_ITERS: usize = 5;
const REFACTOR_AFTER: usize = 64;

impl<'a> PenalizedSolver<'a> {
    pub fn new(rp: &'a ReducedProblem, weights: &[f64], cfg: SolverConfig) -> Result<Self> {
        if weights.len() != rp.dim() {
            return Err(Error::Argument(format!(
                "{} penalty weights for {} penalized coordinates",
                weights.len(),
                rp.dim()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Argument("penalty weights must be positive".into()));
        }
        match cfg.step {
            StepRule::Lipschitz(s) | StepRule::Fixed(s) if !(s > 0.0 && s.is_finite()) => {
                return Err(Error::Argument(format!("step size must be positive, got {s}")));
            }
            _ => {}
        }
        let free: Vec<usize> = (0..rp.dim()).filter(|&i| weights[i].is_finite()).collect();
        let d = free.len();
        let h = DMatrix::from_fn(d, d, |a, c| rp.hessian[(free[a], free[c])]);
        let b = DVector::from_iterator(d, free.iter().map(|&i| rp.linear[i]));
        let w = DVector::from_iterator(d, free.iter().map(|&i| weights[i]));
        let ell = 2.0
            * (0..d)
                .map(|a| h.column(a).iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max);
        Ok(Self {
            rp,
            cfg,
            free,
            h,
            b,
            w,
            ell,
            factor: None,
        })
    }

    pub fn problem(&self) -> &ReducedProblem {
        self.rp
    }

    pub fn step(&self) -> f64 {
        match self.cfg.step {
            StepRule::Lipschitz(s) => {
                if self.ell > 0.0 {
                    s / self.ell
                } else {
                    s
                }
            }
            StepRule::Fixed(a) => a,
        }
    }

    fn kkt_tol(&self, eta: f64) -> f64 {
        let wmax = self.w.iter().copied().fold(0.0, f64::max);
        KKT_TOL * (eta * wmax).max(2.0 * self.b.amax()).max(f64::MIN_POSITIVE)
    }

    /// Solves at penalty level η starting from μ = `init` (N − p entries).
    pub fn solve(&mut self, eta: f64, init: &DVector<f64>) -> Result<PenalizedSolution> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Argument(format!("eta must be nonnegative and finite, got {eta}")));
        }
        if init.len() != self.rp.dim() {
            return Err(Error::Argument(format!(
                "initial point has {} entries, expected {}",
                init.len(),
                self.rp.dim()
            )));
        }
        let d = self.free.len();
        let t = &self.w * eta;
        let tol = self.kkt_tol(eta);
        let mut x = DVector::from_iterator(d, self.free.iter().map(|&i| init[i]));
        let mut g = self.gradient(&x);
        let mut iterations = 0;
        let mut converged = d == 0;

        if !converged && self.cfg.polish {
            if let Some((xp, gp)) = self.polish(&x, &g, &t, tol) {
                x = xp;
                g = gp;
                converged = true;
            }
        }

        if !converged {
            let alpha = self.step();
            let at = &t * alpha;
            let mut obj = objective(&x, &g, &self.b, &t);
            let mut rising = 0usize;
            let mut stable = 0usize;
            let mut polished_pattern: Option<Vec<i8>> = None;
            let mut pattern = sign_pattern(&x);
            for k in 1..=self.cfg.max_iter {
                iterations = k;
                let mut disp2 = 0.0;
                let mut xn = x.clone();
                for i in 0..d {
                    xn[i] = shrink(x[i] - alpha * g[i], at[i]);
                }
                for i in 0..d {
                    let delta = xn[i] - x[i];
                    if delta != 0.0 {
                        disp2 += delta * delta;
                        g.axpy(2.0 * delta, &self.h.column(i), 1.0);
                    }
                }
                x = xn;
                let next = objective(&x, &g, &self.b, &t);
                if !next.is_finite() || !disp2.is_finite() {
                    return Err(Error::StepSize(rising + 1));
                }
                if next > obj + 1e-14 * obj.abs().max(1.0) {
                    rising += 1;
                    if rising >= self.cfg.divergence_window {
                        return Err(Error::StepSize(rising));
                    }
                } else {
                    rising = 0;
                }
                obj = next;
                if disp2.sqrt() <= self.cfg.tol {
                    converged = true;
                    break;
                }
                if self.cfg.polish {
                    let now = sign_pattern(&x);
                    if now == pattern {
                        stable += 1;
                    } else {
                        stable = 0;
                        pattern = now;
                    }
                    if stable >= STABLE_ITERS && polished_pattern.as_ref() != Some(&pattern) {
                        polished_pattern = Some(pattern.clone());
                        if let Some((xp, gp)) = self.polish(&x, &g, &t, tol) {
                            x = xp;
                            g = gp;
                            converged = true;
                            break;
                        }
                    }
                }
            }
            if converged && self.cfg.polish {
                if let Some((xp, gp)) = self.polish(&x, &g, &t, tol) {
                    if objective(&xp, &gp, &self.b, &t) <= obj + 1e-12 * obj.abs().max(1.0) {
                        x = xp;
                        g = gp;
                    }
                }
            }
            if !converged {
                warn!(
                    "penalized solve at eta={eta:.3e} stopped after {} iterations without converging",
                    self.cfg.max_iter
                );
            }
        }

        let kkt_violation = kkt_violation(&x, &g, &t);
        let mut mu = DVector::zeros(self.rp.dim());
        for (a, &i) in self.free.iter().enumerate() {
            mu[i] = x[a];
        }
        let weights = self.rp.reconstruct(&mu);
        let p = self.rp.p;
        let active_set: Vec<usize> = (0..p)
            .chain((0..self.rp.dim()).filter(|&i| mu[i] != 0.0).map(|i| i + p))
            .collect();
        let variance = clamp_variance(self.rp.mse(&mu))?;
        Ok(PenalizedSolution {
            weights,
            active_set,
            eta,
            variance,
            iterations,
            converged,
            kkt_violation,
            p,
        })
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = &self.b * -2.0;
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                g.axpy(2.0 * xi, &self.h.column(i), 1.0);
            }
        }
        g
    }

    /// Feature-sign search from (x, g). Returns the exact minimizer when its
    /// optimality certificate passes.
    fn polish(
        &mut self,
        x0: &DVector<f64>,
        g0: &DVector<f64>,
        t: &DVector<f64>,
        tol: f64,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let d = x0.len();
        let mut x = x0.clone();
        let mut g = g0.clone();
        let max_rounds = 4 * d + 20;
        let mut single = false;
        for _ in 0..max_rounds {
            let mut active: Vec<usize> = (0..d).filter(|&i| x[i] != 0.0).collect();
            let mut theta: Vec<f64> = active.iter().map(|&i| x[i].signum()).collect();
            let active_ok = active
                .iter()
                .zip(&theta)
                .all(|(&i, &s)| (g[i] + t[i] * s).abs() <= tol);
            if active_ok {
                let mut viol: Vec<(usize, f64)> = (0..d)
                    .filter(|&i| x[i] == 0.0 && g[i].abs() > t[i] + tol)
                    .map(|i| (i, g[i].abs() - t[i]))
                    .collect();
                if viol.is_empty() {
                    return (kkt_violation(&x, &g, t) <= tol).then_some((x, g));
                }
                if single {
                    viol.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    viol.truncate(1);
                }
                for (i, _) in viol {
                    active.push(i);
                    theta.push(-g[i].signum());
                }
            }
            let nu = self.solve_active(&active, &theta, t)?;
            let dir: Vec<f64> = active.iter().zip(nu.iter()).map(|(&i, &v)| v - x[i]).collect();
            let mut hd = DVector::zeros(d);
            for (&i, &di) in active.iter().zip(&dir) {
                if di != 0.0 {
                    hd.axpy(di, &self.h.column(i), 1.0);
                }
            }
            let gd: f64 = active.iter().zip(&dir).map(|(&i, &di)| g[i] * di).sum();
            let dhd: f64 = active.iter().zip(&dir).map(|(&i, &di)| hd[i] * di).sum();
            let pen = |tau: f64| -> f64 {
                active
                    .iter()
                    .zip(&dir)
                    .map(|(&i, &di)| t[i] * (x[i] + tau * di).abs())
                    .sum()
            };
            let base = pen(0.0);
            let f = |tau: f64| tau * gd + tau * tau * dhd + pen(tau) - base;
            let mut best = (1.0, f(1.0), None);
            for (a, &i) in active.iter().enumerate() {
                let (xi, di) = (x[i], dir[a]);
                if xi != 0.0 && di != 0.0 && (xi + di) * xi <= 0.0 {
                    let tau = xi / (xi - nu[a]);
                    if tau > 0.0 && tau < 1.0 {
                        let v = f(tau);
                        if v < best.1 {
                            best = (tau, v, Some(i));
                        }
                    }
                }
            }
            let (tau, fval, hit) = best;
            if !(fval < 0.0) {
                if single {
                    return None;
                }
                single = true;
                continue;
            }
            single = false;
            for (a, &i) in active.iter().enumerate() {
                x[i] += tau * dir[a];
            }
            if let Some(i) = hit {
                x[i] = 0.0;
            }
            g = self.gradient(&x);
        }
        debug!("feature-sign polish hit its round limit");
        None
    }

    /// Solves H_AA ν = b_A − ½ t_A∘θ_A with an incrementally maintained factor.
    fn solve_active(&mut self, active: &[usize], theta: &[f64], t: &DVector<f64>) -> Option<DVector<f64>> {
        if active.is_empty() {
            return Some(DVector::zeros(0));
        }
        self.update_factor(active)?;
        let f = self.factor.as_ref()?;
        let pos: std::collections::HashMap<usize, usize> =
            f.order.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut rhs = DVector::zeros(active.len());
        for (a, &i) in active.iter().enumerate() {
            rhs[pos[&i]] = self.b[i] - 0.5 * t[i] * theta[a];
        }
        let sol = f.chol.solve(&rhs);
        if sol.iter().any(|v| !v.is_finite()) {
            self.factor = None;
            return None;
        }
        Some(DVector::from_iterator(active.len(), active.iter().map(|i| sol[pos[i]])))
    }

    fn update_factor(&mut self, active: &[usize]) -> Option<()> {
        let mut want: Vec<usize> = active.to_vec();
        want.sort_unstable();
        if let Some(f) = &self.factor {
            let mut have = f.order.clone();
            have.sort_unstable();
            if have == want {
                return Some(());
            }
            let removed: Vec<usize> = f.order.iter().copied().filter(|i| want.binary_search(i).is_err()).collect();
            let added: Vec<usize> = want.iter().copied().filter(|i| have.binary_search(i).is_err()).collect();
            let changes = removed.len() + added.len();
            if changes <= want.len() / 4 + 4 && f.updates + changes <= REFACTOR_AFTER {
                if let Some(nf) = self.incremental(removed, added) {
                    self.factor = Some(nf);
                    return Some(());
                }
            }
        }
        let hm = DMatrix::from_fn(want.len(), want.len(), |a, c| self.h[(want[a], want[c])]);
        let chol = Cholesky::new(hm)?;
        self.factor = Some(ActiveFactor {
            order: want,
            chol,
            updates: 0,
        });
        Some(())
    }

    fn incremental(&self, removed: Vec<usize>, added: Vec<usize>) -> Option<ActiveFactor> {
        let f = self.factor.as_ref()?;
        let mut order = f.order.clone();
        let mut chol = f.chol.clone();
        let updates = f.updates + removed.len() + added.len();
        for i in removed {
            let j = order.iter().position(|&o| o == i)?;
            chol = chol.remove_column(j);
            order.remove(j);
        }
        for i in added {
            let k = order.len();
            let col = DVector::from_iterator(k + 1, order.iter().chain(std::iter::once(&i)).map(|&o| self.h[(o, i)]));
            if k > 0 {
                // Pivot check before nalgebra takes the square root.
                let mut y = col.rows(0, k).into_owned();
                if !chol.l_dirty().solve_lower_triangular_mut(&mut y) {
                    return None;
                }
                let pivot = col[k] - y.norm_squared();
                if !(pivot > 1e-14 * col[k].abs().max(f64::MIN_POSITIVE)) {
                    return None;
                }
            } else if !(col[0] > 0.0) {
                return None;
            }
            chol = chol.insert_column(k, col);
            order.push(i);
        }
        Some(ActiveFactor { order, chol, updates })
    }
}

fn sign_pattern(x: &DVector<f64>) -> Vec<i8> {
    x.iter()
        .map(|&v| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 })
        .collect()
}

/// Q(x) − q₀ + Σ tᵢ|xᵢ| using the maintained gradient g = 2(Hx − b).
fn objective(x: &DVector<f64>, g: &DVector<f64>, b: &DVector<f64>, t: &DVector<f64>) -> f64 {
    0.5 * x.dot(g) - b.dot(x) + x.iter().zip(t.iter()).map(|(xi, ti)| ti * xi.abs()).sum::<f64>()
}

fn kkt_violation(x: &DVector<f64>, g: &DVector<f64>, t: &DVector<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let v = if x[i] != 0.0 {
            (g[i] + t[i] * x[i].signum()).abs()
        } else {
            (g[i].abs() - t[i]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// One penalized solve.
pub fn solve(
    rp: &ReducedProblem,
    penalty: &PenaltySpec,
    init: &DVector<f64>,
    cfg: &SolverConfig,
) -> Result<PenalizedSolution> {
    PenalizedSolver::new(rp, &penalty.weights, *cfg)?.solve(penalty.eta, init)
}

/// Warm-started solves along an ascending η grid, starting from the
/// unpenalized weights.
pub fn solution_path(
    rp: &ReducedProblem,
    weights: &[f64],
    etas: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<PenalizedSolution>> {
    if etas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Argument("eta grid must be sorted ascending".into()));
    }
    let mut solver = PenalizedSolver::new(rp, weights, *cfg)?;
    let mut init = rp.unpenalized()?;
    for (i, w) in weights.iter().enumerate() {
        if !w.is_finite() {
            init[i] = 0.0;
        }
    }
    let mut out = Vec::with_capacity(etas.len());
    for &eta in etas {
        let sol = solver.solve(eta, &init)?;
        init = sol.mu();
        out.push(sol);
    }
    Ok(out)
}

/// Writes `eta,nnz,variance[,lambda_1..lambda_N]` rows.
pub fn write_path_csv<W: Write>(out: W, path: &[PenalizedSolution], with_weights: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = path.first().map_or(0, |s| s.weights.len());
    let mut header = vec!["eta".to_string(), "nnz".into(), "variance".into()];
    if with_weights {
        header.extend((1..=n).map(|i| format!("lambda_{i}")));
    }
    w.write_record(&header)?;
    for s in path {
        let mut row = vec![format!("{:e}", s.eta), s.nnz().to_string(), format!("{}", s.variance)];
        if with_weights {
            row.extend(s.weights.iter().map(|v| format!("{v}")));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kriging::tests::{fig1_system, random_system};
    use crate::kriging::{ordinary_kriging, universal_kriging};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fig1() -> ReducedProblem {
        reduce(&fig1_system()).unwrap()
    }

    #[test]
    fn ordinary_elimination_is_sum_to_one() {
        let rp = fig1();
        let mu = DVector::from_vec(vec![0.3, -0.1]);
        let l = rp.reconstruct(&mu);
        assert!((l[0] - (1.0 - 0.3 + 0.1)).abs() < 1e-15);
        assert_eq!(rp.reconstruct(&DVector::zeros(2)).as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn reconstruct_satisfies_constraint() {
        let (sys, _) = random_system(30, 3, 0.0, 12);
        let rp = reduce(&sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mu = DVector::from_fn(27, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let l = rp.reconstruct(&mu);
            assert!((sys.x.transpose() * &l - &sys.x0).amax() < 1e-12);
            let direct = crate::kriging::mse_of_weights(&l, &sys);
            assert!((rp.mse(&mu) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_leading_block() {
        let (sys, _) = random_system(10, 1, 0.0, 1);
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else if i < 2 { 0.5 } else { i as f64 });
        let sys = sys.with_design(x, DVector::from_vec(vec![1.0, 0.3])).unwrap();
        assert!(matches!(reduce(&sys), Err(Error::ConstraintElimination { p: 2, .. })));
    }

    #[test]
    fn fig1_reduced_quantities() {
        let rp = fig1();
        let g0 = reduced_gradient(&rp, &DVector::zeros(2));
        assert!((g0[0] + 1.19817).abs() < 1e-5 && (g0[1] + 0.92462).abs() < 1e-5);
        assert!((rp.hessian[(0, 0)] - 1.4728).abs() < 1e-4);
        assert!((rp.hessian[(0, 1)] - 0.9305).abs() < 1e-4);
        assert!((rp.hessian[(1, 1)] - 1.8610).abs() < 1e-4);
        assert!((rp.eta_max(&[1.0, 1.0]) - 1.19817).abs() < 1e-5);
        assert!((rp.constant - 0.8267076).abs() < 1e-6);
    }

    #[test]
    fn gradient_forms_agree_with_finite_differences() {
        for (n, p, seed) in [(12, 1, 3u64), (20, 3, 4), (8, 2, 5)] {
            let (sys, _) = random_system(n, p, 0.05, seed);
            let rp = reduce(&sys).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mu = DVector::from_fn(n - p, |_, _| rng.random::<f64>() - 0.5);
            let g = reduced_gradient(&rp, &mu);
            let hb = (&rp.hessian * &mu - &rp.linear) * 2.0;
            assert!((&g - &hb).amax() < 1e-10);
            let q = |m: &DVector<f64>| crate::kriging::mse_of_weights(&rp.reconstruct(m), &sys);
            for i in 0..n - p {
                let mut up = mu.clone();
                let mut dn = mu.clone();
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let fd = (q(&up) - q(&dn)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-5, "component {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gradient_vanishes_at_kriging_solution() {
        let (sys, _) = random_system(25, 1, 0.0, 7);
        let ok = ordinary_kriging(&sys).unwrap();
        let rp = reduce(&sys).unwrap();
        let g = reduced_gradient(&rp, &ok.weights.rows(1, 24).into_owned());
        assert!(g.amax() < 1e-8);
    }

    #[test]
    fn gradient_of_empty_problem() {
        let (sys, _) = random_system(1, 1, 0.0, 2);
        let rp = reduce(&sys).unwrap();
        assert_eq!(reduced_gradient(&rp, &DVector::zeros(0)).len(), 0);
    }

    #[test]
    fn soft_threshold_cases() {
        let v = DVector::from_vec(vec![0.5, -0.2]);
        let r = soft_threshold(&v, &DVector::from_vec(vec![0.3, 0.3]));
        assert!((r[0] - 0.2).abs() < 1e-15);
        assert_eq!(r[1], 0.0);
        assert_eq!(soft_threshold(&v, &DVector::zeros(2)), v);
        let inf = soft_threshold(&v, &DVector::from_vec(vec![f64::INFINITY, 0.0]));
        assert_eq!(inf[0], 0.0);
        assert_eq!(inf[1], -0.2);
    }

    fn check_kkt(rp: &ReducedProblem, sol: &PenalizedSolution, weights: &[f64]) {
        let mu = sol.mu();
        let g = reduced_gradient(rp, &mu);
        let tol = KKT_TOL * (sol.eta * weights.iter().copied().filter(|w| w.is_finite()).fold(0.0, f64::max))
            .max(2.0 * rp.linear.amax());
        for i in 0..mu.len() {
            if !weights[i].is_finite() {
                assert_eq!(mu[i], 0.0);
                continue;
            }
            let t = sol.eta * weights[i];
            if mu[i] != 0.0 {
                assert!((g[i] + t * mu[i].signum()).abs() <= tol, "active {i}");
            } else {
                assert!(g[i].abs() <= t + tol, "inactive {i}");
            }
        }
    }

    #[test]
    fn fig1_endpoints_and_path() {
        let rp = fig1();
        let cfg = SolverConfig::default();
        let zero = solve(&rp, &PenaltySpec::lasso(0.0, 2), &DVector::zeros(2), &cfg).unwrap();
        let ok = ordinary_kriging(&fig1_system()).unwrap();
        assert!((&zero.weights - &ok.weights).amax() < 1e-9);
        let top = rp.eta_max(&[1.0, 1.0]);
        for eta in [top, 1.2, 5.0] {
            let s = solve(&rp, &PenaltySpec::lasso(eta, 2), &zero.mu(), &cfg).unwrap();
            assert_eq!(s.weights.as_slice(), &[1.0, 0.0, 0.0]);
            assert_eq!(s.active_set, vec![0]);
        }
        let expect = [(0.1, 0.34036, 0.05137), (0.5, 0.23702, 0.0), (1.0, 0.06728, 0.0)];
        for (eta, l2, l3) in expect {
            let s = solve(&rp, &PenaltySpec::lasso(eta, 2), &DVector::zeros(2), &cfg).unwrap();
            assert!((s.weights[1] - l2).abs() < 1e-5 && (s.weights[2] - l3).abs() < 1e-5, "{eta}: {:?}", s.weights);
            check_kkt(&rp, &s, &[1.0, 1.0]);
        }
    }

    #[test]
    fn fig1_farthest_weight_vanishes_first() {
        let rp = fig1();
        let etas: Vec<f64> = (0..200).map(|i| 1e-4 * (1.3e4f64).powf(i as f64 / 199.0)).collect();
        let path = solution_path(&rp, &[1.0, 1.0], &etas, &SolverConfig::default()).unwrap();
        let first_zero = |j: usize| path.iter().position(|s| s.weights[j] == 0.0).unwrap();
        assert!(first_zero(2) < first_zero(1));
        let mut prev = 0.0;
        for s in &path {
            assert!(s.variance >= prev - 1e-8);
            prev = s.variance;
        }
    }

    #[test]
    fn paper_step_rule_on_worked_example() {
        let rp = fig1();
        let s = solve(&rp, &PenaltySpec::lasso(0.0, 2), &DVector::zeros(2), &SolverConfig::paper()).unwrap();
        let ok = ordinary_kriging(&fig1_system()).unwrap();
        assert!((&s.weights - &ok.weights).amax() < 1e-3);
        assert!(s.iterations > 0);
    }

    #[test]
    fn plain_proximal_gradient_matches_direct_solver() {
        let (sys, _) = random_system(40, 1, 0.1, 21);
        let rp = reduce(&sys).unwrap();
        let cfg = SolverConfig {
            polish: false,
            max_iter: 200_000,
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let s = solve(&rp, &PenaltySpec::lasso(0.0, 39), &DVector::zeros(39), &cfg).unwrap();
        let ok = universal_kriging(&sys).unwrap();
        assert!(s.converged);
        assert!((&s.weights - &ok.weights).amax() < 1e-6);
    }

    #[test]
    fn polished_solve_matches_direct_solver() {
        for seed in 0..5 {
            let (sys, _) = random_system(40, 1 + (seed as usize % 3), 0.0, 40 + seed);
            let rp = reduce(&sys).unwrap();
            let d = rp.dim();
            let s = solve(&rp, &PenaltySpec::lasso(0.0, d), &DVector::zeros(d), &SolverConfig::default()).unwrap();
            let ok = universal_kriging(&sys).unwrap();
            assert!((&s.weights - &ok.weights).amax() < 1e-6);
            assert!((sys.x.transpose() * &s.weights - &sys.x0).amax() < 1e-10);
        }
    }

    #[test]
    fn objective_nonincreasing_with_admissible_step() {
        let (sys, _) = random_system(30, 1, 0.0, 2);
        let rp = reduce(&sys).unwrap();
        let eta = 0.05 * rp.eta_max(&vec![1.0; 29]);
        let mut prev = f64::INFINITY;
        for iters in [1, 2, 5, 10, 50, 200] {
            let cfg = SolverConfig { polish: false, max_iter: iters, ..SolverConfig::default() };
            let s = solve(&rp, &PenaltySpec::lasso(eta, 29), &DVector::zeros(29), &cfg).unwrap();
            let obj = s.variance + eta * s.mu().abs().sum();
            assert!(obj <= prev + 1e-12);
            prev = obj;
        }
    }

    #[test]
    fn oversized_fixed_step_is_reported() {
        let (sys, _) = random_system(30, 1, 0.0, 2);
        let rp = reduce(&sys).unwrap();
        let cfg = SolverConfig { step: StepRule::Fixed(50.0), polish: false, ..SolverConfig::default() };
        let init = DVector::from_element(29, 0.01);
        let r = solve(&rp, &PenaltySpec::lasso(1e-6, 29), &init, &cfg);
        assert!(matches!(r, Err(Error::StepSize(_))), "{r:?}");
    }

    #[test]
    fn adaptive_weight_cases() {
        let w = adaptive_weights(&DVector::from_vec(vec![0.9, 0.5, 0.0, -0.25]), 1);
        assert_eq!(w, vec![2.0, f64::INFINITY, 4.0]);
    }

    #[test]
    fn uniform_adaptive_weights_rescale_eta() {
        let (sys, _) = random_system(25, 1, 0.0, 17);
        let rp = reduce(&sys).unwrap();
        let cfg = SolverConfig::default();
        let init = DVector::zeros(24);
        let eta = 0.1 * rp.eta_max(&vec![1.0; 24]);
        let a = solve(&rp, &PenaltySpec::adaptive(eta / 4.0, vec![4.0; 24]), &init, &cfg).unwrap();
        let l = solve(&rp, &PenaltySpec::lasso(eta, 24), &init, &cfg).unwrap();
        assert_eq!(a.active_set, l.active_set);
        assert!((&a.weights - &l.weights).amax() < 1e-9);
    }

    #[test]
    fn excluded_coordinates_stay_zero() {
        let (sys, _) = random_system(20, 1, 0.0, 8);
        let rp = reduce(&sys).unwrap();
        let mut w = vec![1.0; 19];
        w[0] = f64::INFINITY;
        w[5] = f64::INFINITY;
        let path = solution_path(&rp, &w, &[0.0, 1e-3, 1e-2], &SolverConfig::default()).unwrap();
        for s in &path {
            assert_eq!(s.weights[1], 0.0);
            assert_eq!(s.weights[6], 0.0);
            check_kkt(&rp, s, &w);
        }
    }

    #[test]
    fn warm_path_matches_cold_solves() {
        let (sys, _) = random_system(60, 1, 0.02, 31);
        let rp = reduce(&sys).unwrap();
        let ones = vec![1.0; 59];
        let emax = rp.eta_max(&ones);
        let etas: Vec<f64> = (0..25).map(|i| emax * 1e-4 * (1.2e4f64).powf(i as f64 / 24.0)).collect();
        let cfg = SolverConfig::default();
        let path = solution_path(&rp, &ones, &etas, &cfg).unwrap();
        let mut prev = 0.0;
        for s in &path {
            let cold = solve(&rp, &PenaltySpec::lasso(s.eta, 59), &DVector::zeros(59), &cfg).unwrap();
            assert_eq!(s.active_set, cold.active_set, "eta={}", s.eta);
            assert!(s.converged);
            check_kkt(&rp, s, &ones);
            assert!(s.variance >= prev - 1e-8);
            prev = s.variance;
        }
        let end = path.last().unwrap();
        assert_eq!(end.active_set, vec![0]);
    }

    #[test]
    fn nugget_is_elastic_net() {
        let (sys, _) = random_system(15, 1, 0.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau2 = 0.3;
        let mut nug = sys.clone();
        for i in 0..15 {
            nug.sigma[(i, i)] += tau2;
        }
        nug.sigma0_sq += tau2;
        let rp = reduce(&sys).unwrap();
        let rn = reduce(&nug).unwrap();
        let eta = 0.02;
        for _ in 0..50 {
            let mu = DVector::from_fn(14, |_, _| rng.random::<f64>() - 0.5);
            let l = rp.reconstruct(&mu);
            let lhs = rn.mse(&mu) + eta * mu.abs().sum();
            let rhs = rp.mse(&mu) + tau2 * (1.0 + l.norm_squared()) + eta * mu.abs().sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn path_csv_columns() {
        let rp = fig1();
        let path = solution_path(&rp, &[1.0, 1.0], &[0.0, 2.0], &SolverConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&mut buf, &path, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "eta,nnz,variance,lambda_1,lambda_2,lambda_3");
        assert!(lines[2].starts_with("2e0,1,"));
    }
}
