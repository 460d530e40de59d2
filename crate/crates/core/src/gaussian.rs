//! Multivariate Gaussian numerics: densities, sampling, regularized moment
//! fits and Normal-Inverse-Wishart marginal likelihoods.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Default covariance shrinkage, relative to the mean per-dimension variance.
pub const DEFAULT_SHRINKAGE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Full,
    Diagonal,
}

impl CovMode {
    /// Full covariance once there are at least `2d` (effective) points.
    pub fn auto(count: f64, dim: usize) -> CovMode {
        if count >= 2.0 * dim as f64 {
            CovMode::Full
        } else {
            CovMode::Diagonal
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Covariance {
    pub fn mode(&self) -> CovMode {
        match self {
            Covariance::Full(_) => CovMode::Full,
            Covariance::Diagonal(_) => CovMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.nrows(),
            Covariance::Diagonal(v) => v.len(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Covariance::Full(m) => m.trace(),
            Covariance::Diagonal(v) => v.sum(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(v),
        }
    }

    fn add_ridge(&mut self, ridge: f64) {
        match self {
            Covariance::Full(m) => {
                for i in 0..m.nrows() {
                    m[(i, i)] += ridge;
                }
            }
            Covariance::Diagonal(v) => v.add_scalar_mut(ridge),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Factor {
    Lower(DMatrix<f64>),
    Sqrt(DVector<f64>),
}

/// Lower Cholesky factor and log-determinant, or `None` when not PD.
fn factorize(cov: &Covariance) -> Option<(Factor, f64)> {
    match cov {
        Covariance::Full(m) => {
            let l = m.clone().cholesky()?.unpack();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_det.is_finite().then_some((Factor::Lower(l), log_det))
        }
        Covariance::Diagonal(v) => {
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return None;
            }
            let log_det = v.iter().map(|x| x.ln()).sum();
            Some((Factor::Sqrt(v.map(f64::sqrt)), log_det))
        }
    }
}

/// One weighted Gaussian (sub)cluster with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    cov: Covariance,
    weight: f64,
    factor: Factor,
    log_det: f64,
    /// Ridge added on top of the supplied covariance to make it PD.
    jitter: f64,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: Covariance, weight: f64) -> Result<Self> {
        if mean.is_empty() || mean.len() != cov.dim() {
            return Err(Error::contract(format!(
                "mean has dim {}, covariance has dim {}",
                mean.len(),
                cov.dim()
            )));
        }
        check_weight(weight)?;
        let cov = match cov {
            Covariance::Full(m) => {
                let asym = (&m - m.transpose()).amax();
                if !(asym <= 1e-9 * m.amax().max(1.0)) {
                    return Err(Error::contract(format!(
                        "covariance is not symmetric (max asymmetry {asym:e})"
                    )));
                }
                Covariance::Full((&m + m.transpose()) * 0.5)
            }
            diag => diag,
        };
        let (factor, log_det) = factorize(&cov)
            .ok_or_else(|| Error::contract("covariance is not positive definite"))?;
        Ok(GaussianComponent {
            mean,
            cov,
            weight,
            factor,
            log_det,
            jitter: 0.0,
        })
    }

    /// Like [`GaussianComponent::new`], but adds a growing ridge until the
    /// covariance factors.
    fn new_regularized(mean: DVector<f64>, mut cov: Covariance, scale: f64) -> Self {
        let mut ridge = 0.0;
        let mut step = 1e-12 * scale;
        loop {
            if let Some((factor, log_det)) = factorize(&cov) {
                return GaussianComponent {
                    mean,
                    cov,
                    weight: 1.0,
                    factor,
                    log_det,
                    jitter: ridge,
                };
            }
            cov.add_ridge(step);
            ridge += step;
            step *= 10.0;
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Result<Self> {
        check_weight(weight)?;
        self.weight = weight;
        Ok(self)
    }

    pub(crate) fn set_weight_unchecked(&mut self, weight: f64) {
        self.weight = weight;
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn mode(&self) -> CovMode {
        self.cov.mode()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Dense lower-triangular factor `L` with `L Lᵀ = Σ`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        match &self.factor {
            Factor::Lower(l) => l.clone(),
            Factor::Sqrt(s) => DMatrix::from_diagonal(s),
        }
    }

    /// Squared Mahalanobis distance of `x` to the mean.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.mahalanobis_sq_unchecked(x))
    }

    pub(crate) fn mahalanobis_sq_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        match &self.factor {
            Factor::Lower(l) => {
                // forward substitution L z = x - mean
                let mut z = vec![0.0; d];
                let mut acc = 0.0;
                for i in 0..d {
                    let mut s = x[i] - self.mean[i];
                    for (j, zj) in z.iter().enumerate().take(i) {
                        s -= l[(i, j)] * zj;
                    }
                    z[i] = s / l[(i, i)];
                    acc += z[i] * z[i];
                }
                acc
            }
            Factor::Sqrt(s) => (0..d)
                .map(|i| {
                    let z = (x[i] - self.mean[i]) / s[i];
                    z * z
                })
                .sum(),
        }
    }

    /// `log N(x; mean, cov)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * LN_2PI + self.log_det + self.mahalanobis_sq_unchecked(x))
    }

    /// Log-density of the density level at squared Mahalanobis radius `m2`.
    pub fn log_density_at_radius_sq(&self, m2: f64) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + m2)
    }

    /// Draws `n` vectors as `mean + L z`, `z ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        let d = self.dim();
        (0..n)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let lz = match &self.factor {
                    Factor::Lower(l) => l.lower_triangle() * z,
                    Factor::Sqrt(s) => s.component_mul(&z),
                };
                &self.mean + lz
            })
            .collect()
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::contract(format!(
                "vector has dim {n}, component has dim {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

fn check_weight(weight: f64) -> Result<()> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::contract(format!("weight {weight} outside (0, 1]")));
    }
    Ok(())
}

/// Free-function form of [`GaussianComponent::log_density`].
pub fn log_density(x: &[f64], g: &GaussianComponent) -> Result<f64> {
    g.log_density(x)
}

/// Weighted mean and scatter with shrinkage `gamma * (trace / d) * I`.
///
/// When the scatter trace is zero (a single point, or identical points) the
/// shrinkage scale falls back to 1, so the result is `gamma * I`. The returned
/// component has weight 1.
pub fn fit_moments(
    points: &[DVector<f64>],
    weights: &[f64],
    mode: CovMode,
    gamma: f64,
) -> Result<GaussianComponent> {
    if points.len() != weights.len() {
        return Err(Error::contract(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::contract("weights must be finite and nonnegative"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::contract(format!("shrinkage {gamma} is negative")));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("weights sum to zero"));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::contract("points have inconsistent dimensions"));
    }
    let mut mean = DVector::zeros(d);
    for (p, &w) in points.iter().zip(weights) {
        if w > 0.0 {
            mean.axpy(w, p, 1.0);
        }
    }
    mean /= total;
    let mut cov = match mode {
        CovMode::Full => {
            let mut scatter = DMatrix::zeros(d, d);
            let mut diff = DVector::zeros(d);
            for (p, &w) in points.iter().zip(weights) {
                if w > 0.0 {
                    diff.copy_from(p);
                    diff -= &mean;
                    scatter.ger(w / total, &diff, &diff, 1.0);
                }
            }
            Covariance::Full((&scatter + scatter.transpose()) * 0.5)
        }
        CovMode::Diagonal => {
            let mut var = DVector::zeros(d);
            for (p, &w) in points.iter().zip(weights) {
                if w > 0.0 {
                    for i in 0..d {
                        let z = p[i] - mean[i];
                        var[i] += w / total * z * z;
                    }
                }
            }
            Covariance::Diagonal(var)
        }
    };
    let mean_var = cov.trace() / d as f64;
    let scale = if mean_var > f64::MIN_POSITIVE {
        mean_var
    } else {
        1.0
    };
    cov.add_ridge(gamma * scale);
    Ok(GaussianComponent::new_regularized(mean, cov, scale))
}

/// Normal-Inverse-Wishart prior over a Gaussian's mean and covariance.
///
/// In diagonal mode `psi0` is diagonal and the marginal likelihood factorizes
/// into independent one-dimensional Normal-Inverse-χ² terms sharing `kappa0`
/// and `nu0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior {
    kappa0: f64,
    nu0: f64,
    mu0: DVector<f64>,
    psi0: Covariance,
    psi0_log_det: f64,
}

impl NiwPrior {
    pub fn new(kappa0: f64, nu0: f64, mu0: DVector<f64>, psi0: Covariance) -> Result<Self> {
        let d = mu0.len();
        if d == 0 || psi0.dim() != d {
            return Err(Error::contract("prior mean and scale dimensions differ"));
        }
        if !(kappa0 > 0.0) {
            return Err(Error::contract(format!("kappa0 {kappa0} must be positive")));
        }
        let min_nu = match psi0.mode() {
            CovMode::Full => d as f64 - 1.0,
            CovMode::Diagonal => 0.0,
        };
        if !(nu0 > min_nu) {
            return Err(Error::contract(format!("nu0 {nu0} must exceed {min_nu}")));
        }
        let (_, psi0_log_det) =
            factorize(&psi0).ok_or_else(|| Error::contract("psi0 is not positive definite"))?;
        Ok(NiwPrior {
            kappa0,
            nu0,
            mu0,
            psi0,
            psi0_log_det,
        })
    }

    /// Weak data-centred prior: `kappa0 = 1`, `mu0` = sample mean,
    /// `psi0 = v I` with `v` the mean per-dimension variance, and
    /// `nu0 = d + 2` (full) or `3` (each one-dimensional diagonal factor).
    pub fn weak_default(points: &[DVector<f64>], mode: CovMode) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("weak prior needs at least one point"));
        }
        let d = points[0].len();
        let n = points.len() as f64;
        let mut mean = DVector::zeros(d);
        for p in points {
            mean += p;
        }
        mean /= n;
        let mut var = 0.0;
        for p in points {
            var += (p - &mean).norm_squared();
        }
        var /= n * d as f64;
        if !(var > f64::MIN_POSITIVE) {
            var = 1.0;
        }
        let (nu0, psi0) = match mode {
            CovMode::Full => (
                d as f64 + 2.0,
                Covariance::Full(DMatrix::from_diagonal_element(d, d, var)),
            ),
            CovMode::Diagonal => (3.0, Covariance::Diagonal(DVector::from_element(d, var))),
        };
        NiwPrior::new(1.0, nu0, mean, psi0)
    }

    pub fn kappa0(&self) -> f64 {
        self.kappa0
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn mu0(&self) -> &DVector<f64> {
        &self.mu0
    }

    pub fn psi0(&self) -> &Covariance {
        &self.psi0
    }

    pub fn mode(&self) -> CovMode {
        self.psi0.mode()
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// Same prior with `mu0` shifted by `offset`.
    pub fn translated(&self, offset: &DVector<f64>) -> NiwPrior {
        NiwPrior {
            mu0: &self.mu0 + offset,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NiwMarginal {
    pub log_marginal: f64,
    /// Set when the posterior scale failed to factor and a ridge was added.
    pub regularized: bool,
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Log marginal likelihood of `points` under `prior`.
///
/// Points are accumulated in lexicographic order, so the value is
/// bit-for-bit invariant to the order in which they are supplied.
pub fn niw_log_marginal(points: &[&DVector<f64>], prior: &NiwPrior) -> Result<NiwMarginal> {
    if points.is_empty() {
        return Err(Error::contract(
            "marginal likelihood needs at least one point",
        ));
    }
    let d = prior.dim();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::contract("point and prior dimensions differ"));
    }
    let mut sorted: Vec<&DVector<f64>> = points.to_vec();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    let n = sorted.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in &sorted {
        mean += *p;
    }
    mean /= n;
    let kappa_n = prior.kappa0 + n;
    let nu_n = prior.nu0 + n;
    let shift = &mean - &prior.mu0;
    let shrink = prior.kappa0 * n / kappa_n;

    match &prior.psi0 {
        Covariance::Full(psi0) => {
            let mut psi_n = psi0.clone();
            let mut diff = DVector::zeros(d);
            for p in &sorted {
                diff.copy_from(*p);
                diff -= &mean;
                psi_n.ger(1.0, &diff, &diff, 1.0);
            }
            psi_n.ger(shrink, &shift, &shift, 1.0);
            let psi_n = (&psi_n + psi_n.transpose()) * 0.5;
            let mut cov = Covariance::Full(psi_n);
            let mut regularized = false;
            let log_det_n = loop {
                if let Some((_, ld)) = factorize(&cov) {
                    break ld;
                }
                let scale = (cov.trace() / d as f64).abs().max(1.0);
                cov.add_ridge(DEFAULT_SHRINKAGE * scale);
                regularized = true;
            };
            let log_marginal = -(n * d as f64 / 2.0) * LN_PI + ln_multigamma(d, nu_n / 2.0)
                - ln_multigamma(d, prior.nu0 / 2.0)
                + prior.nu0 / 2.0 * prior.psi0_log_det
                - nu_n / 2.0 * log_det_n
                + d as f64 / 2.0 * (prior.kappa0.ln() - kappa_n.ln());
            Ok(NiwMarginal {
                log_marginal,
                regularized,
            })
        }
        Covariance::Diagonal(psi0) => {
            let mut total = 0.0;
            let mut regularized = false;
            let common = -(n / 2.0) * LN_PI + ln_gamma_unchecked(nu_n / 2.0)
                - ln_gamma_unchecked(prior.nu0 / 2.0)
                + 0.5 * (prior.kappa0.ln() - kappa_n.ln());
            for i in 0..d {
                let mut scatter = 0.0;
                for p in &sorted {
                    let z = p[i] - mean[i];
                    scatter += z * z;
                }
                let mut psi_n = psi0[i] + scatter + shrink * shift[i] * shift[i];
                if !(psi_n > 0.0) || !psi_n.is_finite() {
                    psi_n = psi_n.max(0.0) + DEFAULT_SHRINKAGE * psi0[i].max(1.0);
                    regularized = true;
                }
                total += common + prior.nu0 / 2.0 * psi0[i].ln() - nu_n / 2.0 * psi_n.ln();
            }
            Ok(NiwMarginal {
                log_marginal: total,
                regularized,
            })
        }
    }
}

fn ln_multigamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * LN_PI
        + (0..d)
            .map(|j| ln_gamma_unchecked(a - j as f64 / 2.0))
            .sum::<f64>()
}

/// `ln Γ(x)` for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::contract(format!("log_gamma needs x > 0, got {x}")));
    }
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(x: f64) -> f64 {
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    // Shift into the Stirling regime with Γ(x + n) = Γ(x) · x (x+1) ⋯ (x+n-1).
    const SHIFT_TO: f64 = 15.0;
    let mut z = x;
    let mut prod = 1.0;
    while z < SHIFT_TO {
        prod *= z;
        z += 1.0;
    }
    stirling_ln_gamma(z) - prod.ln()
}

fn stirling_ln_gamma(z: f64) -> f64 {
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
    ];
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for c in C.iter().rev() {
        series = series * inv2 + c;
    }
    (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + series * inv
}
