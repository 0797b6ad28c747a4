//! Gaussian process latent variable models with an RBF kernel.
//!
//! The marginal likelihood of centered outputs `Y` (N x D) given latent
//! points `X` (N x q) is
//!
//! ```text
//! ln p(Y | X) = -(N D / 2) ln 2pi - (D / 2) ln |K| - 1/2 tr(K^{-1} Y Y^T)
//! ```
//!
//! with `K = s exp(-|x_i - x_j|^2 / (2 l^2)) + sigma2 I`. Everything beyond
//! `Y Y^T` is N x N, so fitting cost does not grow with the image size.

mod hierarchy;
mod vocabulary;

pub use hierarchy::{
    export_latents_csv, fit_flat, fit_hierarchical, FlatModel, HierarchicalModel, HierarchicalReport,
    LatentModel, LatentSpaceModel,
};
pub use vocabulary::{
    bounding_box, entropy, latent_points, posterior_over_latents, sample_vocabulary, PosteriorWeighting,
    Vocabulary, VocabularyEntry, VocabularyStrategy,
};

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::ExpressionLabel;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, gram_pca, log_det};
use crate::modelio;

/// Jitter escalation used whenever `K` is factorized.
pub const KERNEL_JITTERS: [f64; 2] = [1e-8, 1e-6];
/// Box constraint on the log hyperparameters, `[ln 1e-8, ln 1e4]`.
pub const LOG_PARAM_RANGE: (f64, f64) = (-18.420680743952367, 9.210340371976184);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernelParams {
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
}

impl RbfKernelParams {
    pub fn new(signal_variance: f64, lengthscale: f64, noise_variance: f64) -> Result<Self> {
        let p = Self {
            signal_variance,
            lengthscale,
            noise_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("signal_variance", self.signal_variance),
            ("lengthscale", self.lengthscale),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be finite and positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `[ln s, ln l, ln sigma2]`.
    pub fn to_log(&self) -> [f64; 3] {
        [self.signal_variance.ln(), self.lengthscale.ln(), self.noise_variance.ln()]
    }

    pub fn from_log(v: [f64; 3]) -> Self {
        Self {
            signal_variance: v[0].exp(),
            lengthscale: v[1].exp(),
            noise_variance: v[2].exp(),
        }
    }

    /// Noise-free covariance between two latent points.
    pub fn covariance(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        self.signal_variance * (-r2 / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Noise-free kernel matrix over the rows of `x`.
pub fn kernel_matrix(x: &DMatrix<f64>, params: &RbfKernelParams) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(x, i)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in 0..i {
            let v = params.covariance(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `K_f + sigma2 I`.
pub fn kernel_with_noise(x: &DMatrix<f64>, params: &RbfKernelParams) -> DMatrix<f64> {
    let mut k = kernel_matrix(x, params);
    for i in 0..k.nrows() {
        k[(i, i)] += params.noise_variance;
    }
    k
}

/// Gradient of the log marginal likelihood.
#[derive(Clone, Debug)]
pub struct Gradient {
    /// N x q, with respect to the latent coordinates.
    pub latent: DMatrix<f64>,
    /// With respect to `[ln s, ln l, ln sigma2]`.
    pub log_params: [f64; 3],
}

fn evaluate(
    x: &DMatrix<f64>,
    yyt: &DMatrix<f64>,
    d: usize,
    params: &RbfKernelParams,
    want_gradient: bool,
) -> Result<(f64, Option<Gradient>)> {
    let n = x.nrows();
    let kf = kernel_matrix(x, params);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += params.noise_variance;
    }
    let (chol, _) = cholesky_with_jitter(&k, &KERNEL_JITTERS)?;
    let kinv = chol.inverse();
    let a = &kinv * yyt;
    let (nf, df) = (n as f64, d as f64);
    let value = -0.5 * nf * df * (2.0 * PI).ln() - 0.5 * df * log_det(&chol) - 0.5 * a.trace();
    if !want_gradient {
        return Ok((value, None));
    }
    let mut g = (&a * &kinv - &kinv * df) * 0.5;
    g = (&g + g.transpose()) * 0.5;
    let l2 = params.lengthscale * params.lengthscale;
    let q = x.ncols();
    let mut latent = DMatrix::zeros(n, q);
    let (mut d_s, mut d_l) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = g[(i, j)] * kf[(i, j)];
            d_s += w;
            if i == j {
                continue;
            }
            let mut r2 = 0.0;
            for c in 0..q {
                let diff = x[(i, c)] - x[(j, c)];
                r2 += diff * diff;
                latent[(i, c)] -= 2.0 * w * diff / l2;
            }
            d_l += w * r2 / l2;
        }
    }
    let d_noise = params.noise_variance * g.trace();
    Ok((
        value,
        Some(Gradient {
            latent,
            log_params: [d_s, d_l, d_noise],
        }),
    ))
}

/// Log marginal likelihood of centered outputs `y` at latent points `x`.
pub fn log_likelihood(x: &DMatrix<f64>, y: &DMatrix<f64>, params: &RbfKernelParams) -> Result<f64> {
    check_shapes(x, y)?;
    Ok(evaluate(x, &(y * y.transpose()), y.ncols(), params, false)?.0)
}

/// Log marginal likelihood and its analytic gradient.
pub fn log_likelihood_gradient(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    params: &RbfKernelParams,
) -> Result<(f64, Gradient)> {
    check_shapes(x, y)?;
    let (v, g) = evaluate(x, &(y * y.transpose()), y.ncols(), params, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn check_shapes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} latent rows", y.nrows()),
            actual: x.nrows().to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GplvmParts {
    #[serde(with = "modelio::matrix")]
    latent: DMatrix<f64>,
    #[serde(with = "modelio::matrix")]
    outputs: DMatrix<f64>,
    #[serde(with = "modelio::vector")]
    output_mean: DVector<f64>,
    kernel: RbfKernelParams,
    labels: Vec<ExpressionLabel>,
}

/// A fitted GPLVM. Outputs are stored centered; `output_mean` is re-added
/// on prediction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GplvmParts", into = "GplvmParts")]
pub struct GplvmModel {
    parts: GplvmParts,
    k_inv: DMatrix<f64>,
    alpha: DMatrix<f64>,
}

impl From<GplvmModel> for GplvmParts {
    fn from(m: GplvmModel) -> Self {
        m.parts
    }
}

impl TryFrom<GplvmParts> for GplvmModel {
    type Error = Error;

    fn try_from(parts: GplvmParts) -> Result<Self> {
        let (n, q) = parts.latent.shape();
        if n < 1 || q < 1 {
            return Err(Error::ModelFormat(format!("latent matrix must be non-empty, got {n}x{q}")));
        }
        if parts.outputs.nrows() != n || parts.output_mean.len() != parts.outputs.ncols() {
            return Err(Error::ModelFormat("output shape does not match latent points".into()));
        }
        if !parts.labels.is_empty() && parts.labels.len() != n {
            return Err(Error::ModelFormat(format!("{} labels for {n} latent points", parts.labels.len())));
        }
        if parts.latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelFormat("latent coordinates must be finite".into()));
        }
        parts.kernel.validate()?;
        let k = kernel_with_noise(&parts.latent, &parts.kernel);
        let (chol, _) = cholesky_with_jitter(&k, &KERNEL_JITTERS)?;
        let k_inv = chol.inverse();
        let alpha = &k_inv * &parts.outputs;
        Ok(Self { parts, k_inv, alpha })
    }
}

impl GplvmModel {
    pub fn from_parts(
        latent: DMatrix<f64>,
        outputs: DMatrix<f64>,
        output_mean: DVector<f64>,
        kernel: RbfKernelParams,
        labels: Vec<ExpressionLabel>,
    ) -> Result<Self> {
        GplvmParts {
            latent,
            outputs,
            output_mean,
            kernel,
            labels,
        }
        .try_into()
    }

    pub fn latent(&self) -> &DMatrix<f64> {
        &self.parts.latent
    }

    /// Centered training outputs.
    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.parts.outputs
    }

    pub fn output_mean(&self) -> &DVector<f64> {
        &self.parts.output_mean
    }

    pub fn kernel(&self) -> &RbfKernelParams {
        &self.parts.kernel
    }

    pub fn labels(&self) -> &[ExpressionLabel] {
        &self.parts.labels
    }

    pub fn latent_dim(&self) -> usize {
        self.parts.latent.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.parts.outputs.ncols()
    }

    pub fn len(&self) -> usize {
        self.parts.latent.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        log_likelihood(&self.parts.latent, &self.parts.outputs, &self.parts.kernel)
    }

    fn cross(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("latent point of dimension {}", self.latent_dim()),
                actual: x.len().to_string(),
            });
        }
        let n = self.len();
        Ok(DVector::from_iterator(
            n,
            (0..n).map(|i| self.parts.kernel.covariance(x, &row(&self.parts.latent, i))),
        ))
    }

    /// Predictive mean `mu + k(x)^T K^{-1} Y`.
    pub fn predict(&self, x: &[f64]) -> Result<DVector<f64>> {
        let k = self.cross(x)?;
        Ok(&self.parts.output_mean + self.alpha.transpose() * k)
    }

    /// Predictive variance of each output dimension, noise included.
    pub fn predict_variance(&self, x: &[f64]) -> Result<f64> {
        let k = self.cross(x)?;
        let explained = (k.transpose() * &self.k_inv * &k)[(0, 0)];
        Ok((self.parts.kernel.signal_variance - explained).max(0.0) + self.parts.kernel.noise_variance)
    }
}

#[derive(Clone, Debug)]
pub enum LatentInit {
    Pca,
    Given(DMatrix<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Maximum number of accepted ascent steps; 0 returns the initialization.
    pub max_iters: usize,
    /// Stop once an accepted step improves the objective by less than this
    /// fraction of its magnitude.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            tolerance: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_log_likelihood: f64,
    pub final_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log likelihood after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// PCA coordinates of the rows of centered `y`, standardized per column.
/// Columns beyond the data rank stay at zero; the likelihood gradient along
/// a column where all points coincide is zero, so they remain collapsed.
pub fn pca_init(y: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let n = y.nrows();
    let pca = gram_pca(y);
    let mut x = DMatrix::zeros(n, q);
    for c in 0..q {
        if c < pca.scores.ncols() {
            x.set_column(c, &pca.scores.column(c));
        }
        let mean = x.column(c).mean();
        let sd = (x.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for i in 0..n {
            x[(i, c)] = if sd > 0.0 { (x[(i, c)] - mean) / sd } else { 0.0 };
        }
    }
    x
}

fn clamp_log(v: f64) -> f64 {
    v.clamp(LOG_PARAM_RANGE.0, LOG_PARAM_RANGE.1)
}

/// Maximizes the marginal likelihood jointly over `X` and the log
/// hyperparameters by normalized gradient ascent with a backtracking step.
pub fn fit(
    y: &DMatrix<f64>,
    labels: Vec<ExpressionLabel>,
    q: usize,
    init: LatentInit,
    options: &FitOptions,
) -> Result<(GplvmModel, FitReport)> {
    let (n, d) = y.shape();
    if n < 2 {
        return Err(Error::param("training", format!("need at least 2 training rows, got {n}")));
    }
    if q == 0 || q > n {
        return Err(Error::param("q", format!("latent dimension {q} must lie in 1..={n}")));
    }
    if !labels.is_empty() && labels.len() != n {
        return Err(Error::param("labels", format!("{} labels for {n} rows", labels.len())));
    }
    let mean = DVector::from_iterator(d, (0..d).map(|j| y.column(j).mean()));
    let mut centered = y.clone();
    for mut r in centered.row_iter_mut() {
        r -= mean.transpose();
    }
    let mut x = match init {
        LatentInit::Pca => pca_init(&centered, q),
        LatentInit::Given(x) => {
            if x.shape() != (n, q) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{n}x{q} initial latents"),
                    actual: format!("{}x{}", x.nrows(), x.ncols()),
                });
            }
            x
        }
    };
    let yyt = &centered * centered.transpose();
    let per_dim_var = (yyt.trace() / (n * d.max(1)) as f64).max(1e-6);
    let mut logp = [
        clamp_log(per_dim_var.ln()),
        0.0,
        clamp_log((1e-2 * per_dim_var).ln()),
    ];

    // Optimized objective is the likelihood divided by D.
    let scale = 1.0 / d.max(1) as f64;
    let eval = |x: &DMatrix<f64>, lp: &[f64; 3], grad: bool| {
        evaluate(x, &yyt, d, &RbfKernelParams::from_log(*lp), grad)
    };
    let (mut value, mut grad) = eval(&x, &logp, true)?;
    let initial = value;
    let mut history = vec![value];
    let mut step = 0.1;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iters {
        let g = grad.take().expect("gradient available");
        let norm = (g.latent.norm_squared() + g.log_params.iter().map(|v| v * v).sum::<f64>()).sqrt() * scale;
        if norm == 0.0 || !norm.is_finite() {
            converged = true;
            break;
        }
        let mut accepted = None;
        for _ in 0..40 {
            let t = step * scale / norm;
            let x_new = &x + &g.latent * t;
            let lp_new = [
                clamp_log(logp[0] + t * g.log_params[0]),
                clamp_log(logp[1] + t * g.log_params[1]),
                clamp_log(logp[2] + t * g.log_params[2]),
            ];
            match eval(&x_new, &lp_new, false) {
                Ok((v, _)) if v > value => {
                    accepted = Some((x_new, lp_new, v));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((x_new, lp_new, v)) = accepted else {
            converged = true;
            break;
        };
        let improvement = (v - value) / value.abs().max(1e-300);
        x = x_new;
        logp = lp_new;
        value = v;
        history.push(v);
        iterations += 1;
        step *= 1.5;
        if improvement < options.tolerance {
            converged = true;
            break;
        }
        grad = eval(&x, &logp, true)?.1;
    }
    let model = GplvmModel::from_parts(x, centered, mean, RbfKernelParams::from_log(logp), labels)?;
    let report = FitReport {
        initial_log_likelihood: initial,
        final_log_likelihood: value,
        iterations,
        converged,
        history,
    };
    Ok((model, report))
}
