//! Identity transcoding through a shared linear-Gaussian latent space.
//!
//! Two interchangeable paths implement [`Transcode`]:
//!
//! * [`FactorModel`]: per-region PCA of the observer's own expressions. An
//!   actor region is projected onto the observer basis and reconstructed
//!   around the observer mean, which keeps the expression and swaps the
//!   identity.
//! * [`JointModel`]: the full latent factor regression. Actor and observer
//!   share `z ~ N(0, I)`, so `(y_act, y_obs)` is jointly Gaussian with
//!   covariance `Phi + W W^T`, and transcoding draws from the Gaussian
//!   conditional of `y_obs` given `y_act`.
//!
//! For image-sized regions the conditional is evaluated in its low-rank form
//! (`Sigma_a^{-1}` through the L x L capacitance matrix). The dense
//! Schur-complement form is available through [`condition_on_actor`] and is
//! used to cross-check the low-rank path on small instances.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, ExpressionLabel, ExpressionSet, IdentityId};
use crate::error::{Error, Result};
use crate::imagecore::{assemble_regions, FaceImage, RegionPartition, SsimEngine, SsimParams};
use crate::linalg::{gram_pca, rows_to_matrix};
use crate::modelio::{self, ModelFile};

/// Lower bound for estimated isotropic noise variances.
pub const NOISE_FLOOR: f64 = 1e-8;
/// Diagonal jitter added to `Sigma_a` before factorization.
pub const ACTOR_JITTER: f64 = 1e-8;
/// Most negative eigenvalue tolerated in a conditional covariance.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TranscodeMode {
    Mean,
    Sample { seed: u64 },
}

pub trait Transcode {
    fn partition(&self) -> &RegionPartition;

    /// Moves `y_act` into the observer's identity, region by region.
    fn transcode(&self, y_act: &FaceImage, mode: TranscodeMode) -> Result<FaceImage>;
}

fn region_vectors(images: &[&FaceImage], partition: &RegionPartition) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(images.len()); partition.regions().len()];
    for img in images {
        img.check_dims(partition.dims())?;
        for (slot, region) in out.iter_mut().zip(partition.regions()) {
            slot.push(region.indices().iter().map(|&i| img.pixels()[i]).collect());
        }
    }
    Ok(out)
}

fn region_input(img: &FaceImage, indices: &[usize]) -> DVector<f64> {
    DVector::from_iterator(indices.len(), indices.iter().map(|&i| img.pixels()[i]))
}

fn check_latent_dim(latent_dim: usize, samples: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::param("training", format!("need at least 2 training images, got {samples}")));
    }
    if latent_dim == 0 || latent_dim > samples - 1 {
        return Err(Error::param(
            "latent_dim",
            format!("L = {latent_dim} must lie in 1..={} for {samples} training images", samples - 1),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PCA path

/// Observer-side factor loadings for one region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFactor {
    pub name: String,
    #[serde(with = "modelio::vector")]
    pub mean: DVector<f64>,
    /// D_r x L, orthogonal columns scaled by the component standard deviations.
    #[serde(with = "modelio::matrix")]
    pub loadings: DMatrix<f64>,
    pub noise_variance: f64,
}

impl RegionFactor {
    pub fn latent_dim(&self) -> usize {
        self.loadings.ncols()
    }

    /// Least-squares latent coordinates of `y`.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        if self.latent_dim() == 0 {
            return DVector::zeros(0);
        }
        let gram = self.loadings.transpose() * &self.loadings;
        let rhs = self.loadings.transpose() * (y - &self.mean);
        match Cholesky::new(gram) {
            Some(c) => c.solve(&rhs),
            None => DVector::zeros(self.latent_dim()),
        }
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean + &self.loadings * z
    }
}

/// Per-region PCA of the observer's training expressions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    partition: RegionPartition,
    regions: Vec<RegionFactor>,
    #[serde(default)]
    warnings: Vec<String>,
}

impl FactorModel {
    pub fn regions(&self) -> &[RegionFactor] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<&RegionFactor> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    /// Rank reductions applied during fitting.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

pub fn fit_pca(training: &ExpressionSet, partition: &RegionPartition, latent_dim: usize) -> Result<FactorModel> {
    let images: Vec<&FaceImage> = training.values().collect();
    fit_pca_images(&images, partition, latent_dim)
}

pub fn fit_pca_images(
    images: &[&FaceImage],
    partition: &RegionPartition,
    latent_dim: usize,
) -> Result<FactorModel> {
    check_latent_dim(latent_dim, images.len())?;
    let vectors = region_vectors(images, partition)?;
    let mut regions = Vec::with_capacity(vectors.len());
    let mut warnings = Vec::new();
    for (region, rows) in partition.regions().iter().zip(&vectors) {
        let pca = gram_pca(&rows_to_matrix(rows));
        let usable = pca.directions.ncols();
        let l = latent_dim.min(usable);
        if l < latent_dim {
            let msg = format!(
                "region `{}`: rank {usable} < requested L = {latent_dim}; using L = {l}",
                region.name()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut loadings = pca.directions.columns(0, l).into_owned();
        for k in 0..l {
            loadings.column_mut(k).scale_mut(pca.eigenvalues[k].sqrt());
        }
        let d = region.len();
        let discarded: f64 = pca.eigenvalues.iter().skip(l).sum();
        let noise_variance = if d > l {
            (discarded / (d - l) as f64).max(NOISE_FLOOR)
        } else {
            NOISE_FLOOR
        };
        regions.push(RegionFactor {
            name: region.name().to_string(),
            mean: pca.mean,
            loadings,
            noise_variance,
        });
    }
    Ok(FactorModel {
        partition: partition.clone(),
        regions,
        warnings,
    })
}

impl Transcode for FactorModel {
    fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    fn transcode(&self, y_act: &FaceImage, mode: TranscodeMode) -> Result<FaceImage> {
        y_act.check_dims(self.partition.dims())?;
        let mut rng = match mode {
            TranscodeMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            TranscodeMode::Mean => None,
        };
        let mut parts = BTreeMap::new();
        for (region, factor) in self.partition.regions().iter().zip(&self.regions) {
            let y = region_input(y_act, region.indices());
            let mut out = factor.reconstruct(&factor.project(&y));
            if let Some(rng) = rng.as_mut() {
                let sd = factor.noise_variance.sqrt();
                for v in out.iter_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += sd * e;
                }
            }
            parts.insert(region.name().to_string(), out.as_slice().to_vec());
        }
        assemble_regions(&parts, &self.partition)
    }
}

// ---------------------------------------------------------------------------
// Joint latent factor regression

/// Dense blocks of the joint covariance `[[a, c], [c^T, b]]`.
#[derive(Clone, Debug)]
pub struct CovarianceBlocks {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl CovarianceBlocks {
    pub fn assemble(&self) -> DMatrix<f64> {
        let (da, db) = (self.a.nrows(), self.b.nrows());
        let mut full = DMatrix::zeros(da + db, da + db);
        full.view_mut((0, 0), (da, da)).copy_from(&self.a);
        full.view_mut((da, da), (db, db)).copy_from(&self.b);
        full.view_mut((0, da), (da, db)).copy_from(&self.c);
        full.view_mut((da, 0), (db, da)).copy_from(&self.c.transpose());
        full
    }
}

#[derive(Clone, Debug)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Gaussian conditional of the second block given the first:
/// `mean = mu_b + c^T a^{-1} (y - mu_a)`, `cov = b - c^T a^{-1} c`.
///
/// `a` is factorized with [`ACTOR_JITTER`] on its diagonal; a failed
/// factorization or a conditional covariance with an eigenvalue below
/// `-PSD_TOLERANCE` is an error.
pub fn condition_on_actor(
    blocks: &CovarianceBlocks,
    mean_actor: &DVector<f64>,
    mean_observer: &DVector<f64>,
    y_act: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    let n = blocks.a.nrows();
    let jittered = &blocks.a + DMatrix::<f64>::identity(n, n) * ACTOR_JITTER;
    let chol = Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite { jitter: ACTOR_JITTER })?;
    let gain = chol.solve(&blocks.c); // a^{-1} c
    let mean = mean_observer + gain.transpose() * (y_act - mean_actor);
    let mut covariance = &blocks.b - blocks.c.transpose() * &gain;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let min_eigenvalue = SymmetricEigen::new(covariance.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -PSD_TOLERANCE {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue });
    }
    Ok(ConditionalGaussian { mean, covariance })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct JointRegionParts {
    name: String,
    #[serde(with = "modelio::vector")]
    mean_actor: DVector<f64>,
    #[serde(with = "modelio::vector")]
    mean_observer: DVector<f64>,
    #[serde(with = "modelio::matrix")]
    loadings_actor: DMatrix<f64>,
    #[serde(with = "modelio::matrix")]
    loadings_observer: DMatrix<f64>,
    noise_actor: f64,
    noise_observer: f64,
}

/// Joint actor/observer factor model for one region.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "JointRegionParts", into = "JointRegionParts")]
pub struct JointRegion {
    parts: JointRegionParts,
    // (s I + W_a^T W_a)^{-1} with s = noise_actor + ACTOR_JITTER.
    capacitance_inv: DMatrix<f64>,
    // Cholesky factor of s * capacitance_inv, for sampling.
    sample_factor: DMatrix<f64>,
}

impl From<JointRegion> for JointRegionParts {
    fn from(r: JointRegion) -> Self {
        r.parts
    }
}

impl TryFrom<JointRegionParts> for JointRegion {
    type Error = Error;

    fn try_from(parts: JointRegionParts) -> Result<Self> {
        let (da, l) = parts.loadings_actor.shape();
        if parts.mean_actor.len() != da
            || parts.loadings_observer.ncols() != l
            || parts.mean_observer.len() != parts.loadings_observer.nrows()
        {
            return Err(Error::ModelFormat(format!(
                "joint region `{}` has inconsistent shapes",
                parts.name
            )));
        }
        if !(parts.noise_actor > 0.0) || !(parts.noise_observer > 0.0) {
            return Err(Error::ModelFormat(format!(
                "joint region `{}` needs positive noise variances",
                parts.name
            )));
        }
        let s = parts.noise_actor + ACTOR_JITTER;
        let cap = DMatrix::<f64>::identity(l, l) * s + parts.loadings_actor.transpose() * &parts.loadings_actor;
        let chol = Cholesky::new(cap).ok_or(Error::NotPositiveDefinite { jitter: ACTOR_JITTER })?;
        let capacitance_inv = chol.inverse();
        let scaled = (&capacitance_inv + capacitance_inv.transpose()) * (0.5 * s);
        let sample_factor = if l == 0 {
            DMatrix::zeros(0, 0)
        } else {
            Cholesky::new(scaled)
                .ok_or(Error::NotPositiveDefinite { jitter: ACTOR_JITTER })?
                .unpack()
        };
        Ok(Self {
            parts,
            capacitance_inv,
            sample_factor,
        })
    }
}

impl JointRegion {
    pub fn from_parts(
        name: &str,
        mean_actor: DVector<f64>,
        mean_observer: DVector<f64>,
        loadings_actor: DMatrix<f64>,
        loadings_observer: DMatrix<f64>,
        noise_actor: f64,
        noise_observer: f64,
    ) -> Result<Self> {
        JointRegionParts {
            name: name.to_string(),
            mean_actor,
            mean_observer,
            loadings_actor,
            loadings_observer,
            noise_actor,
            noise_observer,
        }
        .try_into()
    }

    pub fn name(&self) -> &str {
        &self.parts.name
    }

    pub fn latent_dim(&self) -> usize {
        self.parts.loadings_actor.ncols()
    }

    pub fn mean_actor(&self) -> &DVector<f64> {
        &self.parts.mean_actor
    }

    pub fn mean_observer(&self) -> &DVector<f64> {
        &self.parts.mean_observer
    }

    pub fn loadings_actor(&self) -> &DMatrix<f64> {
        &self.parts.loadings_actor
    }

    pub fn loadings_observer(&self) -> &DMatrix<f64> {
        &self.parts.loadings_observer
    }

    pub fn noise_actor(&self) -> f64 {
        self.parts.noise_actor
    }

    pub fn noise_observer(&self) -> f64 {
        self.parts.noise_observer
    }

    /// Stacked loadings `W = [W_act; W_obs]`.
    pub fn stacked_loadings(&self) -> DMatrix<f64> {
        let p = &self.parts;
        let (da, dobs) = (p.loadings_actor.nrows(), p.loadings_observer.nrows());
        let mut w = DMatrix::zeros(da + dobs, self.latent_dim());
        w.view_mut((0, 0), (da, self.latent_dim())).copy_from(&p.loadings_actor);
        w.view_mut((da, 0), (dobs, self.latent_dim())).copy_from(&p.loadings_observer);
        w
    }

    /// Dense blocks of `Phi + W W^T`. Quadratic in the region size.
    pub fn covariance_blocks(&self) -> CovarianceBlocks {
        let p = &self.parts;
        let (wa, wo) = (&p.loadings_actor, &p.loadings_observer);
        let (da, dobs) = (wa.nrows(), wo.nrows());
        CovarianceBlocks {
            a: DMatrix::<f64>::identity(da, da) * p.noise_actor + wa * wa.transpose(),
            b: DMatrix::<f64>::identity(dobs, dobs) * p.noise_observer + wo * wo.transpose(),
            c: wa * wo.transpose(),
        }
    }

    /// Conditional mean of the observer region via the capacitance matrix.
    pub fn conditional_mean(&self, y_act: &DVector<f64>) -> DVector<f64> {
        let p = &self.parts;
        let coeff = &self.capacitance_inv * (p.loadings_actor.transpose() * (y_act - &p.mean_actor));
        &p.mean_observer + &p.loadings_observer * coeff
    }

    /// Conditional covariance `sigma2_obs I + s W_obs M^{-1} W_obs^T` as a dense matrix.
    pub fn conditional_covariance(&self) -> DMatrix<f64> {
        let p = &self.parts;
        let d = p.loadings_observer.nrows();
        let f = &p.loadings_observer * &self.sample_factor;
        DMatrix::<f64>::identity(d, d) * p.noise_observer + &f * f.transpose()
    }

    /// Dense Schur-complement conditional, for small regions.
    pub fn conditional_dense(&self, y_act: &DVector<f64>) -> Result<ConditionalGaussian> {
        condition_on_actor(
            &self.covariance_blocks(),
            &self.parts.mean_actor,
            &self.parts.mean_observer,
            y_act,
        )
    }

    /// One draw from the conditional, without clamping.
    pub fn sample(&self, y_act: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let p = &self.parts;
        let mut out = self.conditional_mean(y_act);
        let l = self.latent_dim();
        if l > 0 {
            let e = DVector::from_iterator(l, (0..l).map(|_| StandardNormal.sample(&mut *rng)));
            out += &p.loadings_observer * (&self.sample_factor * e);
        }
        let sd = p.noise_observer.sqrt();
        for v in out.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut *rng);
            *v += sd * e;
        }
        out
    }
}

/// Per-region joint actor/observer model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointModel {
    partition: RegionPartition,
    regions: Vec<JointRegion>,
    #[serde(default)]
    warnings: Vec<String>,
}

impl JointModel {
    pub fn from_regions(partition: RegionPartition, regions: Vec<JointRegion>) -> Result<Self> {
        let model = Self {
            partition,
            regions,
            warnings: Vec::new(),
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.regions.len() != self.partition.regions().len() {
            return Err(Error::ModelFormat("region count differs from partition".into()));
        }
        for (r, j) in self.partition.regions().iter().zip(&self.regions) {
            if r.name() != j.name()
                || j.mean_actor().len() != r.len()
                || j.mean_observer().len() != r.len()
            {
                return Err(Error::ModelFormat(format!("joint region `{}` does not match partition", j.name())));
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> &[JointRegion] {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<&JointRegion> {
        self.regions
            .iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| Error::UnknownRegion(name.to_string()))
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Fits the joint model from one actor and the observer, paired by label.
pub fn fit_joint(
    training_actor: &ExpressionSet,
    training_observer: &ExpressionSet,
    partition: &RegionPartition,
    latent_dim: usize,
) -> Result<JointModel> {
    if !training_actor.keys().eq(training_observer.keys()) {
        return Err(Error::LabelMismatch);
    }
    let pairs: Vec<(&FaceImage, &FaceImage)> = training_actor
        .iter()
        .map(|(label, a)| (a, &training_observer[label]))
        .collect();
    fit_joint_pairs(&pairs, partition, latent_dim)
}

/// Fits the joint model from arbitrary (actor, observer) pairs showing the
/// same expression: PCA on stacked `[y_act; y_obs]` vectors, rows split into
/// `W_act` and `W_obs`, noise per side from the rank-L residuals.
pub fn fit_joint_pairs(
    pairs: &[(&FaceImage, &FaceImage)],
    partition: &RegionPartition,
    latent_dim: usize,
) -> Result<JointModel> {
    check_latent_dim(latent_dim, pairs.len())?;
    let actors: Vec<&FaceImage> = pairs.iter().map(|p| p.0).collect();
    let observers: Vec<&FaceImage> = pairs.iter().map(|p| p.1).collect();
    let va = region_vectors(&actors, partition)?;
    let vo = region_vectors(&observers, partition)?;
    let mut regions = Vec::new();
    let mut warnings = Vec::new();
    for (ri, region) in partition.regions().iter().enumerate() {
        let d = region.len();
        let stacked: Vec<Vec<f64>> = va[ri]
            .iter()
            .zip(&vo[ri])
            .map(|(a, o)| a.iter().chain(o).copied().collect())
            .collect();
        let pca = gram_pca(&rows_to_matrix(&stacked));
        let usable = pca.directions.ncols();
        let l = latent_dim.min(usable);
        if l < latent_dim {
            let msg = format!(
                "region `{}`: joint rank {usable} < requested L = {latent_dim}; using L = {l}",
                region.name()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut w = pca.directions.columns(0, l).into_owned();
        for k in 0..l {
            w.column_mut(k).scale_mut(pca.eigenvalues[k].sqrt());
        }
        // scores / sqrt(lambda) are the latent coordinates of each training pair
        let mut residual = [0.0f64; 2];
        for (i, row) in stacked.iter().enumerate() {
            for j in 0..2 * d {
                let mut fit = pca.mean[j];
                for k in 0..l {
                    fit += w[(j, k)] * pca.scores[(i, k)] / pca.eigenvalues[k].sqrt();
                }
                residual[j / d] += (row[j] - fit).powi(2);
            }
        }
        let denom = (pairs.len() * d) as f64;
        let noise = |r: f64| (r / denom).max(NOISE_FLOOR);
        regions.push(JointRegion::from_parts(
            region.name(),
            pca.mean.rows(0, d).into_owned(),
            pca.mean.rows(d, d).into_owned(),
            w.rows(0, d).into_owned(),
            w.rows(d, d).into_owned(),
            noise(residual[0]),
            noise(residual[1]),
        )?);
    }
    Ok(JointModel {
        partition: partition.clone(),
        regions,
        warnings,
    })
}

impl Transcode for JointModel {
    fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    fn transcode(&self, y_act: &FaceImage, mode: TranscodeMode) -> Result<FaceImage> {
        y_act.check_dims(self.partition.dims())?;
        let mut rng = match mode {
            TranscodeMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            TranscodeMode::Mean => None,
        };
        let mut parts = BTreeMap::new();
        for (region, joint) in self.partition.regions().iter().zip(&self.regions) {
            let y = region_input(y_act, region.indices());
            let out = match rng.as_mut() {
                Some(rng) => joint.sample(&y, rng),
                None => joint.conditional_mean(&y),
            };
            parts.insert(region.name().to_string(), out.as_slice().to_vec());
        }
        assemble_regions(&parts, &self.partition)
    }
}

// ---------------------------------------------------------------------------
// Serializable wrapper

/// Either transcoding path, as persisted to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum Transcoder {
    Pca(FactorModel),
    Joint(JointModel),
}

impl Transcode for Transcoder {
    fn partition(&self) -> &RegionPartition {
        match self {
            Transcoder::Pca(m) => m.partition(),
            Transcoder::Joint(m) => m.partition(),
        }
    }

    fn transcode(&self, y_act: &FaceImage, mode: TranscodeMode) -> Result<FaceImage> {
        match self {
            Transcoder::Pca(m) => m.transcode(y_act, mode),
            Transcoder::Joint(m) => m.transcode(y_act, mode),
        }
    }
}

impl ModelFile for Transcoder {
    const KIND: &'static str = "transcoder";

    fn validate(&self) -> Result<()> {
        match self {
            Transcoder::Pca(m) => {
                if m.regions.len() != m.partition.regions().len() {
                    return Err(Error::ModelFormat("region count differs from partition".into()));
                }
                for (r, f) in m.partition.regions().iter().zip(&m.regions) {
                    if r.name() != f.name || f.mean.len() != r.len() || f.loadings.nrows() != r.len() {
                        return Err(Error::ModelFormat(format!("factor `{}` does not match partition", f.name)));
                    }
                    if !(f.noise_variance > 0.0) {
                        return Err(Error::ModelFormat(format!("factor `{}` has non-positive noise", f.name)));
                    }
                }
                Ok(())
            }
            Transcoder::Joint(m) => m.check(),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthesis error

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisEntry {
    pub identity: IdentityId,
    pub label: ExpressionLabel,
    /// Transcoded image minus ground truth, row-major.
    #[serde(skip)]
    pub residual: Vec<f64>,
    pub ssim: f64,
    pub rms: f64,
    pub region_rms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisErrorSet {
    pub entries: Vec<SynthesisEntry>,
    pub mean_ssim: f64,
    pub mean_rms: f64,
    pub region_rms: BTreeMap<String, f64>,
}

/// Residuals of transcoded validation images against their ground truth.
/// Listing [`IdentityId::OBSERVER`] transcodes the observer's own images.
pub fn synthesis_error(
    model: &impl Transcode,
    validation: &[IdentityId],
    corpus: &Corpus,
    params: &SsimParams,
) -> Result<SynthesisErrorSet> {
    let (w, h) = corpus.dims();
    let engine = SsimEngine::new(*params, w, h)?;
    let partition = model.partition();
    let mut entries = Vec::with_capacity(validation.len() * ExpressionLabel::ALL.len());
    for &id in validation {
        for label in ExpressionLabel::ALL {
            let actor = corpus.image(id, label)?;
            let truth = &corpus.training()[&label];
            let projected = model.transcode(actor, TranscodeMode::Mean)?;
            let residual: Vec<f64> = projected
                .pixels()
                .iter()
                .zip(truth.pixels())
                .map(|(p, g)| p - g)
                .collect();
            let rms_of = |idx: &mut dyn Iterator<Item = f64>, n: usize| {
                (idx.map(|v| v * v).sum::<f64>() / n as f64).sqrt()
            };
            let region_rms = partition
                .regions()
                .iter()
                .map(|r| {
                    let mut it = r.indices().iter().map(|&i| residual[i]);
                    (r.name().to_string(), rms_of(&mut it, r.len()))
                })
                .collect();
            let rms = rms_of(&mut residual.iter().copied(), residual.len());
            entries.push(SynthesisEntry {
                identity: id,
                label,
                ssim: engine.ssim(&projected, truth)?,
                rms,
                region_rms,
                residual,
            });
        }
    }
    let n = entries.len().max(1) as f64;
    let mut region_rms: BTreeMap<String, f64> = BTreeMap::new();
    for e in &entries {
        for (k, v) in &e.region_rms {
            *region_rms.entry(k.clone()).or_default() += v / n;
        }
    }
    Ok(SynthesisErrorSet {
        mean_ssim: entries.iter().map(|e| e.ssim).sum::<f64>() / n,
        mean_rms: entries.iter().map(|e| e.rms).sum::<f64>() / n,
        region_rms,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Rect;
    use rand::Rng;

    fn random_set(dims: (usize, usize), seed: u64) -> ExpressionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ExpressionLabel::ALL
            .iter()
            .map(|&l| {
                let px = (0..dims.0 * dims.1).map(|_| rng.random_range(0.1..0.9)).collect();
                (l, FaceImage::new(dims.0, dims.1, px).unwrap())
            })
            .collect()
    }

    fn two_region(dims: (usize, usize)) -> RegionPartition {
        RegionPartition::new(
            dims.0,
            dims.1,
            vec![("top".into(), vec![Rect::new(0, 0, dims.1 / 2, dims.0)])],
        )
        .unwrap()
    }

    #[test]
    fn identical_training_images_reconstruct_exactly() {
        let img = FaceImage::from_fn(6, 5, |r, c| (r * 6 + c) as f64 / 30.0).unwrap();
        let set: ExpressionSet = ExpressionLabel::ALL.iter().map(|&l| (l, img.clone())).collect();
        let model = fit_pca(&set, &two_region((6, 5)), 9).unwrap();
        assert!(!model.warnings().is_empty());
        for f in model.regions() {
            assert!(f.loadings.iter().all(|&v| v == 0.0));
        }
        let out = model.transcode(&img, TranscodeMode::Mean).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loadings_are_orthogonal() {
        let set = random_set((8, 6), 1);
        let model = fit_pca(&set, &two_region((8, 6)), 9).unwrap();
        for f in model.regions() {
            let g = f.loadings.transpose() * &f.loadings;
            for i in 0..g.nrows() {
                for j in 0..g.ncols() {
                    if i != j {
                        assert!(g[(i, j)].abs() < 1e-8, "{}", g[(i, j)]);
                    }
                }
            }
        }
    }

    #[test]
    fn latent_dim_range_is_checked() {
        let set = random_set((8, 6), 1);
        let p = two_region((8, 6));
        assert!(fit_pca(&set, &p, 0).is_err());
        assert!(fit_pca(&set, &p, 10).is_err());
        assert!(fit_pca(&set, &p, 9).is_ok());
    }

    #[test]
    fn full_rank_pca_reproduces_training_images() {
        let set = random_set((8, 6), 2);
        let model = fit_pca(&set, &two_region((8, 6)), 9).unwrap();
        for img in set.values() {
            let out = model.transcode(img, TranscodeMode::Mean).unwrap();
            for (a, b) in out.pixels().iter().zip(img.pixels()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn symmetric_joint_model_maps_face_to_itself() {
        let set = random_set((8, 6), 3);
        let model = fit_joint(&set, &set, &two_region((8, 6)), 9).unwrap();
        for img in set.values() {
            let out = model.transcode(img, TranscodeMode::Mean).unwrap();
            for (a, b) in out.pixels().iter().zip(img.pixels()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn joint_label_mismatch_is_rejected() {
        let a = random_set((8, 6), 3);
        let mut b = random_set((8, 6), 4);
        b.remove(&ExpressionLabel::Fear);
        assert!(matches!(
            fit_joint(&a, &b, &two_region((8, 6)), 5),
            Err(Error::LabelMismatch)
        ));
    }

    #[test]
    fn blocks_reassemble_to_phi_plus_wwt() {
        let set_a = random_set((4, 3), 5);
        let set_o = random_set((4, 3), 6);
        let p = RegionPartition::whole_image(4, 3, "face").unwrap();
        let model = fit_joint(&set_a, &set_o, &p, 4).unwrap();
        let r = &model.regions()[0];
        let w = r.stacked_loadings();
        let d = 12;
        let mut phi = DMatrix::zeros(2 * d, 2 * d);
        for i in 0..d {
            phi[(i, i)] = r.noise_actor();
            phi[(d + i, d + i)] = r.noise_observer();
        }
        let expected = phi + &w * w.transpose();
        assert!((r.covariance_blocks().assemble() - expected).abs().max() < 1e-10);
    }

    #[test]
    fn low_rank_conditional_matches_dense_schur_form() {
        let set_a = random_set((4, 3), 7);
        let set_o = random_set((4, 3), 8);
        let p = RegionPartition::whole_image(4, 3, "face").unwrap();
        let model = fit_joint_pairs(
            &set_a.values().zip(set_o.values()).collect::<Vec<_>>(),
            &p,
            3,
        )
        .unwrap();
        let r = &model.regions()[0];
        let y = DVector::from_fn(12, |i, _| 0.2 + 0.05 * i as f64);
        let dense = r.conditional_dense(&y).unwrap();
        assert!((r.conditional_mean(&y) - &dense.mean).abs().max() < 1e-8);
        assert!((r.conditional_covariance() - &dense.covariance).abs().max() < 1e-8);
    }

    #[test]
    fn non_spd_actor_block_is_an_error() {
        let blocks = CovarianceBlocks {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            b: DMatrix::identity(1, 1),
            c: DMatrix::zeros(2, 1),
        };
        let zero2 = DVector::zeros(2);
        let err = condition_on_actor(&blocks, &zero2, &DVector::zeros(1), &zero2);
        assert!(matches!(err, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn region_transcoding_is_independent() {
        let set = random_set((8, 6), 9);
        let p = two_region((8, 6));
        let model = fit_pca(&set, &p, 5).unwrap();
        let probe = random_set((8, 6), 10).remove(&ExpressionLabel::Anger).unwrap();
        let base = model.transcode(&probe, TranscodeMode::Mean).unwrap();
        let top = p.region("top").unwrap().indices().to_vec();
        let mut px = probe.pixels().to_vec();
        for (i, v) in px.iter_mut().enumerate() {
            if !top.contains(&i) {
                *v = 1.0 - *v;
            }
        }
        let perturbed = FaceImage::new(8, 6, px).unwrap();
        let out = model.transcode(&perturbed, TranscodeMode::Mean).unwrap();
        for &i in &top {
            assert_eq!(out.pixels()[i], base.pixels()[i]);
        }
    }

    #[test]
    fn sample_mode_is_deterministic_in_seed() {
        let set = random_set((8, 6), 11);
        let model = fit_joint(&set, &random_set((8, 6), 12), &two_region((8, 6)), 4).unwrap();
        let probe = &set[&ExpressionLabel::Smile];
        let a = model.transcode(probe, TranscodeMode::Sample { seed: 5 }).unwrap();
        let b = model.transcode(probe, TranscodeMode::Sample { seed: 5 }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observer_validation_has_zero_synthesis_error() {
        let set = random_set((8, 6), 13);
        let subjects = [(IdentityId(1), random_set((8, 6), 14))].into_iter().collect();
        let corpus = Corpus::new((8, 6), 0, set.clone(), subjects).unwrap();
        let model = fit_pca(&set, &two_region((8, 6)), 9).unwrap();
        let params = SsimParams::with_window(4, 1.0);
        let errs = synthesis_error(&model, &[IdentityId::OBSERVER], &corpus, &params).unwrap();
        assert_eq!(errs.entries.len(), 10);
        assert!(errs.mean_ssim >= 0.99);
        assert!(errs.mean_rms < 1e-9);
        let other = synthesis_error(&model, &[IdentityId(1)], &corpus, &params).unwrap();
        assert!(other.mean_rms > errs.mean_rms);
    }

    #[test]
    fn transcoder_file_round_trip() {
        let set = random_set((8, 6), 15);
        let t = Transcoder::Pca(fit_pca(&set, &two_region((8, 6)), 4).unwrap());
        let back: Transcoder = modelio::from_json(&modelio::to_json(&t)).unwrap();
        let probe = &set[&ExpressionLabel::Wonder];
        assert_eq!(
            back.transcode(probe, TranscodeMode::Mean).unwrap(),
            t.transcode(probe, TranscodeMode::Mean).unwrap()
        );
        let j = Transcoder::Joint(fit_joint(&set, &random_set((8, 6), 16), &two_region((8, 6)), 4).unwrap());
        let back: Transcoder = modelio::from_json(&modelio::to_json(&j)).unwrap();
        assert_eq!(
            back.transcode(probe, TranscodeMode::Mean).unwrap(),
            j.transcode(probe, TranscodeMode::Mean).unwrap()
        );
    }
}
