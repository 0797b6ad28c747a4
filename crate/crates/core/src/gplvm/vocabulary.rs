//! Finite subsamples of the latent space and the approximate posterior over them.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::hierarchy::LatentModel;
use crate::error::{Error, Result};
use crate::imagecore::{FaceImage, SsimEngine, SsimParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum VocabularyStrategy {
    /// Cell-centered grid over the training box expanded by 20%.
    Grid,
    /// Gaussian draws matched to the per-dimension training mean and spread.
    Gaussian { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct VocabularyEntry {
    pub latent: Vec<f64>,
    pub image: FaceImage,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub entries: Vec<VocabularyEntry>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-dimension `(lo, hi)` of the rows of `latents`, widened by
/// `expand * range` in total (half on each side).
pub fn bounding_box(latents: &DMatrix<f64>, expand: f64) -> Vec<(f64, f64)> {
    (0..latents.ncols())
        .map(|c| {
            let col = latents.column(c);
            let (lo, hi) = (col.min(), col.max());
            let pad = 0.5 * expand * (hi - lo);
            (lo - pad, hi + pad)
        })
        .collect()
}

/// Latent points for a vocabulary of about `count` entries. The grid uses
/// `round(count^(1/q))` points per dimension.
pub fn latent_points(latents: &DMatrix<f64>, strategy: VocabularyStrategy, count: usize) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::param("count", "vocabulary needs at least one entry"));
    }
    let q = latents.ncols();
    match strategy {
        VocabularyStrategy::Grid => {
            let per_dim = ((count as f64).powf(1.0 / q as f64).round() as usize).max(1);
            let bounds = bounding_box(latents, 0.2);
            let total = per_dim.pow(q as u32);
            Ok((0..total)
                .map(|mut k| {
                    // first dimension varies slowest
                    let mut digits = vec![0; q];
                    for d in (0..q).rev() {
                        digits[d] = k % per_dim;
                        k /= per_dim;
                    }
                    digits
                        .iter()
                        .zip(&bounds)
                        .map(|(&i, &(lo, hi))| lo + (i as f64 + 0.5) * (hi - lo) / per_dim as f64)
                        .collect()
                })
                .collect())
        }
        VocabularyStrategy::Gaussian { seed } => {
            let n = latents.nrows() as f64;
            let stats: Vec<(f64, f64)> = (0..q)
                .map(|c| {
                    let col = latents.column(c);
                    let mean = col.mean();
                    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    (mean, var.sqrt())
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..count)
                .map(|_| {
                    stats
                        .iter()
                        .map(|&(m, sd)| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            m + sd * e
                        })
                        .collect()
                })
                .collect())
        }
    }
}

pub fn sample_vocabulary(
    model: &(impl LatentModel + ?Sized),
    strategy: VocabularyStrategy,
    count: usize,
) -> Result<Vocabulary> {
    let entries = latent_points(model.training_latents(), strategy, count)?
        .into_iter()
        .map(|latent| {
            let image = model.generate(&latent)?;
            Ok(VocabularyEntry { latent, image })
        })
        .collect::<Result<_>>()?;
    Ok(Vocabulary { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "weighting", rename_all = "snake_case")]
pub enum PosteriorWeighting {
    /// `exp(SSIM / tau)`.
    Ssim { tau: f64 },
    /// GP log predictive density of the input at each latent.
    PredictiveDensity,
}

impl Default for PosteriorWeighting {
    fn default() -> Self {
        PosteriorWeighting::Ssim { tau: 0.05 }
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Normalized weights over the vocabulary entries, in entry order.
pub fn posterior_over_latents(
    model: &(impl LatentModel + ?Sized),
    y_obs: &FaceImage,
    vocabulary: &Vocabulary,
    weighting: PosteriorWeighting,
    params: &SsimParams,
) -> Result<Vec<f64>> {
    if vocabulary.is_empty() {
        return Err(Error::param("vocabulary", "must not be empty"));
    }
    let scores = match weighting {
        PosteriorWeighting::Ssim { tau } => {
            if !(tau > 0.0) {
                return Err(Error::param("tau", format!("must be positive, got {tau}")));
            }
            let (w, h) = model.dims();
            let engine = SsimEngine::new(*params, w, h)?;
            let target = engine.prepare(y_obs)?;
            vocabulary
                .entries
                .iter()
                .map(|e| Ok(engine.compare(&engine.prepare(&e.image)?, &target) / tau))
                .collect::<Result<Vec<_>>>()?
        }
        PosteriorWeighting::PredictiveDensity => vocabulary
            .entries
            .iter()
            .map(|e| model.log_predictive_density(&e.latent, y_obs))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(softmax(&scores))
}

/// Shannon entropy in nats.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latents() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 2.0, -1.0, 1.0])
    }

    #[test]
    fn grid_shape_and_interior() {
        let pts = latent_points(&latents(), VocabularyStrategy::Grid, 100).unwrap();
        assert_eq!(pts.len(), 100);
        let bounds = bounding_box(&latents(), 0.2);
        assert_eq!(bounds[0], (-1.2, 1.2));
        for p in &pts {
            for (v, (lo, hi)) in p.iter().zip(&bounds) {
                assert!(v > lo && v < hi);
            }
        }
        assert_eq!(latent_points(&latents(), VocabularyStrategy::Grid, 400).unwrap().len(), 400);
    }

    #[test]
    fn collapsed_box_gives_training_point() {
        let same = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, 0.5, -0.5]);
        let pts = latent_points(&same, VocabularyStrategy::Grid, 4).unwrap();
        assert!(pts.iter().all(|p| p == &vec![0.5, -0.5]));
    }

    #[test]
    fn gaussian_is_seeded() {
        let a = latent_points(&latents(), VocabularyStrategy::Gaussian { seed: 1 }, 20).unwrap();
        let b = latent_points(&latents(), VocabularyStrategy::Gaussian { seed: 1 }, 20).unwrap();
        let c = latent_points(&latents(), VocabularyStrategy::Gaussian { seed: 2 }, 20).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(latent_points(&latents(), VocabularyStrategy::Grid, 0).is_err());
    }

    #[test]
    fn grid_coverage_improves_with_count() {
        let far = |count| {
            let pts = latent_points(&latents(), VocabularyStrategy::Grid, count).unwrap();
            (0..3)
                .map(|i| {
                    pts.iter()
                        .map(|p| ((p[0] - latents()[(i, 0)]).powi(2) + (p[1] - latents()[(i, 1)]).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        assert!(far(400) < far(100));
    }

    #[test]
    fn softmax_and_entropy() {
        let w = softmax(&[1.0, 2.0, 3.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(entropy(&softmax(&[10.0, 20.0, 30.0])) < entropy(&w));
    }
}
