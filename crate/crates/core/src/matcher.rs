//! Generate-and-match search for the latent state that best explains an
//! observed (transcoded) image.
//!
//! The start is the vocabulary entry with the highest SSIM against the
//! input. It is then refined inside a box by coordinate pattern search,
//! accepting only strict improvements, so the score trace never decreases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gplvm::{bounding_box, sample_vocabulary, LatentModel, Vocabulary, VocabularyStrategy};
use crate::imagecore::{FaceImage, PreparedImage, SsimEngine, SsimParams};

/// Default widening of the training-latent box for the search region.
pub const BOUNDS_EXPANSION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    None,
    /// Coordinate pattern search with a halving step.
    PatternSearch,
    /// Finite-difference gradient ascent on SSIM plus a log barrier.
    Barrier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub vocabulary_strategy: VocabularyStrategy,
    pub vocabulary_count: usize,
    pub refinement: Refinement,
    pub max_refine_iters: usize,
    /// Per-dimension `(lo, hi)`; `None` uses the training box widened by 50%.
    pub latent_bounds: Option<Vec<(f64, f64)>>,
    pub ssim_params: SsimParams,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            vocabulary_strategy: VocabularyStrategy::Grid,
            vocabulary_count: 400,
            refinement: Refinement::PatternSearch,
            max_refine_iters: 100,
            latent_bounds: None,
            ssim_params: SsimParams::default(),
        }
    }
}

impl MatchConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.vocabulary_count == 0 {
            return Err(Error::param("vocabulary_count", "must be at least 1"));
        }
        if let Some(bounds) = &self.latent_bounds {
            if bounds.len() != latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: format!("{latent_dim} latent bounds"),
                    actual: bounds.len().to_string(),
                });
            }
            for &(lo, hi) in bounds {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(Error::param("latent_bounds", format!("need finite lo < hi, got ({lo}, {hi})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub x: Vec<f64>,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchResult {
    pub x_star: Vec<f64>,
    pub score: f64,
    pub initial_candidate: Vec<f64>,
    pub initial_score: f64,
    pub trace: Vec<TracePoint>,
    #[serde(skip)]
    pub generated_image: FaceImage,
}

/// Vocabulary, bounds and SSIM state prepared once for many detections.
pub struct Matcher<'a, M: LatentModel + ?Sized> {
    model: &'a M,
    config: MatchConfig,
    engine: SsimEngine,
    vocabulary: Vocabulary,
    prepared: Vec<PreparedImage>,
    bounds: Vec<(f64, f64)>,
}

fn default_bounds(model: &(impl LatentModel + ?Sized)) -> Vec<(f64, f64)> {
    bounding_box(model.training_latents(), BOUNDS_EXPANSION)
        .into_iter()
        .map(|(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
        .collect()
}

impl<'a, M: LatentModel + ?Sized> Matcher<'a, M> {
    pub fn new(model: &'a M, config: MatchConfig) -> Result<Self> {
        let vocabulary = sample_vocabulary(model, config.vocabulary_strategy, config.vocabulary_count)?;
        Self::with_vocabulary(model, config, vocabulary)
    }

    pub fn with_vocabulary(model: &'a M, config: MatchConfig, vocabulary: Vocabulary) -> Result<Self> {
        config.validate(model.latent_dim())?;
        if vocabulary.is_empty() {
            return Err(Error::param("vocabulary", "must not be empty"));
        }
        let (w, h) = model.dims();
        let engine = SsimEngine::new(config.ssim_params, w, h)?;
        let prepared = vocabulary
            .entries
            .iter()
            .map(|e| engine.prepare(&e.image))
            .collect::<Result<_>>()?;
        let bounds = config.latent_bounds.clone().unwrap_or_else(|| default_bounds(model));
        Ok(Self {
            model,
            config,
            engine,
            vocabulary,
            prepared,
            bounds,
        })
    }

    pub fn model(&self) -> &'a M {
        self.model
    }

    pub fn config(&self) -> &MatchConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn engine(&self) -> &SsimEngine {
        &self.engine
    }

    /// Index and score of the best vocabulary entry; the lowest index wins ties.
    pub fn select_initial(&self, y_obs: &FaceImage) -> Result<(usize, f64)> {
        let target = self.engine.prepare(y_obs)?;
        Ok(self.select_prepared(&target))
    }

    fn select_prepared(&self, target: &PreparedImage) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.prepared.iter().enumerate() {
            let s = self.engine.compare(p, target);
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }

    fn score(&self, x: &[f64], target: &PreparedImage) -> Result<f64> {
        let img = self.model.generate(x)?;
        Ok(self.engine.compare(&self.engine.prepare(&img)?, target))
    }

    fn check_start(&self, start: &[f64]) -> Result<()> {
        if start.len() != self.bounds.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("start of dimension {}", self.bounds.len()),
                actual: start.len().to_string(),
            });
        }
        for (d, (&v, &(lo, hi))) in start.iter().zip(&self.bounds).enumerate() {
            if !(v > lo && v < hi) {
                return Err(Error::param(
                    "start",
                    format!("coordinate {d} = {v} lies outside ({lo}, {hi})"),
                ));
            }
        }
        Ok(())
    }

    /// Bounded refinement from `start`; the start must lie strictly inside the bounds.
    pub fn refine(&self, start: &[f64], y_obs: &FaceImage) -> Result<MatchResult> {
        self.check_start(start)?;
        let target = self.engine.prepare(y_obs)?;
        let start_score = self.score(start, &target)?;
        self.refine_prepared(start.to_vec(), start_score, &target)
    }

    fn refine_prepared(&self, start: Vec<f64>, start_score: f64, target: &PreparedImage) -> Result<MatchResult> {
        let trace = match self.config.refinement {
            Refinement::None => vec![TracePoint {
                iteration: 0,
                x: start.clone(),
                score: start_score,
            }],
            Refinement::PatternSearch => self.pattern_search(&start, start_score, target)?,
            Refinement::Barrier => self.barrier_ascent(&start, start_score, target)?,
        };
        let last = trace.last().expect("trace starts with the initial point");
        Ok(MatchResult {
            x_star: last.x.clone(),
            score: last.score,
            initial_candidate: start,
            initial_score: start_score,
            generated_image: self.model.generate(&last.x)?,
            trace,
        })
    }

    fn interior(&self, d: usize, v: f64) -> f64 {
        let (lo, hi) = self.bounds[d];
        let margin = 1e-9 * (hi - lo);
        v.clamp(lo + margin, hi - margin)
    }

    fn pattern_search(&self, start: &[f64], start_score: f64, target: &PreparedImage) -> Result<Vec<TracePoint>> {
        let ranges: Vec<f64> = self.bounds.iter().map(|(lo, hi)| hi - lo).collect();
        let mut step: Vec<f64> = ranges.iter().map(|r| 0.1 * r).collect();
        let mut x = start.to_vec();
        let mut score = start_score;
        let mut trace = vec![TracePoint {
            iteration: 0,
            x: x.clone(),
            score,
        }];
        for iteration in 1..=self.config.max_refine_iters {
            if step.iter().zip(&ranges).all(|(s, r)| *s < 1e-4 * r) {
                break;
            }
            let mut improved = false;
            for d in 0..x.len() {
                for sign in [1.0, -1.0] {
                    let mut cand = x.clone();
                    cand[d] = self.interior(d, x[d] + sign * step[d]);
                    if cand[d] == x[d] {
                        continue;
                    }
                    let s = self.score(&cand, target)?;
                    if s > score {
                        x = cand;
                        score = s;
                        improved = true;
                        break;
                    }
                }
            }
            if improved {
                trace.push(TracePoint {
                    iteration,
                    x: x.clone(),
                    score,
                });
            } else {
                step.iter_mut().for_each(|s| *s *= 0.5);
            }
        }
        Ok(trace)
    }

    fn barrier_ascent(&self, start: &[f64], start_score: f64, target: &PreparedImage) -> Result<Vec<TracePoint>> {
        let ranges: Vec<f64> = self.bounds.iter().map(|(lo, hi)| hi - lo).collect();
        let barrier = |x: &[f64], mu: f64| -> f64 {
            x.iter()
                .zip(&self.bounds)
                .map(|(&v, &(lo, hi))| mu * ((v - lo).ln() + (hi - v).ln()))
                .sum()
        };
        let mut x = start.to_vec();
        let mut score = start_score;
        let mut best = TracePoint {
            iteration: 0,
            x: x.clone(),
            score,
        };
        let mut trace = vec![best.clone()];
        let mut mu = 1e-3;
        let mut step = 0.1;
        for iteration in 1..=self.config.max_refine_iters {
            let objective = score + barrier(&x, mu);
            let mut grad = vec![0.0; x.len()];
            for d in 0..x.len() {
                let h = 1e-3 * ranges[d];
                let mut up = x.clone();
                let mut down = x.clone();
                up[d] = self.interior(d, x[d] + h);
                down[d] = self.interior(d, x[d] - h);
                let fu = self.score(&up, target)? + barrier(&up, mu);
                let fd = self.score(&down, target)? + barrier(&down, mu);
                grad[d] = (fu - fd) / (up[d] - down[d]);
            }
            let norm = grad.iter().zip(&ranges).map(|(g, r)| (g * r).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                break;
            }
            let mut moved = false;
            while step > 1e-4 {
                let cand: Vec<f64> = (0..x.len())
                    .map(|d| self.interior(d, x[d] + step * grad[d] * ranges[d] * ranges[d] / norm))
                    .collect();
                let s = self.score(&cand, target)?;
                if s + barrier(&cand, mu) > objective {
                    x = cand;
                    score = s;
                    moved = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if score > best.score {
                best = TracePoint {
                    iteration,
                    x: x.clone(),
                    score,
                };
                trace.push(best.clone());
            }
            if !moved {
                break;
            }
            mu *= 0.5;
        }
        Ok(trace)
    }

    /// Vocabulary start followed by the configured refinement.
    pub fn detect(&self, y_obs: &FaceImage) -> Result<MatchResult> {
        if y_obs.dims() != self.model.dims() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", self.model.dims()),
                actual: format!("{:?}", y_obs.dims()),
            });
        }
        let target = self.engine.prepare(y_obs)?;
        let (index, start_score) = self.select_prepared(&target);
        let start = self.vocabulary.entries[index].latent.clone();
        let start = if self.config.refinement == Refinement::None {
            start
        } else {
            start.iter().enumerate().map(|(d, &v)| self.interior(d, v)).collect()
        };
        self.refine_prepared(start, start_score, &target)
    }
}

/// Best vocabulary latent for `y_obs` and its score.
pub fn select_initial(
    model: &(impl LatentModel + ?Sized),
    vocabulary: &Vocabulary,
    y_obs: &FaceImage,
    params: &SsimParams,
) -> Result<(Vec<f64>, f64)> {
    let config = MatchConfig {
        ssim_params: *params,
        refinement: Refinement::None,
        ..MatchConfig::default()
    };
    let matcher = Matcher::with_vocabulary(model, config, vocabulary.clone())?;
    let (i, s) = matcher.select_initial(y_obs)?;
    Ok((vocabulary.entries[i].latent.clone(), s))
}

/// One-off refinement; builds a single-entry vocabulary at `start`.
pub fn refine(
    model: &(impl LatentModel + ?Sized),
    start: &[f64],
    y_obs: &FaceImage,
    config: &MatchConfig,
) -> Result<MatchResult> {
    let vocabulary = Vocabulary {
        entries: vec![crate::gplvm::VocabularyEntry {
            latent: start.to_vec(),
            image: model.generate(start)?,
        }],
    };
    Matcher::with_vocabulary(model, config.clone(), vocabulary)?.refine(start, y_obs)
}

pub fn detect(model: &(impl LatentModel + ?Sized), y_obs: &FaceImage, config: &MatchConfig) -> Result<MatchResult> {
    Matcher::new(model, config.clone())?.detect(y_obs)
}
