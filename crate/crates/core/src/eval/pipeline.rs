use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use super::metrics::{class_metrics, ClassMetrics, ConfusionMatrix, MetricKind};
use super::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
use crate::dataset::{make_folds, Corpus, ExpressionLabel, ExpressionSet, FoldSplit, IdentityId};
use crate::error::{Error, Result};
use crate::gplvm::{fit_hierarchical, FitOptions, HierarchicalModel, HierarchicalReport, LatentModel};
use crate::imagecore::{FaceImage, PreparedImage, RegionPartition, SsimEngine, SsimParams};
use crate::matcher::{MatchConfig, Matcher};
use crate::transcoder::{fit_joint_pairs, fit_pca, Transcode, TranscodeMode, Transcoder};

/// Label of the Euclidean-nearest training latent. Equidistant latents
/// resolve to the earliest label in canonical order.
pub fn classify(x_star: &[f64], model: &(impl LatentModel + ?Sized)) -> Result<ExpressionLabel> {
    let latents = model.training_latents();
    if x_star.len() != latents.ncols() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} latent coordinates", latents.ncols()),
            actual: x_star.len().to_string(),
        });
    }
    let mut best: Option<(f64, ExpressionLabel)> = None;
    for (row, &label) in latents.row_iter().zip(model.labels()) {
        let d: f64 = row.iter().zip(x_star).map(|(a, b)| (a - b).powi(2)).sum();
        let better = match best {
            None => true,
            Some((bd, bl)) => d < bd || (d == bd && label < bl),
        };
        if better {
            best = Some((d, label));
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| Error::param("model", "no training latents"))
}

/// Ground-truth images prepared once for repeated SSIM scoring.
pub struct GroundTruth {
    engine: SsimEngine,
    prepared: Vec<(ExpressionLabel, PreparedImage)>,
}

impl GroundTruth {
    pub fn new(training: &ExpressionSet, params: SsimParams) -> Result<Self> {
        let first = training.values().next().ok_or_else(|| Error::param("training", "empty"))?;
        let (w, h) = first.dims();
        let engine = SsimEngine::new(params, w, h)?;
        let prepared = training
            .iter()
            .map(|(l, img)| Ok((*l, engine.prepare(img)?)))
            .collect::<Result<_>>()?;
        Ok(Self { engine, prepared })
    }

    pub fn engine(&self) -> &SsimEngine {
        &self.engine
    }

    pub fn score(&self, img: &FaceImage, label: ExpressionLabel) -> Result<f64> {
        let p = self.engine.prepare(img)?;
        let (_, g) = self
            .prepared
            .iter()
            .find(|(l, _)| *l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        Ok(self.engine.compare(&p, g))
    }

    /// Argmax of SSIM against every ground truth; ties go to canonical order.
    pub fn classify(&self, img: &FaceImage) -> Result<ExpressionLabel> {
        let p = self.engine.prepare(img)?;
        let mut best: Option<(f64, ExpressionLabel)> = None;
        // the map iterates in canonical order, so strict improvement keeps the first max
        for (l, g) in &self.prepared {
            let s = self.engine.compare(&p, g);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, *l));
            }
        }
        Ok(best.expect("ground truth is never empty").1)
    }
}

pub fn classify_baseline(y_act: &FaceImage, corpus: &Corpus, params: &SsimParams) -> Result<ExpressionLabel> {
    GroundTruth::new(corpus.training(), *params)?.classify(y_act)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscoderPath {
    /// Joint Gaussian fitted on the fold's (validation actor, observer) pairs.
    #[default]
    Joint,
    /// Projection onto the observer's own per-region PCA basis.
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub fold_seed: u64,
    pub transcoder_path: TranscoderPath,
    pub latent_dim: usize,
    pub transcode_mode: TranscodeMode,
    pub q_leaf: usize,
    pub q_root: usize,
    pub fit_options: FitOptions,
    pub matcher: MatchConfig,
    /// Also score the PCA path so both transcoders appear in the report.
    pub report_pca_transcode: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fold_seed: 42,
            transcoder_path: TranscoderPath::Joint,
            latent_dim: 9,
            transcode_mode: TranscodeMode::Mean,
            q_leaf: 2,
            q_root: 2,
            fit_options: FitOptions::default(),
            matcher: MatchConfig::default(),
            report_pca_transcode: true,
        }
    }
}

/// Validation pairs for the joint path: each validation subject's image
/// paired with the observer image of the same label.
pub fn validation_pairs<'a>(corpus: &'a Corpus, fold: &FoldSplit) -> Result<Vec<(&'a FaceImage, &'a FaceImage)>> {
    let mut pairs = Vec::new();
    for id in &fold.validation_ids {
        for (label, img) in corpus.subject(*id)? {
            pairs.push((img, &corpus.training()[label]));
        }
    }
    Ok(pairs)
}

pub fn fit_transcoder(
    corpus: &Corpus,
    fold: &FoldSplit,
    partition: &RegionPartition,
    path: TranscoderPath,
    latent_dim: usize,
) -> Result<Transcoder> {
    Ok(match path {
        TranscoderPath::Joint => Transcoder::Joint(fit_joint_pairs(&validation_pairs(corpus, fold)?, partition, latent_dim)?),
        TranscoderPath::Pca => Transcoder::Pca(fit_pca(corpus.training(), partition, latent_dim)?),
    })
}

/// Everything measured for one test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub fold: usize,
    pub identity: IdentityId,
    pub label: ExpressionLabel,
    pub baseline_ssim: f64,
    pub transcode_ssim: f64,
    pub full_model_ssim: f64,
    /// SSIM of the PCA-path transcode, when requested and not already the main path.
    pub pca_transcode_ssim: Option<f64>,
    pub baseline_prediction: ExpressionLabel,
    pub model_prediction: ExpressionLabel,
    pub x_star: Vec<f64>,
    pub match_score: f64,
}

/// One fold's test images scored under all three conditions.
pub fn evaluate_fold(
    corpus: &Corpus,
    fold: &FoldSplit,
    transcoder: &dyn Transcode,
    matcher: &Matcher<'_, dyn LatentModel + '_>,
    ground_truth: &GroundTruth,
    mode: TranscodeMode,
    pca: Option<&dyn Transcode>,
) -> Result<Vec<ImageRecord>> {
    if transcoder.partition().dims() != corpus.dims() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", corpus.dims()),
            actual: format!("{:?}", transcoder.partition().dims()),
        });
    }
    let model = matcher.model();
    let mut records = Vec::with_capacity(fold.test_ids.len() * ExpressionLabel::ALL.len());
    for id in &fold.test_ids {
        for (&label, y_act) in corpus.subject(*id)? {
            let y_obs = transcoder.transcode(y_act, mode)?;
            let matched = matcher.detect(&y_obs)?;
            let pca_transcode_ssim = match pca {
                Some(p) => Some(ground_truth.score(&p.transcode(y_act, mode)?, label)?),
                None => None,
            };
            records.push(ImageRecord {
                fold: fold.fold_index,
                identity: *id,
                label,
                baseline_ssim: ground_truth.score(y_act, label)?,
                transcode_ssim: ground_truth.score(&y_obs, label)?,
                full_model_ssim: ground_truth.score(&matched.generated_image, label)?,
                pca_transcode_ssim,
                baseline_prediction: ground_truth.classify(y_act)?,
                model_prediction: classify(&matched.x_star, model)?,
                x_star: matched.x_star,
                match_score: matched.score,
            });
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub error_mean: f64,
    pub error_median: f64,
    /// `1 - error_mean / baseline error_mean`; `None` for the baseline itself.
    pub error_reduction: Option<f64>,
}

fn summarize(scores: Vec<f64>, baseline_error: Option<f64>) -> ConditionSummary {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    let std = if scores.len() > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    ConditionSummary {
        error_reduction: baseline_error.map(|b| error_reduction(b, 1.0 - mean)),
        error_mean: 1.0 - mean,
        error_median: 1.0 - median,
        scores,
        mean,
        median,
        std,
    }
}

/// Relative reduction of a reconstruction error against the baseline error.
pub fn error_reduction(baseline_error: f64, error: f64) -> f64 {
    1.0 - error / baseline_error
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// `(identity, label)` of entry `i` in every score list.
    pub images: Vec<(IdentityId, ExpressionLabel)>,
    pub baseline: ConditionSummary,
    pub transcode_only: ConditionSummary,
    pub full_model: ConditionSummary,
    pub pca_transcode_only: Option<ConditionSummary>,
}

impl ReconstructionReport {
    pub fn from_records(records: &[ImageRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::param("records", "no test images"));
        }
        let col = |f: fn(&ImageRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let baseline = summarize(col(|r| r.baseline_ssim), None);
        let b = Some(baseline.error_mean);
        let pca: Option<Vec<f64>> = records.iter().map(|r| r.pca_transcode_ssim).collect();
        Ok(Self {
            images: records.iter().map(|r| (r.identity, r.label)).collect(),
            transcode_only: summarize(col(|r| r.transcode_ssim), b),
            full_model: summarize(col(|r| r.full_model_ssim), b),
            pca_transcode_only: pca.map(|s| summarize(s, b)),
            baseline,
        })
    }

    pub fn ordering_holds(&self) -> bool {
        self.full_model.mean > self.transcode_only.mean && self.transcode_only.mean > self.baseline.mean
    }
}

/// Scores one fold under the given fitted models.
pub fn reconstruction_quality(
    corpus: &Corpus,
    fold: &FoldSplit,
    transcoder: &dyn Transcode,
    model: &dyn LatentModel,
    matcher_config: &MatchConfig,
) -> Result<ReconstructionReport> {
    let matcher = Matcher::new(model, matcher_config.clone())?;
    let gt = GroundTruth::new(corpus.training(), matcher_config.ssim_params)?;
    let records = evaluate_fold(corpus, fold, transcoder, &matcher, &gt, TranscodeMode::Mean, None)?;
    ReconstructionReport::from_records(&records)
}

pub fn confusion_matrices(records: &[ImageRecord]) -> (ConfusionMatrix, ConfusionMatrix) {
    let (mut base, mut model) = (ConfusionMatrix::new(), ConfusionMatrix::new());
    for r in records {
        base.record(r.label, r.baseline_prediction);
        model.record(r.label, r.model_prediction);
    }
    (base, model)
}

#[derive(Clone, Debug, Serialize)]
pub struct SignificanceTest {
    pub metric: MetricKind,
    pub result: Option<WilcoxonResult>,
    /// Why no test was possible, when `result` is `None`.
    pub skipped: Option<String>,
}

/// Paired test of each metric's per-class values, model against baseline.
pub fn significance_tests(baseline: &ClassMetrics, model: &ClassMetrics) -> Vec<SignificanceTest> {
    MetricKind::ALL
        .iter()
        .map(|&k| {
            let outcome = baseline
                .defined_column(k)
                .and_then(|b| model.defined_column(k).map(|m| (b, m)))
                .and_then(|(b, m)| wilcoxon_signed_rank(&m, &b));
            match outcome {
                Ok(r) => SignificanceTest {
                    metric: k,
                    result: Some(r),
                    skipped: None,
                },
                Err(e) => SignificanceTest {
                    metric: k,
                    result: None,
                    skipped: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldSummary {
    pub split: FoldSplit,
    pub transcoder_warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub config: PipelineConfig,
    pub folds: Vec<FoldSummary>,
    pub gplvm_training: HierarchicalReport,
    /// SSIM of each training latent's generated image against its training image.
    pub training_reconstruction: BTreeMap<ExpressionLabel, f64>,
    pub reconstruction: ReconstructionReport,
    pub baseline_confusion: ConfusionMatrix,
    pub model_confusion: ConfusionMatrix,
    pub baseline_metrics: ClassMetrics,
    pub model_metrics: ClassMetrics,
    pub significance: Vec<SignificanceTest>,
    pub records: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn records_csv(&self) -> String {
        let mut out = String::from(
            "fold,identity,label,baseline_ssim,transcode_ssim,full_model_ssim,pca_transcode_ssim,baseline_prediction,model_prediction,match_score,x_star\n",
        );
        for r in &self.records {
            let x: Vec<String> = r.x_star.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{},{},{},{:.6},{}\n",
                r.fold,
                r.identity,
                r.label,
                r.baseline_ssim,
                r.transcode_ssim,
                r.full_model_ssim,
                r.pca_transcode_ssim.map_or(String::new(), |v| format!("{v:.6}")),
                r.baseline_prediction,
                r.model_prediction,
                r.match_score,
                x.join(" "),
            ));
        }
        out
    }
}

/// Fits the observer's latent space once; it does not depend on the fold.
pub fn fit_observer_model(
    corpus: &Corpus,
    partition: &RegionPartition,
    config: &PipelineConfig,
) -> Result<(HierarchicalModel, HierarchicalReport)> {
    fit_hierarchical(corpus.training(), partition, config.q_leaf, config.q_root, &config.fit_options)
}

/// Per fold: fit the transcoder, then classify and score the fold's test
/// images with both the baseline and the full model.
pub fn cross_validated_records(
    corpus: &Corpus,
    model: &dyn LatentModel,
    partition: &RegionPartition,
    config: &PipelineConfig,
) -> Result<(Vec<FoldSummary>, Vec<ImageRecord>)> {
    let folds = make_folds(corpus, config.fold_seed)?;
    let matcher = Matcher::new(model, config.matcher.clone())?;
    let gt = GroundTruth::new(corpus.training(), config.matcher.ssim_params)?;
    let pca = if config.report_pca_transcode && config.transcoder_path != TranscoderPath::Pca {
        Some(fit_pca(corpus.training(), partition, config.latent_dim)?)
    } else {
        None
    };
    let mut summaries = Vec::new();
    let mut records = Vec::new();
    for fold in &folds {
        info!("fold {}: fitting transcoder", fold.fold_index);
        let transcoder = fit_transcoder(corpus, fold, partition, config.transcoder_path, config.latent_dim)?;
        let warnings = match &transcoder {
            Transcoder::Pca(m) => m.warnings().to_vec(),
            Transcoder::Joint(m) => m.warnings().to_vec(),
        };
        let pca_ref = pca.as_ref().map(|p| p as &dyn Transcode);
        let fold_records = evaluate_fold(corpus, fold, &transcoder, &matcher, &gt, config.transcode_mode, pca_ref)?;
        info!("fold {}: scored {} test images", fold.fold_index, fold_records.len());
        records.extend(fold_records);
        summaries.push(FoldSummary {
            split: fold.clone(),
            transcoder_warnings: warnings,
        });
    }
    Ok((summaries, records))
}

/// Summed baseline and model confusion matrices over the four folds.
pub fn cross_validated_confusion(
    corpus: &Corpus,
    model: &dyn LatentModel,
    partition: &RegionPartition,
    config: &PipelineConfig,
) -> Result<(ConfusionMatrix, ConfusionMatrix)> {
    let (_, records) = cross_validated_records(corpus, model, partition, config)?;
    Ok(confusion_matrices(&records))
}

/// The complete protocol on one corpus.
pub fn evaluate(corpus: &Corpus, config: &PipelineConfig) -> Result<EvalReport> {
    let (w, h) = corpus.dims();
    let partition = RegionPartition::default_face(w, h)?;
    info!("fitting hierarchical latent model");
    let (model, gplvm_training) = fit_observer_model(corpus, &partition, config)?;
    let gt = GroundTruth::new(corpus.training(), config.matcher.ssim_params)?;
    let mut training_reconstruction = BTreeMap::new();
    for (row, &label) in model.training_latents().row_iter().zip(model.labels()) {
        let x: Vec<f64> = row.iter().copied().collect();
        training_reconstruction.insert(label, gt.score(&model.generate(&x)?, label)?);
    }
    let (folds, records) = cross_validated_records(corpus, &model, &partition, config)?;
    let reconstruction = ReconstructionReport::from_records(&records)?;
    let (baseline_confusion, model_confusion) = confusion_matrices(&records);
    let baseline_metrics = class_metrics(&baseline_confusion);
    let model_metrics = class_metrics(&model_confusion);
    let significance = significance_tests(&baseline_metrics, &model_metrics);
    Ok(EvalReport {
        config: config.clone(),
        folds,
        gplvm_training,
        training_reconstruction,
        reconstruction,
        baseline_confusion,
        model_confusion,
        baseline_metrics,
        model_metrics,
        significance,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_corpus;

    struct Points {
        x: nalgebra::DMatrix<f64>,
        labels: Vec<ExpressionLabel>,
    }

    impl LatentModel for Points {
        fn dims(&self) -> (usize, usize) {
            (1, 1)
        }
        fn latent_dim(&self) -> usize {
            self.x.ncols()
        }
        fn training_latents(&self) -> &nalgebra::DMatrix<f64> {
            &self.x
        }
        fn labels(&self) -> &[ExpressionLabel] {
            &self.labels
        }
        fn generate(&self, _: &[f64]) -> Result<FaceImage> {
            FaceImage::filled(1, 1, 0.5)
        }
        fn log_predictive_density(&self, _: &[f64], _: &FaceImage) -> Result<f64> {
            Ok(0.0)
        }
    }

    #[test]
    fn classify_picks_nearest_and_breaks_ties_canonically() {
        use ExpressionLabel::*;
        let m = Points {
            x: nalgebra::DMatrix::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 5.0, 5.0]),
            labels: vec![Annoyance, Anger, Fear],
        };
        assert_eq!(classify(&[2.0, 0.0], &m).unwrap(), Annoyance);
        assert_eq!(classify(&[4.0, 4.0], &m).unwrap(), Fear);
        assert_eq!(classify(&[1.0, 0.0], &m).unwrap(), Anger);
        assert!(classify(&[0.0], &m).is_err());
    }

    #[test]
    fn baseline_recovers_ground_truth() {
        let c = generate_corpus(2, (40, 44), 3).unwrap();
        let p = SsimParams::with_window(11, 1.5);
        for (l, img) in c.training() {
            assert_eq!(classify_baseline(img, &c, &p).unwrap(), *l);
        }
    }

    #[test]
    fn summary_statistics() {
        let s = summarize(vec![0.5, 0.7, 0.9, 0.6], Some(0.5));
        assert!((s.mean - 0.675).abs() < 1e-12);
        assert!((s.median - 0.65).abs() < 1e-12);
        assert!((s.error_reduction.unwrap() - 0.35).abs() < 1e-12);
        assert!((error_reduction(1.0 - 0.5425, 1.0 - 0.8525) - 0.678).abs() < 0.01);
        assert!((error_reduction(1.0 - 0.5425, 1.0 - 0.9148) - 0.814).abs() < 0.01);
    }
}
