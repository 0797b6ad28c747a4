use std::fs;
use std::path::{Path, PathBuf};

use facesim::dataset::{generate_corpus, load_corpus, load_image, save_corpus, save_image, Corpus, ExpressionLabel};
use facesim::eval::{self, fixtures, classify, GroundTruth, TranscoderPath};
use facesim::gplvm::{export_latents_csv, fit_hierarchical, LatentModel, LatentSpaceModel};
use facesim::imagecore::RegionPartition;
use facesim::matcher::Matcher;
use facesim::modelio;
use facesim::transcoder::{fit_joint_pairs, fit_pca, Transcode, TranscodeMode, Transcoder};
use log::{info, warn};
use serde::Serialize;

use crate::config::{ObserverMode, RunConfig};
use crate::error::{config, CliError, CliResult};

pub const TRANSCODER_FILE: &str = "transcoder.json";
pub const LATENT_FILE: &str = "latent_space.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";
pub const RUN_FILE: &str = "run.json";

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    write_text(path, &(text + "\n"))
}

fn out_dir(c: &RunConfig) -> CliResult<&Path> {
    c.out.as_deref().ok_or_else(|| config("out", "an output directory is required"))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

/// Loads the corpus and returns it with `c` updated to its dimensions.
fn load_observer_corpus(c: &RunConfig) -> CliResult<(Corpus, RunConfig)> {
    let root = c.corpus.as_deref().ok_or_else(|| config("corpus", "a corpus directory is required"))?;
    info!("loading corpus from {}", root.display());
    let (corpus, report) = load_corpus(root)?;
    if report.clamped_pixels > 0 {
        warn!("{} pixel values above the white level were clamped", report.clamped_pixels);
    }
    c.validate_dims(corpus.dims())?;
    let resolved = RunConfig {
        dims: corpus.dims(),
        ..c.clone()
    };
    let corpus = match c.observer_mode {
        ObserverMode::Single => corpus,
        ObserverMode::Average => corpus.with_average_observer(&corpus.subject_ids())?,
    };
    Ok((corpus, resolved))
}

pub fn gen_data(c: &RunConfig) -> CliResult<()> {
    c.validate()?;
    let out = out_dir(c)?;
    info!("rendering {} identities at {}x{}", c.identities, c.dims.0, c.dims.1);
    let corpus = generate_corpus(c.identities, c.dims, c.seed)?;
    save_corpus(&corpus, out)?;
    write_json(&out.join(RUN_FILE), c)?;
    info!("wrote corpus to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainingLog<'a> {
    transcoder_path: TranscoderPath,
    latent_dim: usize,
    transcoder_warnings: &'a [String],
    /// Root-level log likelihood after fitting.
    final_log_likelihood: f64,
    gplvm: &'a facesim::gplvm::HierarchicalReport,
    training_reconstruction_ssim: Vec<(ExpressionLabel, f64)>,
}

pub fn train(c: &RunConfig) -> CliResult<()> {
    c.validate()?;
    let out = out_dir(c)?;
    let (corpus, c) = load_observer_corpus(c)?;
    let c = &c;
    let (w, h) = corpus.dims();
    let partition = RegionPartition::default_face(w, h)?;

    info!("fitting {:?} transcoder with L = {}", c.transcoder, c.latent_dim);
    let transcoder = match TranscoderPath::from(c.transcoder) {
        TranscoderPath::Joint => {
            // every subject serves as validation data for the deployed model
            let pairs: Vec<_> = corpus
                .subjects()
                .values()
                .flat_map(|set| set.iter().map(|(l, img)| (img, &corpus.training()[l])))
                .collect();
            Transcoder::Joint(fit_joint_pairs(&pairs, &partition, c.latent_dim)?)
        }
        TranscoderPath::Pca => Transcoder::Pca(fit_pca(corpus.training(), &partition, c.latent_dim)?),
    };
    let warnings = match &transcoder {
        Transcoder::Joint(m) => m.warnings().to_vec(),
        Transcoder::Pca(m) => m.warnings().to_vec(),
    };
    for w in &warnings {
        warn!("{w}");
    }

    info!("fitting hierarchical latent model (q_leaf {}, q_root {})", c.q_leaf, c.q_root);
    let (model, report) = fit_hierarchical(corpus.training(), &partition, c.q_leaf, c.q_root, &c.fit_options())?;
    let gt = GroundTruth::new(corpus.training(), c.match_config().ssim_params)?;
    let training_reconstruction_ssim = model
        .training_latents()
        .row_iter()
        .zip(model.labels())
        .map(|(row, &l)| {
            let x: Vec<f64> = row.iter().copied().collect();
            Ok((l, gt.score(&model.generate(&x)?, l)?))
        })
        .collect::<facesim::Result<Vec<_>>>()?;

    ensure_dir(out)?;
    modelio::save(&transcoder, &out.join(TRANSCODER_FILE))?;
    modelio::save(&LatentSpaceModel::Hierarchical(model), &out.join(LATENT_FILE))?;
    write_json(
        &out.join(TRAINING_LOG_FILE),
        &TrainingLog {
            transcoder_path: c.transcoder.into(),
            latent_dim: c.latent_dim,
            transcoder_warnings: &warnings,
            final_log_likelihood: report.root.final_log_likelihood,
            gplvm: &report,
            training_reconstruction_ssim,
        },
    )?;
    write_json(&out.join(RUN_FILE), c)?;
    info!("wrote models to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Detection {
    input: PathBuf,
    predicted_label: ExpressionLabel,
    x_star: Vec<f64>,
    score: f64,
    initial_candidate: Vec<f64>,
    initial_score: f64,
    refinement_steps: usize,
    transcoded_image: Option<PathBuf>,
    generated_image: PathBuf,
}

pub fn detect(c: &RunConfig, models: &Path, image: &Path, skip_transcode: bool) -> CliResult<()> {
    let out = out_dir(c)?;
    let model: LatentSpaceModel = modelio::load(&models.join(LATENT_FILE))?;
    let transcoder: Option<Transcoder> = if skip_transcode {
        None
    } else {
        Some(modelio::load(&models.join(TRANSCODER_FILE))?)
    };
    c.validate()?;
    c.validate_dims(model.dims())?;
    let c = &RunConfig {
        dims: model.dims(),
        ..c.clone()
    };
    let input = load_image(image)?;
    let y_obs = match &transcoder {
        Some(t) => t.transcode(&input, TranscodeMode::Mean)?,
        None => input,
    };
    let matcher = Matcher::new(&model, c.match_config())?;
    let m = matcher.detect(&y_obs)?;
    let label = classify(&m.x_star, &model)?;
    info!("detected {label} (SSIM {:.4})", m.score);
    ensure_dir(out)?;

    let transcoded_image = match transcoder {
        Some(_) => {
            let p = out.join("transcoded.png");
            save_image(&p, &y_obs)?;
            Some(p)
        }
        None => None,
    };
    let generated = out.join("generated.png");
    save_image(&generated, &m.generated_image)?;
    write_json(
        &out.join("detection.json"),
        &Detection {
            input: image.to_path_buf(),
            predicted_label: label,
            x_star: m.x_star,
            score: m.score,
            initial_candidate: m.initial_candidate,
            initial_score: m.initial_score,
            refinement_steps: m.trace.len().saturating_sub(1),
            transcoded_image,
            generated_image: generated,
        },
    )?;
    write_json(&out.join(RUN_FILE), c)
}

pub fn evaluate(c: &RunConfig) -> CliResult<()> {
    c.validate()?;
    let out = out_dir(c)?;
    let (corpus, c) = load_observer_corpus(c)?;
    let c = &c;
    let report = eval::evaluate(&corpus, &c.pipeline())?;
    let r = &report.reconstruction;
    info!(
        "mean SSIM: baseline {:.4}, transcode {:.4}, full model {:.4}",
        r.baseline.mean, r.transcode_only.mean, r.full_model.mean
    );
    info!(
        "correct: baseline {} / model {} of {}",
        report.baseline_confusion.diagonal_sum(),
        report.model_confusion.diagonal_sum(),
        report.model_confusion.total()
    );
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("records.csv"), &report.records_csv())?;
    write_text(&out.join("confusion_baseline.csv"), &report.baseline_confusion.to_csv())?;
    write_text(&out.join("confusion_model.csv"), &report.model_confusion.to_csv())?;
    write_text(&out.join("metrics_baseline.csv"), &report.baseline_metrics.to_csv())?;
    write_text(&out.join("metrics_model.csv"), &report.model_metrics.to_csv())?;
    write_json(&out.join(RUN_FILE), c)?;
    info!("wrote evaluation to {}", out.display());
    Ok(())
}

pub fn evaluate_fixtures(c: &RunConfig) -> CliResult<()> {
    let report = fixtures::run_fixtures()?;
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let mut failed = 0;
    for a in &report.averages {
        failed += usize::from(!a.pass);
        println!(
            "{} {} {}: computed {:.4}, published {:.4}",
            verdict(a.pass),
            a.case,
            a.metric.name(),
            a.computed,
            a.published
        );
    }
    for s in &report.significance {
        let checked = matches!(s.metric, eval::MetricKind::Accuracy | eval::MetricKind::Specificity);
        let ok = !checked || s.significance_agrees;
        failed += usize::from(!ok);
        let note = if s.discrepancy() { " (numeric discrepancy)" } else { "" };
        println!(
            "{} significance {}: two-sided p {:.4}, one-sided p {:.4}, published {:.4}{note}",
            if checked { verdict(ok) } else { "INFO" },
            s.metric.name(),
            s.test.p_value,
            s.test.p_greater,
            s.published_p
        );
    }
    if let Some(out) = &c.out {
        write_json(&out.join("fixtures.json"), &report)?;
    }
    if failed > 0 {
        return Err(CliError::FixturesFailed(failed));
    }
    Ok(())
}

pub fn export_latents(models: &Path, out: &Path) -> CliResult<()> {
    let model: LatentSpaceModel = modelio::load(&models.join(LATENT_FILE))?;
    write_text(out, &export_latents_csv(&model))
}
