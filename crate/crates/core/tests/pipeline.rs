use std::collections::BTreeSet;

use facesim::dataset::{generate_corpus, Corpus, ExpressionLabel, IdentityId};
use facesim::eval::{classify, classify_baseline, evaluate, GroundTruth, PipelineConfig};
use facesim::gplvm::{fit_hierarchical, FitOptions, HierarchicalModel, LatentModel};
use facesim::imagecore::{ssim, FaceImage, RegionPartition, SsimParams};
use facesim::matcher::{MatchConfig, Matcher, Refinement};
use facesim::transcoder::{fit_pca, synthesis_error, JointRegion, Transcode, TranscodeMode};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIMS: (usize, usize) = (140, 154);

fn corpus(n: usize) -> Corpus {
    generate_corpus(n, DIMS, 11).unwrap()
}

fn partition() -> RegionPartition {
    RegionPartition::default_face(DIMS.0, DIMS.1).unwrap()
}

fn latent_model(c: &Corpus) -> HierarchicalModel {
    fit_hierarchical(c.training(), &partition(), 2, 2, &FitOptions::default()).unwrap().0
}

#[test]
fn corpus_is_deterministic_in_seed() {
    let a = generate_corpus(3, (60, 66), 5).unwrap();
    assert_eq!(a, generate_corpus(3, (60, 66), 5).unwrap());
    assert_ne!(a, generate_corpus(3, (60, 66), 6).unwrap());
    for set in std::iter::once(a.training()).chain(a.subjects().values()) {
        assert_eq!(set.len(), ExpressionLabel::ALL.len());
        for img in set.values() {
            assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}

#[test]
fn pca_transcode_leaves_observer_images_fixed() {
    let c = corpus(2);
    let pca = fit_pca(c.training(), &partition(), 9).unwrap();
    let p = SsimParams::default();
    for (label, img) in c.training() {
        let back = pca.transcode(img, TranscodeMode::Mean).unwrap();
        let s = ssim(&back, img, &p).unwrap();
        assert!(s >= 0.99, "{label}: {s}");
    }
}

#[test]
fn synthesis_error_on_observer_is_small() {
    let c = corpus(3);
    let pca = fit_pca(c.training(), &partition(), 9).unwrap();
    let set = synthesis_error(&pca, &[IdentityId::OBSERVER], &c, &SsimParams::default()).unwrap();
    assert_eq!(set.entries.len(), 10);
    assert!(set.mean_ssim >= 0.99, "{}", set.mean_ssim);
    assert!(set.mean_rms < 0.02, "{}", set.mean_rms);
    assert_eq!(set.region_rms.len(), partition().regions().len());
    for e in &set.entries {
        assert_eq!(e.residual.len(), DIMS.0 * DIMS.1);
    }
}

#[test]
fn sampled_transcode_matches_conditional_variance() {
    let wa = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, -0.5, 0.8, 0.3, -1.1]);
    let wo = DMatrix::from_row_slice(2, 2, &[0.7, -0.4, 0.1, 1.3]);
    let region = JointRegion::from_parts(
        "toy",
        DVector::from_vec(vec![0.1, 0.2, 0.3]),
        DVector::from_vec(vec![0.5, 0.4]),
        wa,
        wo,
        0.05,
        0.1,
    )
    .unwrap();
    let y = DVector::from_vec(vec![0.4, -0.2, 0.9]);
    let mean = region.conditional_mean(&y);
    let var = region.conditional_covariance().diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut sum = DVector::zeros(2);
    let mut sq = DVector::zeros(2);
    for _ in 0..n {
        let d = region.sample(&y, &mut rng) - &mean;
        sum += &d;
        sq += d.component_mul(&d);
    }
    for k in 0..2 {
        let emp = sq[k] / n as f64 - (sum[k] / n as f64).powi(2);
        assert!((emp / var[k] - 1.0).abs() < 0.05, "dim {k}: {emp} vs {}", var[k]);
        assert!((sum[k] / n as f64).abs() < 4.0 * (var[k] / n as f64).sqrt());
    }
}

#[test]
fn each_instance_is_closest_to_its_label_mean() {
    let c = generate_corpus(29, DIMS, 42).unwrap();
    let p = SsimParams::default();
    let sets: Vec<_> = std::iter::once(c.training()).chain(c.subjects().values()).collect();
    let means: Vec<FaceImage> = ExpressionLabel::ALL
        .iter()
        .map(|l| {
            let imgs: Vec<&FaceImage> = sets.iter().map(|s| &s[l]).collect();
            FaceImage::from_fn(DIMS.0, DIMS.1, |r, col| {
                imgs.iter().map(|i| i.get(r, col)).sum::<f64>() / imgs.len() as f64
            })
            .unwrap()
        })
        .collect();
    let mut consistent = 0;
    let mut total = 0;
    for set in &sets {
        for (&label, img) in set.iter() {
            let scores: Vec<f64> = means.iter().map(|m| ssim(img, m, &p).unwrap()).collect();
            let own = scores[label.index()];
            consistent += usize::from(scores.iter().enumerate().all(|(k, &s)| k == label.index() || own > s));
            total += 1;
        }
    }
    assert_eq!(total, 290);
    assert!(consistent as f64 >= 0.9 * total as f64, "{consistent}/{total}");
}

#[test]
fn baseline_confuses_near_duplicates_more() {
    let c = corpus(6);
    let p = SsimParams::default();
    let truth = c.training();
    let (mut near, mut far) = (0.0, 0.0);
    for set in c.subjects().values() {
        let smile = &set[&ExpressionLabel::Smile];
        near += ssim(smile, &truth[&ExpressionLabel::FakeSmile], &p).unwrap();
        far += ssim(smile, &truth[&ExpressionLabel::Anger], &p).unwrap();
    }
    assert!(near > far, "{near} vs {far}");
}

#[test]
fn baseline_classifier_matches_naive_scan() {
    let c = corpus(3);
    let p = SsimParams::default();
    for set in c.subjects().values() {
        for img in set.values() {
            let mut best = (f64::NEG_INFINITY, ExpressionLabel::Anger);
            for l in ExpressionLabel::ALL {
                let s = ssim(img, &c.training()[&l], &p).unwrap();
                if s > best.0 {
                    best = (s, l);
                }
            }
            assert_eq!(classify_baseline(img, &c, &p).unwrap(), best.1);
        }
    }
}

#[test]
fn observer_images_are_recovered_by_every_condition() {
    let c = corpus(2);
    let model = latent_model(&c);
    let gt = GroundTruth::new(c.training(), SsimParams::default()).unwrap();
    let matcher = Matcher::new(&model, MatchConfig::default()).unwrap();
    for (&label, img) in c.training() {
        assert!((gt.score(img, label).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(gt.classify(img).unwrap(), label);
        let m = matcher.detect(img).unwrap();
        assert!(gt.score(&m.generated_image, label).unwrap() >= 0.99);
        assert_eq!(classify(&m.x_star, &model).unwrap(), label);
    }
}

#[test]
fn matcher_trace_is_monotone_and_feasible() {
    let c = corpus(3);
    let model = latent_model(&c);
    for refinement in [Refinement::PatternSearch, Refinement::Barrier] {
        let config = MatchConfig {
            refinement,
            vocabulary_count: 100,
            max_refine_iters: 30,
            ..MatchConfig::default()
        };
        let matcher = Matcher::new(&model, config).unwrap();
        let bounds = matcher.bounds().to_vec();
        for set in c.subjects().values() {
            for img in set.values().step_by(3) {
                let m = matcher.detect(img).unwrap();
                assert!(m.score >= m.initial_score);
                assert!(m.trace.windows(2).all(|w| w[1].score >= w[0].score), "{refinement:?}");
                for p in &m.trace {
                    assert!(p.x.iter().zip(&bounds).all(|(v, (lo, hi))| lo <= v && v <= hi));
                }
                let generated: FaceImage = model.generate(&m.x_star).unwrap();
                assert_eq!(generated, m.generated_image);
            }
        }
    }
}

#[test]
fn small_evaluation_accounts_for_every_test_image() {
    let c = generate_corpus(5, DIMS, 3).unwrap();
    let config = PipelineConfig {
        matcher: MatchConfig {
            vocabulary_count: 64,
            refinement: Refinement::None,
            ..MatchConfig::default()
        },
        ..PipelineConfig::default()
    };
    let report = evaluate(&c, &config).unwrap();
    let n = c.subjects().len() * ExpressionLabel::ALL.len();
    assert_eq!(report.records.len(), n);
    let keys: BTreeSet<_> = report.records.iter().map(|r| (r.identity, r.label)).collect();
    assert_eq!(keys.len(), n);
    assert_eq!(report.baseline_confusion.total() as usize, n);
    assert_eq!(report.model_confusion.total() as usize, n);
    let r = &report.reconstruction;
    for cond in [&r.baseline, &r.transcode_only, &r.full_model] {
        assert_eq!(cond.scores.len(), n);
    }
    for (i, rec) in report.records.iter().enumerate() {
        assert_eq!(r.baseline.scores[i], rec.baseline_ssim);
        assert_eq!(r.full_model.scores[i], rec.full_model_ssim);
        let fold = &report.folds[rec.fold].split;
        assert!(fold.test_ids.contains(&rec.identity));
    }
    assert_eq!(report.significance.len(), 5);
}
