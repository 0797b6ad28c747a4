use std::collections::BTreeSet;

use facesim::dataset::{make_folds, Corpus, ExpressionLabel, ExpressionSet, IdentityId};
use facesim::eval::{class_metrics, wilcoxon_signed_rank, ConfusionMatrix, MetricKind};
use facesim::gplvm::{kernel_with_noise, log_likelihood, RbfKernelParams};
use facesim::imagecore::{assemble_regions, extract_all, ssim, FaceImage, RegionPartition, SsimParams};
use facesim::transcoder::{JointRegion, ACTOR_JITTER};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn image(w: usize, h: usize) -> impl Strategy<Value = FaceImage> {
    prop::collection::vec(0.0..=1.0f64, w * h).prop_map(move |p| FaceImage::new(w, h, p).unwrap())
}

fn image_pair() -> impl Strategy<Value = (FaceImage, FaceImage)> {
    (12usize..24, 12usize..24).prop_flat_map(|(w, h)| (image(w, h), image(w, h)))
}

fn params() -> SsimParams {
    SsimParams::with_window(7, 1.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ssim_of_image_with_itself_is_one(a in (12usize..24, 12usize..24).prop_flat_map(|(w, h)| image(w, h))) {
        prop_assert!((ssim(&a, &a, &params()).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded((a, b) in image_pair()) {
        let ab = ssim(&a, &b, &params()).unwrap();
        let ba = ssim(&b, &a, &params()).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn extract_assemble_round_trip_is_exact(a in (32usize..60, 36usize..70).prop_flat_map(|(w, h)| image(w, h))) {
        let partition = RegionPartition::default_face(a.width(), a.height()).unwrap();
        let back = assemble_regions(&extract_all(&a, &partition).unwrap(), &partition).unwrap();
        prop_assert_eq!(back.pixels(), a.pixels());
    }
}

fn tiny_set(seed: u32) -> ExpressionSet {
    ExpressionLabel::ALL
        .iter()
        .map(|&l| (l, FaceImage::filled(1, 1, f64::from((seed + l.index() as u32) % 7) / 7.0).unwrap()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_every_subject(subjects in 4usize..40, seed in any::<u64>()) {
        let corpus = Corpus::new(
            (1, 1),
            0,
            tiny_set(0),
            (1..=subjects as u32).map(|i| (IdentityId(i), tiny_set(i))).collect(),
        )
        .unwrap();
        let folds = make_folds(&corpus, seed).unwrap();
        prop_assert_eq!(&folds, &make_folds(&corpus, seed).unwrap());
        let all: BTreeSet<IdentityId> = corpus.subject_ids().into_iter().collect();
        let mut seen = BTreeSet::new();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_ids.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &folds {
            let test: BTreeSet<_> = f.test_ids.iter().copied().collect();
            let val: BTreeSet<_> = f.validation_ids.iter().copied().collect();
            prop_assert!(test.is_disjoint(&val));
            prop_assert_eq!(&test | &val, all.clone());
            for id in &f.test_ids {
                prop_assert!(seen.insert(*id), "subject tested twice");
            }
        }
        prop_assert_eq!(seen, all);
    }
}

/// Loadings, means and noise levels of a random joint region.
#[derive(Debug, Clone)]
struct Toy {
    da: usize,
    do_: usize,
    l: usize,
    wa: Vec<f64>,
    wo: Vec<f64>,
    ma: Vec<f64>,
    mo: Vec<f64>,
    sa: f64,
    so: f64,
    y: Vec<f64>,
}

fn toy() -> impl Strategy<Value = Toy> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(da, do_, l)| {
        (
            prop::collection::vec(-2.0..2.0f64, da * l),
            prop::collection::vec(-2.0..2.0f64, do_ * l),
            prop::collection::vec(-1.0..1.0f64, da),
            prop::collection::vec(-1.0..1.0f64, do_),
            0.01..1.0f64,
            0.01..1.0f64,
            prop::collection::vec(-3.0..3.0f64, da),
        )
            .prop_map(move |(wa, wo, ma, mo, sa, so, y)| Toy { da, do_, l, wa, wo, ma, mo, sa, so, y })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conditional_matches_dense_regression_formula(t in toy()) {
        let wa = DMatrix::from_row_slice(t.da, t.l, &t.wa);
        let wo = DMatrix::from_row_slice(t.do_, t.l, &t.wo);
        let (ma, mo) = (DVector::from_vec(t.ma.clone()), DVector::from_vec(t.mo.clone()));
        let region = JointRegion::from_parts("r", ma.clone(), mo.clone(), wa.clone(), wo.clone(), t.sa, t.so).unwrap();

        // Sigma_aa carries the same jitter the model adds to the actor noise
        let saa = &wa * wa.transpose() + DMatrix::identity(t.da, t.da) * (t.sa + ACTOR_JITTER);
        let soa = &wo * wa.transpose();
        let soo = &wo * wo.transpose() + DMatrix::identity(t.do_, t.do_) * t.so;
        let inv = saa.clone().lu().try_inverse().unwrap();
        let y = DVector::from_vec(t.y.clone());
        let mean = &mo + &soa * &inv * (&y - &ma);
        let cov = &soo - &soa * &inv * soa.transpose();

        let scale = 1.0 + mean.amax();
        prop_assert!((region.conditional_mean(&y) - &mean).amax() <= 1e-8 * scale);
        let got = region.conditional_covariance();
        prop_assert!((&got - &cov).amax() <= 1e-8 * (1.0 + cov.amax()));
        let min_eig = got.symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-8);
    }

    #[test]
    fn kernel_is_exactly_symmetric_and_likelihood_matches_dense_oracle(
        n in 1usize..8,
        d in 1usize..6,
        xs in prop::collection::vec(-2.0..2.0f64, 16),
        ys in prop::collection::vec(-2.0..2.0f64, 48),
        s in 0.2..3.0f64,
        ell in 0.3..3.0f64,
        noise in 0.01..1.0f64,
    ) {
        let x = DMatrix::from_fn(n, 2, |i, k| xs[i * 2 + k]);
        let y = DMatrix::from_fn(n, d, |i, k| ys[i * 6 + k]);
        let p = RbfKernelParams::new(s, ell, noise).unwrap();
        let k = kernel_with_noise(&x, &p);
        prop_assert_eq!(&k, &k.transpose());
        let oracle = {
            let det = k.determinant();
            let inv = k.clone().try_inverse().unwrap();
            let tr = (&inv * &y * y.transpose()).trace();
            -0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * d as f64 * det.ln() - 0.5 * tr
        };
        let got = log_likelihood(&x, &y, &p).unwrap();
        prop_assert!((got - oracle).abs() <= 1e-10 * (1.0 + oracle.abs()));
    }
}

fn confusion() -> impl Strategy<Value = (ConfusionMatrix, usize)> {
    prop::collection::vec((0usize..10, 0usize..10), 1..300).prop_map(|pairs| {
        let mut cm = ConfusionMatrix::new();
        for (t, p) in &pairs {
            cm.record(ExpressionLabel::from_index(*t).unwrap(), ExpressionLabel::from_index(*p).unwrap());
        }
        (cm, pairs.len())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn confusion_accounting_and_metric_ranges((cm, n) in confusion()) {
        prop_assert_eq!(cm.total() as usize, n);
        let m = class_metrics(&cm);
        for c in &m.per_class {
            let o = c.counts;
            prop_assert_eq!((o.tp + o.fp + o.fn_ + o.tn) as usize, n);
            for k in MetricKind::ALL {
                if let Some(v) = c.get(k) {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            // a zero denominator must surface as undefined, never as 0
            prop_assert_eq!(c.precision.is_none(), o.tp + o.fp == 0);
            prop_assert_eq!(c.sensitivity.is_none(), o.tp + o.fn_ == 0);
        }
    }

    #[test]
    fn wilcoxon_p_in_unit_interval_and_symmetric(
        a in prop::collection::vec(-5.0..5.0f64, 2..40),
        shift in prop::collection::vec(-1.0..1.0f64, 40),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        prop_assert!(r.p_greater > 0.0 && r.p_greater <= 1.0);
        let rev = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert!((r.p_value - rev.p_value).abs() <= 1e-12);
        prop_assert!((r.p_greater - rev.p_less).abs() <= 1e-12);
    }

    #[test]
    fn exact_p_is_monotone_in_statistic(n in 2usize..15, m1 in any::<u32>(), m2 in any::<u32>()) {
        // distinct magnitudes 1..n with random signs
        let signed = |mask: u32| -> Vec<f64> {
            (1..=n).map(|i| if mask >> (i - 1) & 1 == 1 { i as f64 } else { -(i as f64) }).collect()
        };
        let zeros = vec![0.0; n];
        let r1 = wilcoxon_signed_rank(&signed(m1), &zeros).unwrap();
        let r2 = wilcoxon_signed_rank(&signed(m2), &zeros).unwrap();
        if r1.statistic <= r2.statistic {
            prop_assert!(r1.p_value <= r2.p_value);
        } else {
            prop_assert!(r1.p_value >= r2.p_value);
        }
    }
}
