//! Published confusion matrices and the derived averages and p-values, used
//! to check the metric and significance arithmetic without any corpus.

use serde::Serialize;

use super::metrics::{class_metrics, ConfusionMatrix, MetricKind};
use super::wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};
use crate::error::Result;

pub const BASELINE_COUNTS: [[u64; 10]; 10] = [
    [20, 1, 3, 4, 0, 0, 0, 0, 0, 0],
    [0, 11, 7, 2, 1, 2, 0, 0, 3, 2],
    [0, 0, 25, 1, 0, 0, 0, 0, 2, 0],
    [1, 0, 3, 18, 0, 0, 0, 6, 0, 0],
    [0, 0, 4, 0, 16, 3, 0, 0, 4, 1],
    [0, 0, 15, 0, 0, 9, 2, 0, 2, 0],
    [0, 0, 14, 0, 0, 11, 2, 0, 1, 0],
    [1, 0, 6, 9, 0, 0, 0, 12, 0, 0],
    [0, 0, 5, 0, 1, 5, 0, 0, 17, 0],
    [0, 0, 0, 0, 1, 6, 0, 0, 4, 17],
];

pub const MODEL_COUNTS: [[u64; 10]; 10] = [
    [23, 1, 1, 2, 0, 0, 1, 0, 0, 0],
    [0, 24, 0, 0, 0, 2, 1, 0, 0, 1],
    [0, 0, 20, 1, 0, 5, 0, 0, 2, 0],
    [0, 0, 0, 22, 0, 0, 0, 6, 0, 0],
    [0, 1, 1, 0, 17, 5, 0, 0, 3, 1],
    [0, 0, 1, 0, 1, 24, 2, 0, 0, 0],
    [0, 2, 2, 0, 0, 17, 7, 0, 0, 0],
    [0, 0, 1, 8, 0, 0, 0, 19, 0, 0],
    [0, 1, 1, 0, 2, 10, 0, 0, 13, 1],
    [0, 1, 0, 0, 2, 5, 0, 0, 1, 19],
];

/// Published macro-averages in [`MetricKind::ALL`] order.
pub const BASELINE_AVERAGES: [f64; 5] = [0.5250, 0.9472, 0.9050, 0.6283, 0.9483];
pub const MODEL_AVERAGES: [f64; 5] = [0.6714, 0.9635, 0.9343, 0.7277, 0.9641];

/// Published p-values in [`MetricKind::ALL`] order.
pub const PUBLISHED_P_VALUES: [f64; 5] = [0.0537, 0.7646, 0.0049, 0.0322, 0.0674];

pub const AVERAGE_TOLERANCE: f64 = 0.005;
pub const P_VALUE_RELATIVE_TOLERANCE: f64 = 0.10;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

pub fn baseline_matrix() -> ConfusionMatrix {
    ConfusionMatrix::from_counts(BASELINE_COUNTS)
}

pub fn model_matrix() -> ConfusionMatrix {
    ConfusionMatrix::from_counts(MODEL_COUNTS)
}

#[derive(Clone, Debug, Serialize)]
pub struct AverageCheck {
    pub case: &'static str,
    pub metric: MetricKind,
    pub published: f64,
    pub computed: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SignificanceCheck {
    pub metric: MetricKind,
    pub baseline: Vec<f64>,
    pub model: Vec<f64>,
    pub test: WilcoxonResult,
    pub published_p: f64,
    /// Whether the two-sided or the one-sided (`model > baseline`) p lies
    /// within the relative tolerance of the published value.
    pub two_sided_matches: bool,
    pub one_sided_matches: bool,
    pub significance_agrees: bool,
}

impl SignificanceCheck {
    pub fn discrepancy(&self) -> bool {
        !(self.two_sided_matches || self.one_sided_matches)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FixtureReport {
    pub averages: Vec<AverageCheck>,
    pub significance: Vec<SignificanceCheck>,
}

impl FixtureReport {
    pub fn averages_pass(&self) -> bool {
        self.averages.iter().all(|c| c.pass)
    }

    /// Significance calls for accuracy and specificity agree with the published ones.
    pub fn significance_calls_pass(&self) -> bool {
        self.significance
            .iter()
            .filter(|s| matches!(s.metric, MetricKind::Accuracy | MetricKind::Specificity))
            .all(|s| s.significance_agrees)
    }

    pub fn pass(&self) -> bool {
        self.averages_pass() && self.significance_calls_pass()
    }
}

fn close(computed: f64, published: f64) -> bool {
    (computed - published).abs() <= P_VALUE_RELATIVE_TOLERANCE * published
}

pub fn run_fixtures() -> Result<FixtureReport> {
    let base = class_metrics(&baseline_matrix());
    let model = class_metrics(&model_matrix());
    let mut averages = Vec::new();
    for (case, metrics, published) in [("baseline", &base, BASELINE_AVERAGES), ("model", &model, MODEL_AVERAGES)] {
        for (k, p) in MetricKind::ALL.into_iter().zip(published) {
            let computed = metrics.macro_average(k).value.unwrap_or(f64::NAN);
            averages.push(AverageCheck {
                case,
                metric: k,
                published: p,
                computed,
                pass: (computed - p).abs() <= AVERAGE_TOLERANCE,
            });
        }
    }
    let mut significance = Vec::new();
    for (k, published_p) in MetricKind::ALL.into_iter().zip(PUBLISHED_P_VALUES) {
        let b = base.defined_column(k)?;
        let m = model.defined_column(k)?;
        let test = wilcoxon_signed_rank(&m, &b)?;
        significance.push(SignificanceCheck {
            metric: k,
            two_sided_matches: close(test.p_value, published_p),
            one_sided_matches: close(test.p_greater, published_p),
            significance_agrees: (test.p_value <= SIGNIFICANCE_LEVEL) == (published_p <= SIGNIFICANCE_LEVEL),
            baseline: b,
            model: m,
            test,
            published_p,
        });
    }
    Ok(FixtureReport { averages, significance })
}
