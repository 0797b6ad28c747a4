use serde::{Deserialize, Serialize};

use crate::dataset::ExpressionLabel;
use crate::error::{Error, Result};

pub const CLASS_COUNT: usize = ExpressionLabel::ALL.len();

/// Rows are true labels, columns predictions, both in canonical label order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASS_COUNT]; CLASS_COUNT],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; CLASS_COUNT]; CLASS_COUNT]) -> Self {
        Self { counts }
    }

    pub fn record(&mut self, truth: ExpressionLabel, predicted: ExpressionLabel) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn get(&self, truth: ExpressionLabel, predicted: ExpressionLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, truth: ExpressionLabel) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..CLASS_COUNT).map(|i| self.counts[i][i]).sum()
    }

    pub fn off_diagonal_sum(&self) -> u64 {
        self.total() - self.diagonal_sum()
    }

    /// Off-diagonal counts between the near-duplicate label pairs, both directions.
    pub fn near_duplicate_confusions(&self) -> u64 {
        let mut n = 0;
        for a in ExpressionLabel::ALL {
            for b in ExpressionLabel::ALL {
                if a != b && ExpressionLabel::is_near_duplicate_pair(a, b) {
                    n += self.get(a, b);
                }
            }
        }
        n
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(other_row) {
                *c += o;
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in ExpressionLabel::ALL {
            out.push(',');
            out.push_str(l.name());
        }
        out.push('\n');
        for t in ExpressionLabel::ALL {
            out.push_str(t.name());
            for p in ExpressionLabel::ALL {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }
}

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl OneVsRest {
    pub fn of(cm: &ConfusionMatrix, label: ExpressionLabel) -> Self {
        let i = label.index();
        let tp = cm.counts[i][i];
        let fn_ = cm.row_sum(label) - tp;
        let fp = (0..CLASS_COUNT).map(|r| cm.counts[r][i]).sum::<u64>() - tp;
        let tn = cm.total() - tp - fn_ - fp;
        Self { tp, fp, fn_, tn }
    }
}

/// `None` marks a zero denominator; it serializes as `null`.
pub type Metric = Option<f64>;

fn ratio(num: u64, den: u64) -> Metric {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Sensitivity,
    Specificity,
    Accuracy,
    Precision,
    Npv,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Sensitivity,
        MetricKind::Specificity,
        MetricKind::Accuracy,
        MetricKind::Precision,
        MetricKind::Npv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sensitivity => "sensitivity",
            MetricKind::Specificity => "specificity",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Npv => "npv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub label: ExpressionLabel,
    pub counts: OneVsRest,
    pub sensitivity: Metric,
    pub specificity: Metric,
    pub accuracy: Metric,
    pub precision: Metric,
    pub npv: Metric,
}

impl PerClassMetrics {
    pub fn get(&self, kind: MetricKind) -> Metric {
        match kind {
            MetricKind::Sensitivity => self.sensitivity,
            MetricKind::Specificity => self.specificity,
            MetricKind::Accuracy => self.accuracy,
            MetricKind::Precision => self.precision,
            MetricKind::Npv => self.npv,
        }
    }
}

/// Mean over the classes where the metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub value: Metric,
    pub undefined_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<PerClassMetrics>,
    pub sensitivity: MacroAverage,
    pub specificity: MacroAverage,
    pub accuracy: MacroAverage,
    pub precision: MacroAverage,
    pub npv: MacroAverage,
}

impl ClassMetrics {
    pub fn macro_average(&self, kind: MetricKind) -> MacroAverage {
        match kind {
            MetricKind::Sensitivity => self.sensitivity,
            MetricKind::Specificity => self.specificity,
            MetricKind::Accuracy => self.accuracy,
            MetricKind::Precision => self.precision,
            MetricKind::Npv => self.npv,
        }
    }

    /// Per-class values of one metric in canonical order.
    pub fn column(&self, kind: MetricKind) -> Vec<Metric> {
        self.per_class.iter().map(|c| c.get(kind)).collect()
    }

    /// Like [`column`](Self::column) but fails if any class is undefined.
    pub fn defined_column(&self, kind: MetricKind) -> Result<Vec<f64>> {
        self.column(kind)
            .into_iter()
            .zip(ExpressionLabel::ALL)
            .map(|(v, l)| v.ok_or_else(|| Error::param("metric", format!("{} undefined for {l}", kind.name()))))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let fmt = |m: Metric| m.map_or_else(|| "undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("label,tp,fp,fn,tn,sensitivity,specificity,accuracy,precision,npv\n");
        for c in &self.per_class {
            out.push_str(&format!("{},{},{},{},{}", c.label, c.counts.tp, c.counts.fp, c.counts.fn_, c.counts.tn));
            for k in MetricKind::ALL {
                out.push(',');
                out.push_str(&fmt(c.get(k)));
            }
            out.push('\n');
        }
        out.push_str("macro,,,,");
        for k in MetricKind::ALL {
            out.push(',');
            out.push_str(&fmt(self.macro_average(k).value));
        }
        out.push('\n');
        out
    }
}

fn average(values: impl Iterator<Item = Metric>) -> MacroAverage {
    let (mut sum, mut n, mut undefined) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => undefined += 1,
        }
    }
    MacroAverage {
        value: (n > 0).then(|| sum / n as f64),
        undefined_count: undefined,
    }
}

pub fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let per_class: Vec<PerClassMetrics> = ExpressionLabel::ALL
        .iter()
        .map(|&label| {
            let c = OneVsRest::of(cm, label);
            PerClassMetrics {
                label,
                counts: c,
                sensitivity: ratio(c.tp, c.tp + c.fn_),
                specificity: ratio(c.tn, c.tn + c.fp),
                accuracy: ratio(c.tp + c.tn, c.tp + c.fp + c.fn_ + c.tn),
                precision: ratio(c.tp, c.tp + c.fp),
                npv: ratio(c.tn, c.tn + c.fn_),
            }
        })
        .collect();
    let avg = |k: MetricKind| average(per_class.iter().map(|c| c.get(k)));
    ClassMetrics {
        sensitivity: avg(MetricKind::Sensitivity),
        specificity: avg(MetricKind::Specificity),
        accuracy: avg(MetricKind::Accuracy),
        precision: avg(MetricKind::Precision),
        npv: avg(MetricKind::Npv),
        per_class,
    }
}
