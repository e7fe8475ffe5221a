//! Evaluation of 4-class corner grading under heavy class imbalance.
//!
//! Averages use the standard definitions: *macro* is the unweighted mean
//! over classes with non-zero support, *weighted* is the support-weighted
//! mean and *micro* pools all decisions (so micro precision, recall and F1
//! all equal accuracy for single-label data).

mod auc;
mod crossval;

use serde::{Deserialize, Serialize};

use crate::cascade::ScoreDistribution;
use crate::data::{MsasssScore, NUM_CLASSES};
use crate::error::{Error, Result};

pub use auc::{roc_auc, roc_auc_ovr};
pub use crossval::{crossval_aggregate, format_cell, CrossValCell, CrossValRow, CrossValTable};

/// Rows are true grades, columns predicted grades.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.counts[class][class]
    }

    /// Row sum: corners whose true grade is `class`.
    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    /// Column sum: corners predicted as `class`.
    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|row| row[class]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.true_positives(c)).sum();
        correct as f64 / total as f64
    }
}

pub fn confusion_matrix(y_true: &[MsasssScore], y_pred: &[MsasssScore]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Contract(
            "cannot build a confusion matrix from no samples".into(),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest ROC AUC; absent when the class has no positives or no
    /// negatives in the evaluated set.
    pub auc: Option<f64>,
    pub support: u64,
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let sum = precision + recall;
    if sum > 0.0 {
        2.0 * precision * recall / sum
    } else {
        0.0
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 per grade. Zero denominators yield 0.0.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..NUM_CLASSES)
        .map(|c| {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, cm.predicted(c));
            let recall = ratio(tp, cm.support(c));
            ClassMetrics {
                class: c as u8,
                precision,
                recall,
                f1: f1_score(precision, recall),
                auc: None,
                support: cm.support(c),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    #[serde(rename = "weighted")]
    pub weighted_avg: Averages,
    #[serde(rename = "micro")]
    pub micro_avg: Averages,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub total_support: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
}

fn mean_over<'a>(
    items: impl Iterator<Item = &'a ClassMetrics>,
    value: impl Fn(&ClassMetrics) -> Option<f64>,
) -> Option<f64> {
    let (sum, n) = items
        .filter_map(value)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn weighted_over<'a>(
    items: impl Iterator<Item = &'a ClassMetrics>,
    value: impl Fn(&ClassMetrics) -> Option<f64>,
) -> Option<f64> {
    let (sum, weight) = items
        .filter_map(|m| value(m).map(|v| (v, m.support)))
        .fold((0.0, 0u64), |(s, w), (v, sup)| {
            (s + v * sup as f64, w + sup)
        });
    (weight > 0).then(|| sum / weight as f64)
}

/// Combines per-class values into macro, weighted and micro averages.
///
/// Micro averages are reconstructed from recall and support (their sum is
/// the pooled true-positive count); micro AUC needs raw scores and is only
/// filled in by [`evaluate`].
pub fn aggregate_report(per_class: &[ClassMetrics]) -> Result<MetricsReport> {
    let total_support: u64 = per_class.iter().map(|m| m.support).sum();
    if total_support == 0 {
        return Err(Error::Report("all class supports are zero".into()));
    }
    if let Some(bad) = per_class.iter().find(|m| {
        [m.precision, m.recall, m.f1]
            .into_iter()
            .chain(m.auc)
            .any(|v| !(-1e-12..=1.0 + 1e-12).contains(&v))
    }) {
        return Err(Error::Report(format!(
            "class {} has a value outside [0, 1]",
            bad.class
        )));
    }
    let present = || per_class.iter().filter(|m| m.support > 0);
    let macro_avg = Averages {
        precision: mean_over(present(), |m| Some(m.precision)).unwrap_or(0.0),
        recall: mean_over(present(), |m| Some(m.recall)).unwrap_or(0.0),
        f1: mean_over(present(), |m| Some(m.f1)).unwrap_or(0.0),
        auc: mean_over(present(), |m| m.auc),
    };
    let weighted_avg = Averages {
        precision: weighted_over(per_class.iter(), |m| Some(m.precision)).unwrap_or(0.0),
        recall: weighted_over(per_class.iter(), |m| Some(m.recall)).unwrap_or(0.0),
        f1: weighted_over(per_class.iter(), |m| Some(m.f1)).unwrap_or(0.0),
        auc: weighted_over(per_class.iter(), |m| m.auc),
    };
    let accuracy = weighted_avg.recall;
    Ok(MetricsReport {
        per_class: per_class.to_vec(),
        balanced_accuracy: macro_avg.recall,
        macro_avg,
        weighted_avg,
        micro_avg: Averages {
            precision: accuracy,
            recall: accuracy,
            f1: accuracy,
            auc: None,
        },
        accuracy,
        total_support,
        confusion: None,
    })
}

/// Full per-corner evaluation from hard predictions and fused distributions.
pub fn evaluate(
    y_true: &[MsasssScore],
    y_pred: &[MsasssScore],
    dists: &[ScoreDistribution],
) -> Result<MetricsReport> {
    if y_true.is_empty() {
        return Err(Error::Report("no labeled corners to evaluate".into()));
    }
    if dists.len() != y_true.len() {
        return Err(Error::Contract(format!(
            "{} true labels but {} distributions",
            y_true.len(),
            dists.len()
        )));
    }
    let cm = confusion_matrix(y_true, y_pred)?;
    let mut per_class = per_class_metrics(&cm);
    for m in &mut per_class {
        m.auc = roc_auc_ovr(y_true, dists, MsasssScore::from_index(m.class as usize));
    }
    let mut report = aggregate_report(&per_class)?;

    // pooled one-vs-rest decisions over every (corner, grade) pair
    let mut scores = Vec::with_capacity(y_true.len() * NUM_CLASSES);
    let mut positive = Vec::with_capacity(y_true.len() * NUM_CLASSES);
    for (t, d) in y_true.iter().zip(dists) {
        for c in 0..NUM_CLASSES {
            scores.push(d.p()[c]);
            positive.push(t.index() == c);
        }
    }
    let accuracy = cm.accuracy();
    report.micro_avg = Averages {
        precision: accuracy,
        recall: accuracy,
        f1: accuracy,
        auc: roc_auc(&scores, &positive),
    };
    report.accuracy = accuracy;
    report.confusion = Some(cm);
    Ok(report)
}

impl MetricsReport {
    /// Per-grade rows followed by the averages, in the layout
    /// `grade  precision recall f1 auc support`.
    pub fn to_text_table(&self) -> String {
        let auc = |a: Option<f64>| a.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<18}{:>10}{:>10}{:>10}{:>10}{:>10}\n",
            "mSASSS", "Precision", "Recall", "F1-score", "AUC(ROC)", "Support"
        );
        for m in &self.per_class {
            out += &format!(
                "{:<18}{:>10.2}{:>10.2}{:>10.2}{:>10}{:>10}\n",
                m.class,
                m.precision,
                m.recall,
                m.f1,
                auc(m.auc),
                m.support
            );
        }
        for (name, a) in [
            ("Macro average", &self.macro_avg),
            ("Weighted average", &self.weighted_avg),
            ("Micro average", &self.micro_avg),
        ] {
            out += &format!(
                "{:<18}{:>10.2}{:>10.2}{:>10.2}{:>10}{:>10}\n",
                name,
                a.precision,
                a.recall,
                a.f1,
                auc(a.auc),
                self.total_support
            );
        }
        out += &format!(
            "{:<18}{:>10.4}\n",
            "Balanced accuracy", self.balanced_accuracy
        );
        out += &format!("{:<18}{:>10.4}\n", "Accuracy", self.accuracy);
        out
    }
}
