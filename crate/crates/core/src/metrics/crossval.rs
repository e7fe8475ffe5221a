use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Averages, MetricsReport};

/// Mean and population standard deviation of one metric across folds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValCell {
    pub mean: f64,
    pub std: f64,
    /// Folds that contributed a value (AUC is undefined in folds lacking
    /// the class).
    pub n_folds: usize,
}

impl CrossValCell {
    fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n_folds: values.len(),
        })
    }
}

/// Renders `mean(std)` with three decimals, e.g. `0.934(0.010)`.
pub fn format_cell(cell: Option<&CrossValCell>) -> String {
    match cell {
        Some(c) => format!("{:.3}({:.3})", c.mean, c.std),
        None => "-".to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValRow {
    pub label: String,
    pub precision: Option<CrossValCell>,
    pub recall: Option<CrossValCell>,
    pub auc: Option<CrossValCell>,
    pub f1: Option<CrossValCell>,
    pub support: Option<CrossValCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValTable {
    pub n_folds: usize,
    pub rows: Vec<CrossValRow>,
}

fn collect<'a>(
    reports: &'a [MetricsReport],
    f: impl Fn(&'a MetricsReport) -> Option<f64>,
) -> Option<CrossValCell> {
    let values: Vec<f64> = reports.iter().filter_map(f).collect();
    CrossValCell::from_values(&values)
}

fn average_row(
    label: &str,
    reports: &[MetricsReport],
    pick: impl Fn(&MetricsReport) -> &Averages,
) -> CrossValRow {
    CrossValRow {
        label: label.to_string(),
        precision: collect(reports, |r| Some(pick(r).precision)),
        recall: collect(reports, |r| Some(pick(r).recall)),
        auc: collect(reports, |r| pick(r).auc),
        f1: collect(reports, |r| Some(pick(r).f1)),
        support: collect(reports, |r| Some(r.total_support as f64)),
    }
}

fn scalar_row(
    label: &str,
    reports: &[MetricsReport],
    value: impl Fn(&MetricsReport) -> f64,
) -> CrossValRow {
    CrossValRow {
        label: label.to_string(),
        precision: None,
        recall: collect(reports, |r| Some(value(r))),
        auc: None,
        f1: None,
        support: None,
    }
}

/// Per-cell mean and population std over fold reports. Rows: one per
/// grade, then macro, weighted and micro averages, then balanced accuracy
/// and accuracy (reported in the recall column, of which they are the
/// macro and micro means).
pub fn crossval_aggregate(fold_reports: &[MetricsReport]) -> Result<CrossValTable> {
    if fold_reports.len() < 2 {
        return Err(Error::Aggregation(format!(
            "need at least 2 fold reports, got {}",
            fold_reports.len()
        )));
    }
    let n_classes = fold_reports[0].per_class.len();
    if fold_reports.iter().any(|r| r.per_class.len() != n_classes) {
        return Err(Error::Aggregation(
            "fold reports disagree on class count".into(),
        ));
    }
    let mut rows: Vec<CrossValRow> = (0..n_classes)
        .map(|c| CrossValRow {
            label: fold_reports[0].per_class[c].class.to_string(),
            precision: collect(fold_reports, |r| Some(r.per_class[c].precision)),
            recall: collect(fold_reports, |r| Some(r.per_class[c].recall)),
            auc: collect(fold_reports, |r| r.per_class[c].auc),
            f1: collect(fold_reports, |r| Some(r.per_class[c].f1)),
            support: collect(fold_reports, |r| Some(r.per_class[c].support as f64)),
        })
        .collect();
    rows.push(average_row("Macro average", fold_reports, |r| &r.macro_avg));
    rows.push(average_row("Weighted average", fold_reports, |r| {
        &r.weighted_avg
    }));
    rows.push(average_row("Micro average", fold_reports, |r| &r.micro_avg));
    rows.push(scalar_row("Balanced accuracy", fold_reports, |r| {
        r.balanced_accuracy
    }));
    rows.push(scalar_row("Accuracy", fold_reports, |r| r.accuracy));
    Ok(CrossValTable {
        n_folds: fold_reports.len(),
        rows,
    })
}

impl CrossValTable {
    pub fn row(&self, label: &str) -> Option<&CrossValRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv_string(&self) -> String {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["mSASSS", "precision", "recall", "auc", "f1", "support"])
            .expect("in-memory write");
        for row in &self.rows {
            wtr.write_record([
                row.label.clone(),
                format_cell(row.precision.as_ref()),
                format_cell(row.recall.as_ref()),
                format_cell(row.auc.as_ref()),
                format_cell(row.f1.as_ref()),
                format_cell(row.support.as_ref()),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory writer")).expect("utf8")
    }

    /// Fixed-width table with the columns Precision, Recall, AUC(ROC),
    /// F1-score.
    pub fn to_text_table(&self) -> String {
        let mut out = format!(
            "{:<18}{:>16}{:>16}{:>16}{:>16}\n",
            "mSASSS", "Precision", "Recall", "AUC(ROC)", "F1-score"
        );
        for row in &self.rows {
            out += &format!(
                "{:<18}{:>16}{:>16}{:>16}{:>16}\n",
                row.label,
                format_cell(row.precision.as_ref()),
                format_cell(row.recall.as_ref()),
                format_cell(row.auc.as_ref()),
                format_cell(row.f1.as_ref()),
            );
        }
        out += &format!(
            "({}-fold cross-validation, mean(population std))\n",
            self.n_folds
        );
        out
    }
}
