use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ClassifyError, LabelSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences of the label.
    pub support: u64,
}

/// Gold-label evaluation. Undefined ratios (zero denominator) count as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub schema_id: String,
    pub labels: Vec<String>,
    /// One entry per schema label, in schema order.
    pub per_label: Vec<LabelMetrics>,
    /// Mean F1 over labels that occur in gold or pred.
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion_matrix[gold][pred]`, indexed by schema order.
    pub confusion_matrix: Vec<Vec<u64>>,
    pub total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ClassifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(ClassifyError::InvalidScores(format!("unknown report format `{other}`"))),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report<G: AsRef<str>, P: AsRef<str>>(
    gold: &[G],
    pred: &[P],
    schema: &LabelSchema,
) -> Result<ClassificationReport, ClassifyError> {
    if gold.len() != pred.len() {
        return Err(ClassifyError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    if gold.is_empty() {
        return Err(ClassifyError::EmptyInput);
    }
    let k = schema.len();
    let index = |label: &str| {
        schema
            .index_of(label)
            .ok_or_else(|| ClassifyError::UnknownLabel(label.to_string()))
    };
    let mut matrix = vec![vec![0u64; k]; k];
    let mut present = BTreeSet::new();
    for (g, p) in gold.iter().zip(pred) {
        let (gi, pi) = (index(g.as_ref())?, index(p.as_ref())?);
        matrix[gi][pi] += 1;
        present.insert(gi);
        present.insert(pi);
    }

    let per_label: Vec<LabelMetrics> = (0..k)
        .map(|i| {
            let tp = matrix[i][i];
            let predicted: u64 = (0..k).map(|g| matrix[g][i]).sum();
            let support: u64 = matrix[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label: schema.labels[i].clone(),
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();

    let macro_f1 = present.iter().map(|i| per_label[*i].f1).sum::<f64>() / present.len() as f64;
    let total = gold.len() as u64;
    let correct: u64 = (0..k).map(|i| matrix[i][i]).sum();
    Ok(ClassificationReport {
        schema_id: schema.schema_id.clone(),
        labels: schema.labels.clone(),
        per_label,
        macro_f1,
        accuracy: ratio(correct, total),
        confusion_matrix: matrix,
        total,
    })
}

impl ClassificationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Per-label rows followed by `macro_f1` and `accuracy` summary rows.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut write = |row: [String; 5]| writer.write_record(row).expect("in-memory write");
        write(["label", "precision", "recall", "f1", "support"].map(String::from));
        for m in &self.per_label {
            write([
                m.label.clone(),
                format!("{:.4}", m.precision),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.f1),
                m.support.to_string(),
            ]);
        }
        write([
            "macro_f1".into(),
            String::new(),
            String::new(),
            format!("{:.4}", self.macro_f1),
            self.total.to_string(),
        ]);
        write([
            "accuracy".into(),
            String::new(),
            String::new(),
            format!("{:.4}", self.accuracy),
            self.total.to_string(),
        ]);
        String::from_utf8(writer.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn export(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }
}
