//! Confusion-matrix metrics and comparison-table reporting.
//!
//! Accuracy is reported as a percentage of all samples, precision and recall
//! as fractions of predicted and actual positives. Undefined metrics (zero
//! denominators) raise a typed error rather than silently reporting 0, since
//! silent zeros corrupt model comparisons. "Parasitized" is the positive
//! class; a probability p predicts positive iff p >= threshold.

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Bundled reference results for the four compared models, at their published
/// precision. Rendered through [`format_report`] for side-by-side comparison.
pub const REFERENCE_METRICS_CSV: &str = include_str!("../fixtures/reference_metrics.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }
}

/// Count thresholded predictions against hard labels.
pub fn confusion(probs: &[f64], labels: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if probs.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidInput(
            "confusion counting requires hard {0,1} labels".into(),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in probs.iter().zip(labels.iter()) {
        let pred = p >= threshold;
        match (pred, y == 1.0) {
            (true, true) => cm.true_pos += 1,
            (false, false) => cm.true_neg += 1,
            (true, false) => cm.false_pos += 1,
            (false, true) => cm.false_neg += 1,
        }
    }
    Ok(cm)
}

/// (TP + TN) / (TP + TN + FP + FN) x 100.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty matrix"));
    }
    Ok((cm.true_pos + cm.true_neg) as f64 / total as f64 * 100.0)
}

/// TP / (TP + FP).
pub fn precision(cm: &ConfusionMatrix) -> Result<f64> {
    let denom = cm.true_pos + cm.false_pos;
    if denom == 0 {
        return Err(Error::UndefinedMetric("precision with no predicted positives"));
    }
    Ok(cm.true_pos as f64 / denom as f64)
}

/// TP / (TP + FN).
pub fn recall(cm: &ConfusionMatrix) -> Result<f64> {
    let denom = cm.true_pos + cm.false_neg;
    if denom == 0 {
        return Err(Error::UndefinedMetric("recall with no actual positives"));
    }
    Ok(cm.true_pos as f64 / denom as f64)
}

/// A metric value plus the decimal precision it is rendered at. Reference
/// tables quote values at heterogeneous precision (0.90 vs 0.9875), so the
/// precision travels with the value to keep rendering byte-exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub decimals: u8,
}

impl MetricValue {
    pub fn new(value: f64, decimals: u8) -> Self {
        MetricValue { value, decimals }
    }

    fn parse(text: &str) -> Result<Self> {
        let value: f64 = text
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad metric value {text:?}")))?;
        let decimals = text.split_once('.').map_or(0, |(_, frac)| frac.len()) as u8;
        Ok(MetricValue { value, decimals })
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.*}", self.decimals as usize, self.value)
    }
}

/// One comparison-table row. `accuracy` is stored as a fraction in [0,1]
/// (the percentage divided by 100), matching the reference table convention.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub accuracy: MetricValue,
    pub precision: MetricValue,
    pub recall: MetricValue,
}

impl MetricsReport {
    /// Evaluate all three metrics from a confusion matrix, rendered at four
    /// decimal places.
    pub fn from_confusion(model: impl Into<String>, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(MetricsReport {
            model: model.into(),
            accuracy: MetricValue::new(accuracy(cm)? / 100.0, 4),
            precision: MetricValue::new(precision(cm)?, 4),
            recall: MetricValue::new(recall(cm)?, 4),
        })
    }
}

const HEADERS: [&str; 4] = ["Model Name", "Accuracy", "Precision", "Recall"];

/// Render reports as a fixed-width text table.
pub fn format_report(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<[String; 4]> = vec![HEADERS.map(str::to_string)];
    for r in reports {
        rows.push([
            r.model.clone(),
            r.accuracy.to_string(),
            r.precision.to_string(),
            r.recall.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0) + 2)
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 3 {
                line.push_str(cell);
            } else {
                line.push_str(&format!("{cell:<width$}", width = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Parse a table produced by [`format_report`] back into reports.
pub fn parse_report(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty report".into()))?;
    if !header.starts_with(HEADERS[0]) {
        return Err(Error::InvalidInput("missing report header".into()));
    }
    let mut reports = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("  ").filter(|s| !s.trim().is_empty()).collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!("bad report row {line:?}")));
        }
        reports.push(MetricsReport {
            model: fields[0].trim().to_string(),
            accuracy: MetricValue::parse(fields[1].trim())?,
            precision: MetricValue::parse(fields[2].trim())?,
            recall: MetricValue::parse(fields[3].trim())?,
        });
    }
    Ok(reports)
}

/// CSV export: `model,accuracy,precision,recall`, one row per report.
pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("model,accuracy,precision,recall\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.accuracy, r.precision, r.recall
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("model,accuracy,precision,recall") => {}
        other => {
            return Err(Error::InvalidInput(format!(
                "bad metrics CSV header {other:?}"
            )))
        }
    }
    let mut reports = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!("bad metrics CSV row {line:?}")));
        }
        reports.push(MetricsReport {
            model: fields[0].to_string(),
            accuracy: MetricValue::parse(fields[1])?,
            precision: MetricValue::parse(fields[2])?,
            recall: MetricValue::parse(fields[3])?,
        });
    }
    Ok(reports)
}

/// The bundled reference rows (four models at published precision).
pub fn reference_reports() -> Vec<MetricsReport> {
    parse_csv(REFERENCE_METRICS_CSV).expect("bundled fixture parses")
}
