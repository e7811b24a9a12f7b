//! Accuracy bookkeeping, calibration splits and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::ReweightVariant;
use crate::scalar::{argmax, Real};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("records mix {0}")]
    Inconsistent(&'static str),
    #[error("relative change undefined for a zero base")]
    ZeroBase,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("probability vectors have differing lengths")]
    Ragged,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    ChilsStandard,
    ChilsNone,
    ChilsSubAgg,
    ChilsSupSpace,
    BestPossible,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Baseline,
        Method::ChilsStandard,
        Method::ChilsNone,
        Method::ChilsSubAgg,
        Method::ChilsSupSpace,
        Method::BestPossible,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::ChilsStandard => "chils_standard",
            Method::ChilsNone => "chils_none",
            Method::ChilsSubAgg => "chils_sub_agg",
            Method::ChilsSupSpace => "chils_sup_space",
            Method::BestPossible => "best_possible",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Column heading in markdown tables.
    pub fn heading(self) -> &'static str {
        match self {
            Method::Baseline => "Superclass",
            Method::ChilsStandard => "CHiLS",
            Method::ChilsNone => "CHiLS (no RW)",
            Method::ChilsSubAgg => "CHiLS (RW sub w/ agg sub)",
            Method::ChilsSupSpace => "CHiLS (RW agg sub w/ sup)",
            Method::BestPossible => "Best possible",
        }
    }

    /// Reweighting variant behind a CHiLS method.
    pub fn variant(self) -> Option<ReweightVariant> {
        match self {
            Method::ChilsStandard => Some(ReweightVariant::Standard),
            Method::ChilsNone => Some(ReweightVariant::None),
            Method::ChilsSubAgg => Some(ReweightVariant::SubWithAggSub),
            Method::ChilsSupSpace => Some(ReweightVariant::AggSubWithSup),
            Method::Baseline | Method::BestPossible => None,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub domain: Option<String>,
    pub method: Method,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub n: usize,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean accuracy over domains of one dataset and method.
pub fn domain_average(records: &[EvalRecord]) -> Result<EvalRecord, EvalError> {
    let first = records.first().ok_or(EvalError::Empty)?;
    if records.iter().any(|r| r.dataset != first.dataset) {
        return Err(EvalError::Inconsistent("datasets"));
    }
    if records.iter().any(|r| r.method != first.method) {
        return Err(EvalError::Inconsistent("methods"));
    }
    // sorted so the sum does not depend on input order
    let mut accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    accs.sort_by(f64::total_cmp);
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(EvalRecord {
        dataset: first.dataset.clone(),
        domain: None,
        method: first.method,
        accuracy: mean,
        n: records.iter().map(|r| r.n).sum(),
    })
}

/// Percent change from `base` to `new`.
pub fn relative_change(base: f64, new: f64) -> Result<f64, EvalError> {
    if base == 0.0 {
        return Err(EvalError::ZeroBase);
    }
    Ok(100.0 * (new - base) / base)
}

/// Argmax probabilities split by outcome, per true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration<T> {
    /// Probability of the true class on items predicted correctly.
    pub correct: Vec<T>,
    /// Probability of the (wrong) predicted class on misclassified items.
    pub incorrect: Vec<T>,
    pub mean_correct: Option<T>,
    pub mean_incorrect: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary<T> {
    pub classes: Vec<ClassCalibration<T>>,
}

fn mean<T: Real>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    let total = values.iter().fold(0.0f64, |acc, v| acc + v.as_f64());
    Some(T::of(total / values.len() as f64))
}

impl<T: Real> CalibrationSummary<T> {
    /// Mean over every correctly classified item, pooled across classes.
    pub fn overall_mean_correct(&self) -> Option<T> {
        mean(&self.classes.iter().flat_map(|c| c.correct.iter().copied()).collect::<Vec<_>>())
    }

    pub fn overall_mean_incorrect(&self) -> Option<T> {
        mean(&self.classes.iter().flat_map(|c| c.incorrect.iter().copied()).collect::<Vec<_>>())
    }
}

/// Routes each item's argmax probability into its true class's correct or
/// incorrect list.
pub fn calibration_split<T: Real, V: AsRef<[T]>>(
    prob_vectors: &[V],
    labels: &[usize],
) -> Result<CalibrationSummary<T>, EvalError> {
    if prob_vectors.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: prob_vectors.len(),
            right: labels.len(),
        });
    }
    let n_classes = match prob_vectors.first() {
        Some(v) => v.as_ref().len(),
        None => return Err(EvalError::Empty),
    };
    let mut classes: Vec<ClassCalibration<T>> = (0..n_classes)
        .map(|_| ClassCalibration {
            correct: Vec::new(),
            incorrect: Vec::new(),
            mean_correct: None,
            mean_incorrect: None,
        })
        .collect();
    for (probs, &label) in prob_vectors.iter().zip(labels) {
        let probs = probs.as_ref();
        if probs.len() != n_classes {
            return Err(EvalError::Ragged);
        }
        if label >= n_classes {
            return Err(EvalError::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        let pred = argmax(probs).ok_or(EvalError::Empty)?;
        let entry = &mut classes[label];
        if pred == label {
            entry.correct.push(probs[pred]);
        } else {
            entry.incorrect.push(probs[pred]);
        }
    }
    for c in &mut classes {
        c.mean_correct = mean(&c.correct);
        c.mean_incorrect = mean(&c.incorrect);
    }
    Ok(CalibrationSummary { classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

fn pct(acc: f64) -> String {
    format!("{:.2}", 100.0 * acc)
}

fn sorted(records: &[EvalRecord]) -> Vec<&EvalRecord> {
    let mut rows: Vec<&EvalRecord> = records.iter().collect();
    rows.sort_by(|a, b| {
        (&a.dataset, a.method, &a.domain)
            .cmp(&(&b.dataset, b.method, &b.domain))
            .then(a.accuracy.total_cmp(&b.accuracy))
    });
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct JsonRow<'a> {
    dataset: &'a str,
    domain: Option<&'a str>,
    method: Method,
    accuracy: serde_json::Number,
    n: usize,
}

/// Renders records; rows are ordered by (dataset, method, domain) and
/// accuracies printed as percentages with two decimals.
pub fn render_report(records: &[EvalRecord], format: ReportFormat) -> Result<String, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows = sorted(records);
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("dataset,domain,method,accuracy,n\n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    csv_field(&r.dataset),
                    csv_field(r.domain.as_deref().unwrap_or("")),
                    r.method,
                    pct(r.accuracy),
                    r.n
                );
            }
        }
        ReportFormat::Json => {
            let json: Vec<JsonRow> = rows
                .iter()
                .map(|r| JsonRow {
                    dataset: &r.dataset,
                    domain: r.domain.as_deref(),
                    method: r.method,
                    accuracy: pct(r.accuracy).parse().expect("formatted float parses"),
                    n: r.n,
                })
                .collect();
            out = serde_json::to_string_pretty(&json).expect("report serializes");
            out.push('\n');
        }
        ReportFormat::Markdown => out = markdown(&rows),
    }
    Ok(out)
}

/// One row per (dataset, domain), one column per method; CHiLS-family
/// columns carry the point change against the superclass baseline.
fn markdown(rows: &[&EvalRecord]) -> String {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut keys: Vec<(&str, Option<&str>)> =
        rows.iter().map(|r| (r.dataset.as_str(), r.domain.as_deref())).collect();
    keys.sort();
    keys.dedup();

    let mut out = String::from("| Dataset |");
    for m in &methods {
        let _ = write!(out, " {} |", m.heading());
    }
    out.push_str("\n|---|");
    for _ in &methods {
        out.push_str("---:|");
    }
    out.push('\n');
    for (dataset, domain) in keys {
        let find = |m: Method| {
            rows.iter()
                .find(|r| r.dataset == dataset && r.domain.as_deref() == domain && r.method == m)
        };
        let base = find(Method::Baseline).map(|r| r.accuracy);
        match domain {
            Some(d) => {
                let _ = write!(out, "| {dataset} / {d} |");
            }
            None => {
                let _ = write!(out, "| {dataset} |");
            }
        }
        for &m in &methods {
            match find(m) {
                None => out.push_str(" N/A |"),
                Some(r) => {
                    let cell = pct(r.accuracy);
                    match base {
                        Some(b) if m != Method::Baseline => {
                            let delta = 100.0 * (r.accuracy - b);
                            let _ = write!(out, " {cell} ({delta:+.2}) |");
                        }
                        _ => {
                            let _ = write!(out, " {cell} |");
                        }
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn emit_report(records: &[EvalRecord], format: ReportFormat, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    let text = render_report(records, format)?;
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dataset: &str, domain: Option<&str>, method: Method, accuracy: f64, n: usize) -> EvalRecord {
        EvalRecord {
            dataset: dataset.into(),
            domain: domain.map(Into::into),
            method,
            accuracy,
            n,
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(accuracy(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn macro_average() {
        let r = domain_average(&[
            rec("d", Some("x"), Method::Baseline, 0.8, 10),
            rec("d", Some("y"), Method::Baseline, 0.6, 1000),
        ])
        .unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-15);
        assert_eq!(r.n, 1010);
        let one = domain_average(&[rec("d", Some("x"), Method::ChilsNone, 0.42, 3)]).unwrap();
        assert_eq!(one.accuracy, 0.42);
        let three = domain_average(&[
            rec("d", Some("a"), Method::Baseline, 0.9, 1),
            rec("d", Some("b"), Method::Baseline, 0.9, 1),
            rec("d", Some("c"), Method::Baseline, 0.3, 1),
        ])
        .unwrap();
        assert!((three.accuracy - 0.7).abs() < 1e-12);
        assert!(domain_average(&[]).is_err());
        assert!(domain_average(&[
            rec("d", None, Method::Baseline, 0.9, 1),
            rec("e", None, Method::Baseline, 0.9, 1)
        ])
        .is_err());
    }

    #[test]
    fn macro_average_permutation_invariant() {
        let accs = [0.1, 0.7, 0.33, 0.91, 0.5];
        let mut recs: Vec<_> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| rec("d", Some(&format!("{i}")), Method::Baseline, a, 1))
            .collect();
        let a = domain_average(&recs).unwrap().accuracy;
        recs.reverse();
        recs.swap(0, 2);
        assert_eq!(domain_average(&recs).unwrap().accuracy, a);
    }

    #[test]
    fn relative_change_examples() {
        assert!((relative_change(0.5, 0.55).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_change(0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(relative_change(0.0, 0.5), Err(EvalError::ZeroBase)));
    }

    #[test]
    fn calibration_examples() {
        let s = calibration_split(&[vec![0.9f64, 0.1], vec![0.8, 0.2]], &[0, 0]).unwrap();
        assert_eq!(s.classes[0].correct, vec![0.9, 0.8]);
        assert!((s.classes[0].mean_correct.unwrap() - 0.85).abs() < 1e-15);
        assert!(s.classes[0].incorrect.is_empty());
        assert_eq!(s.classes[0].mean_incorrect, None);

        let wrong = calibration_split(&[vec![0.3f64, 0.7], vec![0.6, 0.4]], &[0, 1]).unwrap();
        assert!(wrong.classes.iter().all(|c| c.correct.is_empty()));
        assert_eq!(wrong.classes[0].incorrect, vec![0.7]);
        assert_eq!(wrong.classes[1].incorrect, vec![0.6]);

        let single = calibration_split(&[vec![1.0f32, 0.0]], &[0]).unwrap();
        assert_eq!(single.classes[0].mean_correct, Some(1.0));
        assert!(calibration_split::<f64, Vec<f64>>(&[vec![1.0, 0.0]], &[0, 1]).is_err());
    }

    #[test]
    fn csv_report() {
        let out = render_report(&[rec("cifar20", None, Method::Baseline, 0.596, 100)], ReportFormat::Csv).unwrap();
        assert_eq!(out, "dataset,domain,method,accuracy,n\ncifar20,,baseline,59.60,100\n");
    }

    #[test]
    fn reports_are_deterministic_and_sorted() {
        let recs = vec![
            rec("b", None, Method::ChilsStandard, 0.9, 4),
            rec("a", Some("y"), Method::Baseline, 0.5, 4),
            rec("a", Some("x"), Method::Baseline, 0.25, 4),
        ];
        for f in [ReportFormat::Csv, ReportFormat::Json, ReportFormat::Markdown] {
            assert_eq!(render_report(&recs, f).unwrap(), render_report(&recs, f).unwrap());
        }
        let csv = render_report(&recs, ReportFormat::Csv).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[1], "a,x,baseline,25.00,4");
        assert_eq!(lines[2], "a,y,baseline,50.00,4");
        assert_eq!(lines[3], "b,,chils_standard,90.00,4");
        let json: serde_json::Value =
            serde_json::from_str(&render_report(&recs, ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(json[0]["accuracy"], serde_json::json!(25.0));
        assert!(render_report(&[], ReportFormat::Csv).is_err());
    }

    #[test]
    fn markdown_golden() {
        let recs = vec![
            rec("cifar20", None, Method::Baseline, 0.596, 10),
            rec("cifar20", None, Method::ChilsStandard, 0.853, 10),
            rec("objectnet", None, Method::Baseline, 0.531, 10),
            rec("objectnet", None, Method::ChilsStandard, 0.853, 10),
            rec("food", None, Method::Baseline, 0.939, 10),
        ];
        let expected = "\
| Dataset | Superclass | CHiLS |
|---|---:|---:|
| cifar20 | 59.60 | 85.30 (+25.70) |
| food | 93.90 | N/A |
| objectnet | 53.10 | 85.30 (+32.20) |
";
        assert_eq!(render_report(&recs, ReportFormat::Markdown).unwrap(), expected);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}
