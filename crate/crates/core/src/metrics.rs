//! Evaluation quantities and metric reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use steallab_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::losses::{diversity_batch, neg_entropy};
use crate::models::ClassifierModel;
use crate::oracle::{check_distribution_rows, VictimOracle};

/// Anything that labels a batch of inputs by argmax (lowest index on ties).
pub trait Predictor {
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>>;
}

impl Predictor for ClassifierModel {
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.predict(x)
    }
}

impl Predictor for VictimOracle {
    /// Experimenter-side labels; never charged to the attacker's budget.
    fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.evaluator_labels(x)
    }
}

fn fraction_equal(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(steallab_autodiff::AutodiffError::Shape {
            op: "metric",
            detail: format!("{} predictions vs {} references", a.len(), b.len()),
        }
        .into());
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &dyn Predictor, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    fraction_equal(&model.predict_labels(inputs)?, labels)
}

/// Fraction of inputs on which the two predictors choose the same class.
pub fn agreement(clone: &dyn Predictor, victim: &dyn Predictor, inputs: &Tensor) -> Result<f64> {
    fraction_equal(&clone.predict_labels(inputs)?, &victim.predict_labels(inputs)?)
}

/// Entropy in nats of the column-mean posterior over a query set.
pub fn query_set_entropy(posteriors: &Tensor) -> Result<f64> {
    Ok(-diversity_batch(posteriors)?)
}

/// Running column sums of victim posteriors, for the entropy of every query seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyAccumulator {
    sums: Vec<f64>,
    rows: u64,
}

impl EntropyAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            sums: vec![0.0; num_classes],
            rows: 0,
        }
    }

    pub fn add(&mut self, posteriors: &Tensor) -> Result<()> {
        check_distribution_rows(posteriors)?;
        let k = self.sums.len();
        if posteriors.shape()[1] != k {
            return Err(Error::MalformedDistribution {
                row: 0,
                reason: format!("expected {k} classes, got {}", posteriors.shape()[1]),
            });
        }
        for row in posteriors.data().chunks(k) {
            for (s, p) in self.sums.iter_mut().zip(row) {
                *s += p;
            }
        }
        self.rows += posteriors.shape()[0] as u64;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    /// Zero before any rows were added.
    pub fn entropy(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let mean: Vec<f64> = self.sums.iter().map(|s| s / self.rows as f64).collect();
        -neg_entropy(&mean)
    }
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "run_id",
    "queries_used",
    "accuracy",
    "agreement",
    "entropy_nats",
    "elapsed_s",
    "config_fingerprint",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub queries_used: u64,
    pub accuracy: f64,
    pub agreement: f64,
    pub entropy_nats: f64,
    pub elapsed_s: f64,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` means JSON, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

/// Rounds to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

impl MetricRow {
    fn rendered(&self) -> MetricRow {
        MetricRow {
            accuracy: round_sig6(self.accuracy),
            agreement: round_sig6(self.agreement),
            entropy_nats: round_sig6(self.entropy_nats),
            elapsed_s: round_sig6(self.elapsed_s),
            ..self.clone()
        }
    }
}

/// Renders rows to text in the given format.
pub fn render_report(rows: &[MetricRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::config("rows", "a report needs at least one row"));
    }
    let rendered: Vec<MetricRow> = rows.iter().map(MetricRow::rendered).collect();
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rendered {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::io("report", e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rendered)?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn emit_report(rows: &[MetricRow], path: &Path, format: ReportFormat) -> Result<()> {
    let text = render_report(rows, format)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn schema(column: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        column: column.to_string(),
        reason: reason.into(),
    }
}

fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    for (i, want) in REPORT_COLUMNS.iter().enumerate() {
        match header.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(schema(want, format!("found `{got}` in position {i}"))),
            None => return Err(schema(want, "missing")),
        }
    }
    if let Some(extra) = header.get(REPORT_COLUMNS.len()) {
        return Err(schema(extra, "unexpected column"));
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let float = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| schema(REPORT_COLUMNS[i], format!("`{}` is not a number", field(i))))
        };
        rows.push(MetricRow {
            run_id: field(0).to_string(),
            queries_used: field(1)
                .parse()
                .map_err(|_| schema(REPORT_COLUMNS[1], format!("`{}` is not an integer", field(1))))?,
            accuracy: float(2)?,
            agreement: float(3)?,
            entropy_nats: float(4)?,
            elapsed_s: float(5)?,
            config_fingerprint: field(6).to_string(),
        });
    }
    Ok(rows)
}

fn parse_json(text: &str) -> Result<Vec<MetricRow>> {
    let values: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(text)?;
    let mut rows = Vec::with_capacity(values.len());
    for obj in values {
        if let Some(extra) = obj.keys().find(|k| !REPORT_COLUMNS.contains(&k.as_str())) {
            return Err(schema(extra, "unexpected column"));
        }
        let get = |col: &str| obj.get(col).ok_or_else(|| schema(col, "missing"));
        let text = |col: &str| -> Result<String> {
            get(col)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(col, "expected a string"))
        };
        let float = |col: &str| -> Result<f64> { get(col)?.as_f64().ok_or_else(|| schema(col, "expected a number")) };
        rows.push(MetricRow {
            run_id: text("run_id")?,
            queries_used: get("queries_used")?
                .as_u64()
                .ok_or_else(|| schema("queries_used", "expected a non-negative integer"))?,
            accuracy: float("accuracy")?,
            agreement: float("agreement")?,
            entropy_nats: float("entropy_nats")?,
            elapsed_s: float("elapsed_s")?,
            config_fingerprint: text("config_fingerprint")?,
        });
    }
    Ok(rows)
}

/// Parses a report previously written by [`emit_report`], in either format.
pub fn read_report(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        parse_json(&text)
    } else {
        parse_csv(&text)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Final row of every run, then the median over runs sharing a config fingerprint.
///
/// Output is ordered by fingerprint; each summary row's `run_id` is
/// `median-of-<runs>`.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut finals: BTreeMap<(&str, &str), &MetricRow> = BTreeMap::new();
    for r in rows {
        let key = (r.config_fingerprint.as_str(), r.run_id.as_str());
        match finals.get(&key) {
            Some(prev) if prev.queries_used > r.queries_used => {}
            _ => {
                finals.insert(key, r);
            }
        }
    }
    let mut groups: BTreeMap<&str, Vec<&MetricRow>> = BTreeMap::new();
    for ((fp, _), r) in finals {
        groups.entry(fp).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(fp, runs)| {
            let pick = |f: fn(&MetricRow) -> f64| median(&mut runs.iter().map(|r| f(r)).collect::<Vec<_>>());
            MetricRow {
                run_id: format!("median-of-{}", runs.len()),
                queries_used: pick(|r| r.queries_used as f64).round() as u64,
                accuracy: pick(|r| r.accuracy),
                agreement: pick(|r| r.agreement),
                entropy_nats: pick(|r| r.entropy_nats),
                elapsed_s: pick(|r| r.elapsed_s),
                config_fingerprint: fp.to_string(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(usize);

    impl Predictor for Constant {
        fn predict_labels(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok(vec![self.0; x.shape()[0]])
        }
    }

    fn row(run: &str, q: u64, agr: f64, fp: &str) -> MetricRow {
        MetricRow {
            run_id: run.into(),
            queries_used: q,
            accuracy: agr / 2.0,
            agreement: agr,
            entropy_nats: 1.234567891,
            elapsed_s: 0.0,
            config_fingerprint: fp.into(),
        }
    }

    #[test]
    fn constant_predictor_on_balanced_set() {
        let x = Tensor::zeros(&[8, 2]);
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        assert_eq!(accuracy(&Constant(0), &x, &labels).unwrap(), 0.25);
        assert!(accuracy(&Constant(0), &x, &labels[..3]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let uniform = Tensor::full(&[3, 10], 0.1);
        assert!((query_set_entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut half = vec![0.0; 20];
        half[0] = 1.0;
        half[11] = 1.0;
        let half = Tensor::new(&[2, 10], half).unwrap();
        assert!((query_set_entropy(&half).unwrap() - 2f64.ln()).abs() < 1e-12);
        let one_hot = Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert!(query_set_entropy(&one_hot).unwrap().abs() < 1e-10);
    }

    #[test]
    fn accumulator_matches_batch_entropy() {
        let a = Tensor::new(&[2, 3], vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
        let b = Tensor::new(&[1, 3], vec![0.1, 0.8, 0.1]).unwrap();
        let mut acc = EntropyAccumulator::new(3);
        acc.add(&a).unwrap();
        acc.add(&b).unwrap();
        let all = Tensor::new(&[3, 3], [a.data(), b.data()].concat()).unwrap();
        assert!((acc.entropy() - query_set_entropy(&all).unwrap()).abs() < 1e-12);
        assert_eq!(acc.rows(), 3);
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(round_sig6(2.302585093), 2.30259);
        assert_eq!(round_sig6(0.8125), 0.8125);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(0.0), 0.0);
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row("a", 10, 0.5, "f"), row("a", 20, 0.75, "f"), row("b", 20, 1.0, "g")];
        emit_report(&rows, &path, ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        let back = read_report(&path).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            let shown = a.rendered();
            for (orig, want, got) in [
                (a.entropy_nats, shown.entropy_nats, b.entropy_nats),
                (a.agreement, shown.agreement, b.agreement),
            ] {
                assert!((got - want).abs() <= 1e-6 * want.abs());
                assert!((got - orig).abs() <= 5e-6 * orig.abs());
            }
            assert_eq!(a.queries_used, b.queries_used);
        }
    }

    #[test]
    fn json_keys_match_csv_header() {
        let text = render_report(&[row("a", 1, 0.5, "f")], ReportFormat::Json).unwrap();
        let v: Vec<serde_json::Map<String, serde_json::Value>> = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<&str> = v[0].keys().map(String::as_str).collect();
        let mut want = REPORT_COLUMNS.to_vec();
        keys.sort_unstable();
        want.sort_unstable();
        assert_eq!(keys, want);
    }

    #[test]
    fn schema_mismatch_names_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "run_id,queries,accuracy\nx,1,0.5\n").unwrap();
        match read_report(&path) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "queries_used"),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::write(&path, format!("{}\nx,abc,0,0,0,0,f\n", REPORT_COLUMNS.join(","))).unwrap();
        match read_report(&path) {
            Err(Error::Schema { column, .. }) => assert_eq!(column, "queries_used"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn summary_takes_medians_of_final_rows() {
        let rows = vec![
            row("s0", 10, 0.1, "f"),
            row("s0", 20, 0.6, "f"),
            row("s1", 20, 0.9, "f"),
            row("s2", 20, 0.7, "f"),
            row("t0", 20, 0.3, "g"),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].config_fingerprint, "f");
        assert_eq!(s[0].agreement, 0.7);
        assert_eq!(s[0].run_id, "median-of-3");
        assert_eq!(s[1].agreement, 0.3);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(render_report(&[], ReportFormat::Csv).is_err());
    }
}
