//! Confusion counts, metrics, threshold sweeps and result tables.
//!
//! Predictions use `score >= threshold` everywhere. A ratio whose
//! denominator is zero is reported as 0 with its degenerate flag set, never
//! as NaN.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Sum of two matrices. Counting is a commutative fold, so shards can be
    /// merged in any order.
    pub fn merge(self, other: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

/// Thresholds `scores` and counts against `labels` (1 = positive).
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        cm.record(s >= threshold, l == 1);
    }
    Ok(cm)
}

/// Which metric cells came from a zero denominator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degenerate {
    pub accuracy: bool,
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl Degenerate {
    pub fn any(&self) -> bool {
        self.accuracy || self.precision || self.recall || self.f1
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: Degenerate,
}

fn ratio(num: f64, den: f64, flag: &mut bool) -> f64 {
    if den == 0.0 {
        *flag = true;
        0.0
    } else {
        num / den
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Metrics {
    let mut d = Degenerate::default();
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let accuracy = ratio(tp + tn, cm.total() as f64, &mut d.accuracy);
    let precision = ratio(tp, tp + fp, &mut d.precision);
    let recall = ratio(tp, tp + fn_, &mut d.recall);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut d.f1);
    Metrics {
        accuracy,
        precision,
        recall,
        f1,
        degenerate: d,
    }
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub config: String,
    /// NaN for rows built from published values; stored as null.
    #[serde(deserialize_with = "nan_from_null")]
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(default)]
    pub degenerate: Degenerate,
    #[serde(default)]
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsRow {
    pub fn new(model: impl Into<String>, config: impl Into<String>, threshold: f64, cm: ConfusionMatrix) -> Self {
        let m = metrics(&cm);
        MetricsRow {
            model: model.into(),
            config: config.into(),
            threshold,
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate: m.degenerate,
            confusion: Some(cm),
        }
    }

    /// A row from already-computed values.
    pub fn from_values(
        model: impl Into<String>,
        config: impl Into<String>,
        accuracy: f64,
        precision: f64,
        recall: f64,
        f1: f64,
    ) -> Self {
        MetricsRow {
            model: model.into(),
            config: config.into(),
            threshold: f64::NAN,
            accuracy,
            precision,
            recall,
            f1,
            degenerate: Degenerate::default(),
            confusion: None,
        }
    }
}

/// One row per threshold, in the order given.
pub fn threshold_sweep(
    scores: &[f64],
    labels: &[u8],
    thresholds: &[f64],
    model: &str,
    config: &str,
) -> Result<Vec<MetricsRow>> {
    if thresholds.is_empty() {
        return Err(Error::Eval("no thresholds to sweep".into()));
    }
    thresholds
        .iter()
        .map(|&t| Ok(MetricsRow::new(model, config, t, confusion(scores, labels, t)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableStyle {
    Markdown,
    Csv,
}

const COLUMNS: [&str; 6] = ["Model", "Configuration", "Accuracy", "Precision", "Recall", "F1"];
const EMPTY_CELL: &str = "—";

fn cell(label: &str) -> &str {
    if label.is_empty() {
        EMPTY_CELL
    } else {
        label
    }
}

/// Renders rows with four decimals per metric.
///
/// ```
/// use synalign::evalreport::{render, MetricsRow, TableStyle};
///
/// let row = MetricsRow::from_values("BioWordVec", "", 0.9938, 0.8872, 0.9274, 0.9069);
/// let md = render(&[row], TableStyle::Markdown);
/// assert!(md.ends_with("| BioWordVec | — | 0.9938 | 0.8872 | 0.9274 | 0.9069 |\n"));
/// ```
pub fn render(rows: &[MetricsRow], style: TableStyle) -> String {
    let mut out = String::new();
    match style {
        TableStyle::Markdown => {
            writeln!(out, "| {} |", COLUMNS.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(COLUMNS.len())).unwrap();
            for r in rows {
                writeln!(
                    out,
                    "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    cell(&r.model).replace('|', "\\|"),
                    cell(&r.config).replace('|', "\\|"),
                    r.accuracy,
                    r.precision,
                    r.recall,
                    r.f1
                )
                .unwrap();
            }
        }
        TableStyle::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS).unwrap();
            for r in rows {
                w.write_record([
                    cell(&r.model).to_string(),
                    cell(&r.config).to_string(),
                    format!("{:.4}", r.accuracy),
                    format!("{:.4}", r.precision),
                    format!("{:.4}", r.recall),
                    format!("{:.4}", r.f1),
                ])
                .unwrap();
            }
            out = String::from_utf8(w.into_inner().unwrap()).unwrap();
        }
    }
    out
}

/// Parses a table produced by [`render`] back into rows (threshold unset).
pub fn parse_table(text: &str, style: TableStyle) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    let build = |fields: Vec<String>, line: usize| -> Result<MetricsRow> {
        if fields.len() != 6 {
            return Err(Error::parse(
                line,
                format!("expected 6 columns, found {}", fields.len()),
            ));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::parse(line, format!("{s:?}: {e}")))
        };
        let label = |s: &str| if s == EMPTY_CELL { String::new() } else { s.to_string() };
        Ok(MetricsRow::from_values(
            label(&fields[0]),
            label(&fields[1]),
            num(&fields[2])?,
            num(&fields[3])?,
            num(&fields[4])?,
            num(&fields[5])?,
        ))
    };
    match style {
        TableStyle::Markdown => {
            for (i, line) in text.lines().enumerate().skip(2) {
                let inner = line
                    .trim()
                    .strip_prefix('|')
                    .and_then(|l| l.strip_suffix('|'))
                    .ok_or_else(|| Error::parse(i + 1, "not a table row"))?;
                let mut fields = vec![String::new()];
                let mut chars = inner.chars().peekable();
                while let Some(c) = chars.next() {
                    match c {
                        '\\' if chars.peek() == Some(&'|') => {
                            fields.last_mut().unwrap().push('|');
                            chars.next();
                        }
                        '|' => fields.push(String::new()),
                        c => fields.last_mut().unwrap().push(c),
                    }
                }
                let fields = fields.into_iter().map(|f| f.trim().to_string()).collect();
                rows.push(build(fields, i + 1)?);
            }
        }
        TableStyle::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            for (i, rec) in r.records().enumerate() {
                let rec = rec.map_err(|e| Error::parse(i + 2, e.to_string()))?;
                rows.push(build(rec.iter().map(str::to_string).collect(), i + 2)?);
            }
        }
    }
    Ok(rows)
}

/// Orders rows by (model, config), stable for equal keys.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| (&a.model, &a.config).cmp(&(&b.model, &b.config)));
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn published_rows_survive_json() {
        let row = MetricsRow::from_values("m", "", 0.9938, 0.8872, 0.9274, 0.9069);
        let back: MetricsRow = serde_json::from_str(&serde_json::to_string(&row).unwrap()).unwrap();
        assert!(back.threshold.is_nan());
        assert_eq!(render(&[back], TableStyle::Csv), render(&[row], TableStyle::Csv));
    }

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0.9, 0.2], &[1, 0], 0.5).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (1, 1, 0, 0));
        let cm = confusion(&[1.0; 5], &[0; 5], 0.5).unwrap();
        assert_eq!(cm.fp, 5);
        let cm = confusion(&[0.9, 0.2, 0.8, 0.3], &[1, 0, 0, 1], 0.5).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (1, 1, 1, 1));
        assert!(confusion(&[0.1], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&ConfusionMatrix {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 1,
        });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (0.5, 0.5, 0.5, 0.5));
        assert!(!m.degenerate.any());

        let m = metrics(&ConfusionMatrix {
            tp: 0,
            fp: 0,
            fn_: 3,
            tn: 2,
        });
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.precision);
        assert!(m.degenerate.f1);

        let m = metrics(&ConfusionMatrix {
            tp: 4,
            fp: 0,
            fn_: 0,
            tn: 6,
        });
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn tie_rule() {
        let cm = confusion(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(cm.tp, 1);
    }

    #[test]
    fn sweep_edges() {
        let scores = [0.0, 0.3, 1.0];
        let labels = [1, 1, 0];
        let rows = threshold_sweep(&scores, &labels, &[0.0], "m", "").unwrap();
        assert_eq!(rows[0].recall, 1.0);
        let rows = threshold_sweep(&scores, &labels, &[1.0 + f64::EPSILON], "m", "").unwrap();
        assert_eq!(rows[0].recall, 0.0);
        assert!(threshold_sweep(&scores, &labels, &[], "m", "").is_err());
    }

    #[test]
    fn table4_baseline_row() {
        let row = MetricsRow::from_values("BioWordVec", "", 0.9938, 0.8872, 0.9274, 0.9069);
        let md = render(std::slice::from_ref(&row), TableStyle::Markdown);
        assert_eq!(
            md.lines().last().unwrap(),
            "| BioWordVec | — | 0.9938 | 0.8872 | 0.9274 | 0.9069 |"
        );
        let csv = render(&[row], TableStyle::Csv);
        assert_eq!(csv.lines().nth(1).unwrap(), "BioWordVec,—,0.9938,0.8872,0.9274,0.9069");
    }

    #[test]
    fn empty_tables_are_header_only() {
        assert_eq!(render(&[], TableStyle::Markdown).lines().count(), 2);
        assert_eq!(render(&[], TableStyle::Csv).lines().count(), 1);
        assert!(parse_table(&render(&[], TableStyle::Csv), TableStyle::Csv)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn round_trip_both_styles() {
        let rows = vec![
            MetricsRow::from_values("SapBERT", "average/avg-last4", 0.9859, 0.7696, 0.8591, 0.8119),
            MetricsRow::from_values("a|b, \"c\"", "", 0.5, 0.25, 0.125, 0.0625),
        ];
        for style in [TableStyle::Markdown, TableStyle::Csv] {
            let back = parse_table(&render(&rows, style), style).unwrap();
            for (x, y) in rows.iter().zip(&back) {
                assert_eq!((&x.model, &x.config), (&y.model, &y.config));
                assert_eq!(
                    [x.accuracy, x.precision, x.recall, x.f1],
                    [y.accuracy, y.precision, y.recall, y.f1]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn recall_non_increasing(data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..100)) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            let thresholds: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
            let rows = threshold_sweep(&scores, &labels, &thresholds, "m", "c").unwrap();
            for w in rows.windows(2) {
                prop_assert!(w[1].recall <= w[0].recall);
            }
        }

        #[test]
        fn label_swap_symmetry(data in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..100)) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = data.into_iter().unzip();
            let cm = confusion(&scores, &labels, 0.5).unwrap();
            let mut swapped = ConfusionMatrix::default();
            for (&s, &l) in scores.iter().zip(&labels) {
                swapped.record(s < 0.5, l == 0);
            }
            prop_assert_eq!((swapped.tp, swapped.tn, swapped.fp, swapped.fn_), (cm.tn, cm.tp, cm.fn_, cm.fp));
            prop_assert_eq!(metrics(&swapped).accuracy, metrics(&cm).accuracy);
            let m = metrics(&cm);
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
