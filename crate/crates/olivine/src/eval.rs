//! Evaluation: confusion matrix, accuracy/precision/recall/F1, per-epoch
//! curve logging, and plain-text report rendering.
//!
//! Headline precision/recall/F1 are macro-averaged (unweighted class means);
//! the report says so, since single scalars are ambiguous otherwise. The
//! `0/0 = 0` convention applies to classes that never occur.

use crate::error::{Error, Result};
use crate::train::EpochRecord;

/// K×K counts; rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid(format!("confusion matrix needs >= 2 classes, got {k}")));
        }
        Ok(ConfusionMatrix { k, counts: vec![0; k * k] })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn add(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.k + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        (0..self.k).map(|c| self.get(row, c)).sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, col)).sum()
    }
}

/// Tallies `M[y, ŷ] += 1` per sample.
pub fn confusion(predictions: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "confusion: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(k)?;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::invalid(format!(
                "confusion: class index out of range (prediction {p}, label {y}, k {k})"
            )));
        }
        m.add(y, p);
    }
    Ok(m)
}

/// Per-class and macro metrics derived from a confusion matrix.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub sample_count: u64,
    pub class_names: Vec<String>,
    pub matrix: ConfusionMatrix,
}

/// Metrics with default class names (`class0`, `class1`, ...).
pub fn derive_metrics(matrix: &ConfusionMatrix) -> Result<MetricsReport> {
    let names: Vec<String> = (0..matrix.k()).map(|i| format!("class{i}")).collect();
    derive_metrics_named(matrix, &names)
}

/// Metrics from a confusion matrix: `accuracy = trace/total`, per-class
/// `precision = M[k,k]/colsum`, `recall = M[k,k]/rowsum`, `F1 = 2PR/(P+R)`,
/// with `0/0 = 0` throughout; macro metrics are unweighted class means.
pub fn derive_metrics_named(matrix: &ConfusionMatrix, class_names: &[String]) -> Result<MetricsReport> {
    let k = matrix.k();
    if class_names.len() != k {
        return Err(Error::invalid(format!(
            "derive_metrics: {} class names for {k} classes",
            class_names.len()
        )));
    }
    let total = matrix.total();
    if total == 0 {
        return Err(Error::invalid("derive_metrics: empty confusion matrix"));
    }
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut f1 = Vec::with_capacity(k);
    for c in 0..k {
        let tp = matrix.get(c, c);
        let p = ratio(tp, matrix.col_sum(c));
        let r = ratio(tp, matrix.row_sum(c));
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(MetricsReport {
        accuracy: matrix.trace() as f64 / total as f64,
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        sample_count: total,
        class_names: class_names.to_vec(),
        matrix: matrix.clone(),
    })
}

/// Serializes training history as CSV with six decimal places per metric.
pub fn log_curves(history: &[EpochRecord]) -> Result<Vec<u8>> {
    if history.is_empty() {
        return Err(Error::invalid("log_curves: empty history"));
    }
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        ));
    }
    Ok(out.into_bytes())
}

/// Parses a curves CSV back into records (values carry the file's 1e-6
/// rounding).
pub fn read_curves(bytes: &[u8]) -> Result<Vec<EpochRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::format("curves: not valid UTF-8"))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,train_loss,train_acc,val_loss,val_acc") => {}
        other => return Err(Error::format(format!("curves: bad header {:?}", other.unwrap_or("")))),
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!("curves line {}: expected 5 fields", ln + 2)));
        }
        let bad = |what: &str| Error::format(format!("curves line {}: bad {what}", ln + 2));
        out.push(EpochRecord {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            train_loss: fields[1].parse().map_err(|_| bad("train_loss"))?,
            train_acc: fields[2].parse().map_err(|_| bad("train_acc"))?,
            val_loss: fields[3].parse().map_err(|_| bad("val_loss"))?,
            val_acc: fields[4].parse().map_err(|_| bad("val_acc"))?,
        });
    }
    Ok(out)
}

/// Published results of the full-scale models on the original study's private
/// olive dataset. Display-only context: that corpus is unavailable, so these
/// are never comparison targets or pass/fail thresholds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceResult {
    pub model: &'static str,
    pub accuracy_pct: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub const REFERENCE_MOBILENETV2: ReferenceResult =
    ReferenceResult { model: "MobileNetV2", accuracy_pct: 92.8, precision: 0.91, recall: 0.93, f1: 0.92 };

pub const REFERENCE_EFFICIENTNETB0: ReferenceResult =
    ReferenceResult { model: "EfficientNetB0", accuracy_pct: 94.5, precision: 0.94, recall: 0.95, f1: 0.94 };

/// Plain-text report: per-class and macro metrics, the confusion matrix, and
/// optionally the published reference rows.
pub fn render_report(report: &MetricsReport, reference: Option<&[ReferenceResult]>) -> String {
    let mut out = String::new();
    let k = report.matrix.k();
    out.push_str(&format!(
        "classification report ({} samples, {k} classes, macro averaging)\n\n",
        report.sample_count
    ));

    let name_w = report.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    out.push_str(&format!("{:<name_w$}  precision     recall         f1\n", "class"));
    for c in 0..k {
        out.push_str(&format!(
            "{:<name_w$}   {:.6}   {:.6}   {:.6}\n",
            report.class_names[c], report.precision[c], report.recall[c], report.f1[c]
        ));
    }
    out.push_str(&format!(
        "{:<name_w$}   {:.6}   {:.6}   {:.6}\n",
        "macro", report.macro_precision, report.macro_recall, report.macro_f1
    ));
    out.push_str(&format!("accuracy: {:.6}\n\n", report.accuracy));

    out.push_str("confusion matrix (rows = true class, columns = predicted)\n");
    let cell_w = report
        .class_names
        .iter()
        .map(|n| n.len())
        .chain((0..k * k).map(|i| report.matrix.counts[i].to_string().len()))
        .max()
        .unwrap_or(4)
        + 2;
    out.push_str(&format!("{:<name_w$}", ""));
    for name in &report.class_names {
        out.push_str(&format!("{name:>cell_w$}"));
    }
    out.push('\n');
    for r in 0..k {
        out.push_str(&format!("{:<name_w$}", report.class_names[r]));
        for c in 0..k {
            out.push_str(&format!("{:>cell_w$}", report.matrix.get(r, c)));
        }
        out.push('\n');
    }

    if let Some(rows) = reference {
        out.push('\n');
        out.push_str("reference results (display only):\n");
        for row in rows {
            out.push_str(&format!(
                "  {:<16} {:.1} / {:.2} / {:.2} / {:.2}   paper (private dataset — not comparable)\n",
                row.model, row.accuracy_pct, row.precision, row.recall, row.f1
            ));
        }
        out.push_str(
            "  note: rows above are accuracy% / precision / recall / f1; their averaging scheme is not stated in the source.\n",
        );
    }
    out
}

/// Machine-readable form of the report: flat `key = value` lines mirroring
/// the config format.
pub fn report_key_values(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("samples = {}\n", report.sample_count));
    out.push_str(&format!("classes = {}\n", report.matrix.k()));
    out.push_str(&format!("accuracy = {:.6}\n", report.accuracy));
    out.push_str(&format!("macro.precision = {:.6}\n", report.macro_precision));
    out.push_str(&format!("macro.recall = {:.6}\n", report.macro_recall));
    out.push_str(&format!("macro.f1 = {:.6}\n", report.macro_f1));
    for c in 0..report.matrix.k() {
        let name = &report.class_names[c];
        out.push_str(&format!("class.{name}.precision = {:.6}\n", report.precision[c]));
        out.push_str(&format!("class.{name}.recall = {:.6}\n", report.recall[c]));
        out.push_str(&format!("class.{name}.f1 = {:.6}\n", report.f1[c]));
    }
    for r in 0..report.matrix.k() {
        for c in 0..report.matrix.k() {
            out.push_str(&format!("confusion.{r}.{c} = {}\n", report.matrix.get(r, c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(k: usize, cells: &[(usize, usize, u64)]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k).unwrap();
        for &(r, c, n) in cells {
            for _ in 0..n {
                m.add(r, c);
            }
        }
        m
    }

    #[test]
    fn perfect_predictions_give_diagonal() {
        let m = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.trace(), 4);
        assert_eq!(m.total(), 4);
        let report = derive_metrics(&m).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert!(report.precision.iter().chain(&report.recall).chain(&report.f1).all(|&v| v == 1.0));
        assert_eq!(report.macro_f1, 1.0);
    }

    #[test]
    fn single_sample_lands_in_one_cell() {
        let m = confusion(&[0], &[2], 3).unwrap();
        assert_eq!(m.get(2, 0), 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn empty_inputs_make_zero_matrix_and_metrics_error() {
        let m = confusion(&[], &[], 4).unwrap();
        assert_eq!(m.total(), 0);
        assert!(derive_metrics(&m).is_err());
    }

    #[test]
    fn mismatched_or_out_of_range_inputs_error() {
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(ConfusionMatrix::new(1).is_err());
    }

    #[test]
    fn two_class_worked_example_is_exact() {
        // [[8, 2], [1, 9]]
        let m = matrix(2, &[(0, 0, 8), (0, 1, 2), (1, 0, 1), (1, 1, 9)]);
        let report = derive_metrics(&m).unwrap();
        assert!((report.accuracy - 0.85).abs() < 1e-12);
        assert!((report.precision[0] - 8.0 / 9.0).abs() < 1e-12);
        assert!((report.recall[0] - 0.8).abs() < 1e-12);
        let p0 = 8.0 / 9.0;
        let f1_0 = 2.0 * p0 * 0.8 / (p0 + 0.8);
        assert!((report.f1[0] - f1_0).abs() < 1e-12);
        // Class 1: precision 9/11, recall 9/10 → F1 = 6/7.
        assert!((report.f1[1] - 6.0 / 7.0).abs() < 1e-12);
        assert!((report.macro_f1 - (f1_0 + 6.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_zero_convention() {
        // Class 2 never true and never predicted.
        let m = matrix(3, &[(0, 0, 3), (1, 1, 2), (0, 1, 1)]);
        let report = derive_metrics(&m).unwrap();
        assert_eq!(report.precision[2], 0.0);
        assert_eq!(report.recall[2], 0.0);
        assert_eq!(report.f1[2], 0.0);
        // The macro mean includes the zero.
        assert!((report.macro_recall - (0.75 + 1.0 + 0.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn label_permutation_permutes_matrix_and_keeps_macro_metrics() {
        let preds = [0usize, 1, 2, 2, 0, 1, 1];
        let labels = [0usize, 1, 2, 0, 2, 1, 0];
        let m = confusion(&preds, &labels, 3).unwrap();
        let perm = [2usize, 0, 1];
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let pl: Vec<usize> = labels.iter().map(|&y| perm[y]).collect();
        let mp = confusion(&pp, &pl, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(m.get(r, c), mp.get(perm[r], perm[c]));
            }
        }
        let a = derive_metrics(&m).unwrap();
        let b = derive_metrics(&mp).unwrap();
        assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
    }

    #[test]
    fn accuracy_equals_mean_recall_only_when_balanced() {
        // Balanced: 10 per class.
        let balanced = matrix(2, &[(0, 0, 8), (0, 1, 2), (1, 0, 1), (1, 1, 9)]);
        let r = derive_metrics(&balanced).unwrap();
        assert!((r.accuracy - (r.recall[0] + r.recall[1]) / 2.0).abs() < 1e-12);
        // Unbalanced (20 vs 5) with unequal recalls.
        let skewed = matrix(2, &[(0, 0, 18), (0, 1, 2), (1, 0, 3), (1, 1, 2)]);
        let r2 = derive_metrics(&skewed).unwrap();
        assert!((r2.accuracy - (r2.recall[0] + r2.recall[1]) / 2.0).abs() > 1e-6);
    }

    fn record(epoch: usize, v: f32) -> EpochRecord {
        EpochRecord { epoch, train_loss: v, train_acc: v / 2.0, val_loss: v / 3.0, val_acc: v / 4.0 }
    }

    #[test]
    fn curves_single_record_two_lines() {
        let bytes = log_curves(&[record(1, 0.5)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
    }

    #[test]
    fn curves_round_trip_within_rounding() {
        let history: Vec<EpochRecord> = (1..=5).map(|e| record(e, 1.0 / e as f32)).collect();
        let parsed = read_curves(&log_curves(&history).unwrap()).unwrap();
        assert_eq!(parsed.len(), history.len());
        for (a, b) in history.iter().zip(&parsed) {
            assert_eq!(a.epoch, b.epoch);
            assert!((a.train_loss - b.train_loss).abs() < 1e-6);
            assert!((a.val_acc - b.val_acc).abs() < 1e-6);
        }
    }

    #[test]
    fn curves_preserve_order() {
        let history: Vec<EpochRecord> = (1..=4).map(|e| record(e, e as f32 / 10.0)).collect();
        let parsed = read_curves(&log_curves(&history).unwrap()).unwrap();
        let accs: Vec<f32> = parsed.iter().map(|r| r.val_acc).collect();
        let mut sorted = accs.clone();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(accs, sorted, "monotone in, monotone out");
        assert!(log_curves(&[]).is_err());
    }

    #[test]
    fn report_renders_reference_rows() {
        let m = matrix(2, &[(0, 0, 10), (1, 1, 10)]);
        let report = derive_metrics(&m).unwrap();
        let text = render_report(&report, Some(&[REFERENCE_MOBILENETV2, REFERENCE_EFFICIENTNETB0]));
        assert!(text.contains("92.8 / 0.91 / 0.93 / 0.92"), "{text}");
        assert!(text.contains("94.5 / 0.94 / 0.95 / 0.94"), "{text}");
        assert!(text.contains("paper (private dataset — not comparable)"));
        let bare = render_report(&report, None);
        assert!(!bare.contains("private dataset"));
    }

    #[test]
    fn key_value_report_is_flat_and_complete() {
        let m = matrix(2, &[(0, 0, 3), (1, 1, 1)]);
        let report = derive_metrics(&m).unwrap();
        let kv = report_key_values(&report);
        assert!(kv.contains("accuracy = 1.000000"));
        assert!(kv.contains("class.class0.f1 = 1.000000"));
        assert!(kv.contains("confusion.0.0 = 3"));
        for line in kv.lines() {
            assert!(line.contains(" = "), "line {line:?}");
        }
    }
}
