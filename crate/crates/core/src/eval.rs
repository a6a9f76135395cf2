//! Classification metrics, ROC curves and comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub class_names: Vec<String>,
    pub event_ids: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Per-row class scores, when the model produced them.
    pub scores: Option<Vec<Vec<f64>>>,
}

impl PredictionSet {
    pub fn new(
        class_names: Vec<String>,
        event_ids: Vec<String>,
        truth: Vec<usize>,
        predicted: Vec<usize>,
        scores: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = truth.len();
        if predicted.len() != n || event_ids.len() != n || scores.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::ShapeMismatch("prediction columns differ in length".into()));
        }
        let k = class_names.len();
        if truth.iter().chain(&predicted).any(|&c| c >= k) {
            return Err(Error::InvalidData("class index out of range".into()));
        }
        if let Some(rows) = &scores {
            if rows.iter().any(|r| r.len() != k) {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    got: rows.iter().find(|r| r.len() != k).map_or(0, Vec::len),
                });
            }
        }
        Ok(Self {
            class_names,
            event_ids,
            truth,
            predicted,
            scores,
        })
    }

    /// Predicted class is the argmax of each score row.
    pub fn from_scores(class_names: Vec<String>, event_ids: Vec<String>, truth: Vec<usize>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let predicted = scores.iter().map(|s| argmax(s)).collect();
        Self::new(class_names, event_ids, truth, predicted, Some(scores))
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    fn non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyPredictions)
        } else {
            Ok(())
        }
    }
}

pub fn accuracy(preds: &PredictionSet) -> Result<f64> {
    preds.non_empty()?;
    let hits = preds.truth.iter().zip(&preds.predicted).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `matrix[i][j]` counts rows of true class `i` predicted as `j`.
pub fn confusion_matrix(preds: &PredictionSet) -> Result<Vec<Vec<usize>>> {
    preds.non_empty()?;
    let k = preds.n_classes();
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in preds.truth.iter().zip(&preds.predicted) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Rows scaled to percentages; rows without support stay zero.
pub fn row_normalized(matrix: &[Vec<usize>]) -> Vec<Vec<f64>> {
    matrix
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Share of rows whose true class is this one.
    pub weight: f64,
    pub auc: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall, F1 and support weight; zero denominators give 0.
pub fn class_metrics(preds: &PredictionSet) -> Result<Vec<ClassMetrics>> {
    let m = confusion_matrix(preds)?;
    let n = preds.len();
    Ok((0..preds.n_classes())
        .map(|i| {
            let tp = m[i][i];
            let support: usize = m[i].iter().sum();
            let predicted: usize = m.iter().map(|row| row[i]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                name: preds.class_names[i].clone(),
                precision,
                recall,
                f1,
                support,
                weight: ratio(support, n),
                auc: None,
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(preds: &PredictionSet) -> Result<f64> {
    Ok(class_metrics(preds)?.iter().filter(|c| c.support > 0).map(|c| c.weight * c.f1).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Rows scoring at or above this value are called positive.
    pub threshold: f64,
}

/// ROC polyline with one vertex per distinct score, from (0,0) to (1,1).
/// `None` when either class is absent.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<RocPoint>> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    Some(points)
}

/// Trapezoidal area under an ROC polyline.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
        .sum()
}

/// Mann–Whitney statistic with midranks; ties count ½.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * order[i..j].iter().filter(|&&r| positive[r]).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// One-vs-rest AUC per class; `None` when the class is absent or universal.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over classes with an AUC.
    pub macro_auc: Option<f64>,
    pub curves: Vec<Option<Vec<RocPoint>>>,
}

pub fn roc_auc(preds: &PredictionSet) -> Result<AucReport> {
    preds.non_empty()?;
    let scores = preds
        .scores
        .as_ref()
        .ok_or_else(|| Error::InvalidData("ROC analysis needs class scores".into()))?;
    let mut per_class = Vec::new();
    let mut curves = Vec::new();
    for c in 0..preds.n_classes() {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = preds.truth.iter().map(|&t| t == c).collect();
        per_class.push(binary_auc(&s, &positive));
        curves.push(roc_curve(&s, &positive));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(AucReport {
        per_class,
        macro_auc,
        curves,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub n: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub classes: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
    /// Row percentages.
    pub confusion_pct: Vec<Vec<f64>>,
    pub macro_auc: Option<f64>,
    #[serde(skip)]
    pub curves: Vec<Option<Vec<RocPoint>>>,
}

pub fn evaluate(preds: &PredictionSet) -> Result<MetricReport> {
    let confusion = confusion_matrix(preds)?;
    let mut classes = class_metrics(preds)?;
    let (macro_auc, curves) = match &preds.scores {
        Some(_) => {
            let auc = roc_auc(preds)?;
            for (c, a) in classes.iter_mut().zip(&auc.per_class) {
                c.auc = *a;
            }
            (auc.macro_auc, auc.curves)
        }
        None => (None, vec![None; preds.n_classes()]),
    };
    Ok(MetricReport {
        class_names: preds.class_names.clone(),
        n: preds.len(),
        accuracy: accuracy(preds)?,
        weighted_f1: weighted_f1(preds)?,
        confusion_pct: row_normalized(&confusion),
        confusion,
        classes,
        macro_auc,
        curves,
    })
}

/// `class,fpr,tpr,threshold`; the leading (0,0) vertex has threshold `inf`.
pub fn roc_csv(report: &MetricReport) -> String {
    let mut out = String::from("class,fpr,tpr,threshold\n");
    for (name, curve) in report.class_names.iter().zip(&report.curves) {
        for p in curve.iter().flatten() {
            writeln!(out, "{name},{},{},{}", p.fpr, p.tpr, p.threshold).expect("write to string");
        }
    }
    out
}

/// Counts then row percentages, one block per matrix.
pub fn confusion_csv(report: &MetricReport) -> String {
    let mut out = format!("kind,true_class,{}\n", report.class_names.join(","));
    for (i, name) in report.class_names.iter().enumerate() {
        let counts: Vec<String> = report.confusion[i].iter().map(usize::to_string).collect();
        writeln!(out, "count,{name},{}", counts.join(",")).expect("write to string");
    }
    for (i, name) in report.class_names.iter().enumerate() {
        let pct: Vec<String> = report.confusion_pct[i].iter().map(|v| format!("{v:.2}")).collect();
        writeln!(out, "percent,{name},{}", pct.join(",")).expect("write to string");
    }
    out
}

/// Predictions from a model outside this crate, keyed by event id.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPredictions {
    pub event_ids: Vec<String>,
    pub predicted: Vec<usize>,
    pub scores: Option<Vec<Vec<f64>>>,
}

/// Parses `event_id,predicted_class,score_class_0,...`; score columns are optional.
pub fn parse_external_predictions(text: &str, n_classes: usize) -> Result<ExternalPredictions> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?
        .clone();
    if headers.get(0) != Some("event_id") || headers.get(1) != Some("predicted_class") {
        return Err(Error::SchemaMismatch("expected header event_id,predicted_class[,score_class_*]".into()));
    }
    let score_cols = headers.len() - 2;
    if score_cols != 0 && score_cols != n_classes {
        return Err(Error::SchemaMismatch(format!("{score_cols} score columns for {n_classes} classes")));
    }
    for (c, h) in headers.iter().skip(2).enumerate() {
        if h != format!("score_class_{c}") {
            return Err(Error::SchemaMismatch(format!("unexpected column '{h}'")));
        }
    }
    let mut out = ExternalPredictions {
        event_ids: Vec::new(),
        predicted: Vec::new(),
        scores: (score_cols > 0).then(Vec::new),
    };
    for record in reader.records() {
        let record = record.map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let row_no = out.event_ids.len() + 1;
        let bad = |what: &str| Error::SchemaMismatch(format!("row {row_no}: bad {what}"));
        out.event_ids.push(record[0].to_string());
        let class: usize = record[1].parse().map_err(|_| bad("predicted_class"))?;
        if class >= n_classes {
            return Err(bad("predicted_class"));
        }
        out.predicted.push(class);
        if let Some(scores) = &mut out.scores {
            let row = record
                .iter()
                .skip(2)
                .map(|v| v.parse::<f64>().map_err(|_| bad("score")))
                .collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
    }
    Ok(out)
}

/// Aligns external predictions with known truth by event id.
pub fn align_external(external: &ExternalPredictions, truth: &BTreeMap<String, usize>, class_names: &[String]) -> Result<PredictionSet> {
    let labels = external
        .event_ids
        .iter()
        .map(|id| {
            truth
                .get(id)
                .copied()
                .ok_or_else(|| Error::SchemaMismatch(format!("event '{id}' has no ground truth")))
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(
        class_names.to_vec(),
        external.event_ids.clone(),
        labels,
        external.predicted.clone(),
        external.scores.clone(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub target: String,
    pub classifier: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
    /// Values transcribed from elsewhere rather than computed here.
    #[serde(default)]
    pub transcribed: bool,
}

/// Parses `target,classifier,accuracy,weighted_f1[,transcribed]`.
pub fn parse_comparison_rows(text: &str) -> Result<Vec<ComparisonRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::SchemaMismatch(e.to_string())))
        .collect()
}

/// Plain-text table grouped by target; the target name appears on the first
/// row of its group and groups are separated by rules.
pub fn render_comparison_table(rows: &[ComparisonRow]) -> String {
    let mut targets: Vec<&str> = Vec::new();
    for r in rows {
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    let head = ["Target value", "Classifier", "Accuracy", "W-F1 score"];
    let mark = |r: &ComparisonRow| if r.transcribed { "*" } else { "" };
    let w0 = rows.iter().map(|r| r.target.len()).chain([head[0].len()]).max().unwrap_or(0);
    let w1 = rows
        .iter()
        .map(|r| r.classifier.len() + mark(r).len())
        .chain([head[1].len()])
        .max()
        .unwrap_or(0);
    let (w2, w3) = (head[2].len(), head[3].len());
    let rule = format!("{}\n", "-".repeat(w0 + w1 + w2 + w3 + 9));
    let mut out = String::from("Classification performance comparison\n");
    out.push_str(&rule.replace('-', "="));
    writeln!(out, "{:<w0$} | {:<w1$} | {:>w2$} | {:>w3$}", head[0], head[1], head[2], head[3]).expect("write to string");
    out.push_str(&rule.replace('-', "="));
    for (g, target) in targets.iter().enumerate() {
        if g > 0 {
            out.push_str(&rule);
        }
        for (i, r) in rows.iter().filter(|r| r.target == *target).enumerate() {
            let label = if i == 0 { *target } else { "" };
            writeln!(
                out,
                "{:<w0$} | {:<w1$} | {:>w2$.2} | {:>w3$.2}",
                label,
                format!("{}{}", r.classifier, mark(r)),
                r.accuracy,
                r.weighted_f1
            )
            .expect("write to string");
        }
    }
    out.push_str(&rule.replace('-', "="));
    if rows.iter().any(|r| r.transcribed) {
        out.push_str("* transcribed values, not computed by this tool\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|c| format!("c{c}")).collect()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    fn set(truth: Vec<usize>, predicted: Vec<usize>, k: usize) -> PredictionSet {
        PredictionSet::new(names(k), ids(truth.len()), truth, predicted, None).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&set(vec![0, 1, 2], vec![0, 1, 2], 3)).unwrap(), 1.0);
        assert_eq!(accuracy(&set(vec![0, 1, 0, 1], vec![0, 0, 1, 1], 2)).unwrap(), 0.5);
        assert!(matches!(accuracy(&set(vec![], vec![], 2)), Err(Error::EmptyPredictions)));
    }

    #[test]
    fn binary_accuracy_from_confusion_cells() {
        let p = set(vec![0, 0, 1, 1, 1, 0, 1], vec![0, 1, 1, 1, 0, 0, 1], 2);
        let m = confusion_matrix(&p).unwrap();
        let (tn, fp, fn_, tp) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let formula = (tp + tn) as f64 / (tp + tn + fp + fn_) as f64;
        assert!((accuracy(&p).unwrap() - formula).abs() < 1e-15);
    }

    #[test]
    fn weighted_f1_hand_case() {
        // Confusion [[2,1],[1,2]].
        let p = set(vec![0, 0, 0, 1, 1, 1], vec![0, 0, 1, 0, 1, 1], 2);
        assert_eq!(confusion_matrix(&p).unwrap(), vec![vec![2, 1], vec![1, 2]]);
        assert!((weighted_f1(&p).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_f1(&set(vec![0, 1, 2], vec![0, 1, 2], 3)).unwrap(), 1.0);
    }

    #[test]
    fn zero_denominators_are_zero() {
        let p = set(vec![0, 0, 1], vec![0, 0, 0], 3);
        let m = class_metrics(&p).unwrap();
        assert_eq!((m[1].precision, m[1].recall, m[1].f1), (0.0, 0.0, 0.0));
        assert_eq!(m[2].support, 0);
        assert!(weighted_f1(&p).unwrap().is_finite());
    }

    #[test]
    fn confusion_rows() {
        let p = set(vec![0, 1, 1, 2, 2, 2], vec![0, 1, 1, 2, 2, 2], 3);
        let m = confusion_matrix(&p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j] > 0, i == j);
            }
        }
        assert_eq!(m.iter().map(|r| r.iter().sum::<usize>()).collect::<Vec<_>>(), vec![1, 2, 3]);
        let pct = row_normalized(&[vec![9, 1], vec![0, 0]]);
        assert_eq!(pct, vec![vec![90.0, 10.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn auc_cases() {
        let pos = [false, false, true, true];
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &pos), Some(0.75));
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &pos), Some(1.0));
        assert_eq!(binary_auc(&[0.5; 4], &pos), Some(0.5));
        assert_eq!(binary_auc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn roc_polyline_matches_rank_auc() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9, 0.05];
        let pos = [false, false, true, true, true, false, true];
        let curve = roc_curve(&scores, &pos).unwrap();
        assert_eq!(curve.len(), 7);
        let last = curve.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!((trapezoid_area(&curve) - binary_auc(&scores, &pos).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_skipped_in_macro() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.3, 0.6, 0.1], vec![0.6, 0.3, 0.1]];
        let p = PredictionSet::from_scores(names(3), ids(3), vec![0, 1, 0], scores).unwrap();
        let auc = roc_auc(&p).unwrap();
        assert_eq!(auc.per_class[2], None);
        assert_eq!(auc.macro_auc, Some(1.0));
    }

    #[test]
    fn external_csv() {
        let text = "event_id,predicted_class,score_class_0,score_class_1\ne1,1,0.2,0.8\ne2,0,0.9,0.1\n";
        let ext = parse_external_predictions(text, 2).unwrap();
        assert_eq!(ext.predicted, vec![1, 0]);
        let truth: BTreeMap<String, usize> = [("e1".to_string(), 1), ("e2".to_string(), 1)].into();
        let p = align_external(&ext, &truth, &names(2)).unwrap();
        assert_eq!(accuracy(&p).unwrap(), 0.5);
        assert!(parse_external_predictions("id,class\n", 2).is_err());
        assert!(parse_external_predictions("event_id,predicted_class\ne1,7\n", 2).is_err());
        let missing: BTreeMap<String, usize> = BTreeMap::new();
        assert!(matches!(align_external(&ext, &missing, &names(2)), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn table_groups_rows_by_target() {
        let row = |t: &str, c: &str, a, f| ComparisonRow {
            target: t.into(),
            classifier: c.into(),
            accuracy: a,
            weighted_f1: f,
            transcribed: false,
        };
        let table = render_comparison_table(&[row("A", "x", 0.5, 0.25), row("A", "y", 1.0, 1.0), row("B", "x", 0.126, 0.0)]);
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines.iter().any(|l| l.starts_with("A ") && l.contains("| x ") && l.ends_with("0.25")));
        assert!(lines.iter().any(|l| l.trim_start().starts_with("|") && l.contains("| y ")));
        assert!(lines.iter().any(|l| l.starts_with("B ") && l.contains("0.13")));
        assert!(!table.contains('*'));
    }
}
