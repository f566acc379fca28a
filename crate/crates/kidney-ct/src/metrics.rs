//! Evaluation metrics: confusion matrix, per-class precision/recall/F1,
//! one-vs-rest ROC and PR curves with trapezoidal AUC, and macro/weighted
//! averages. Everything is computed in f64; reports carry full precision
//! and the rendered CSV rounds half-up to 2 decimals.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::augment::BatchStream;
use crate::error::{Error, Result};
use crate::manifest::LabelCodec;
use crate::train::argmax;

/// K x K count matrix; rows are true classes, columns predictions,
/// class order given by the label codec.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::LengthMismatch {
                left: y_true.len(),
                right: y_pred.len(),
            });
        }
        let mut counts = vec![vec![0u64; k]; k];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= k {
                return Err(Error::IndexOutOfRange {
                    index: t,
                    num_classes: k,
                });
            }
            if p >= k {
                return Err(Error::IndexOutOfRange {
                    index: p,
                    num_classes: k,
                });
            }
            counts[t][p] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Row sums: the per-class supports.
    pub fn supports(&self) -> Vec<u64> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn predicted_counts(&self) -> Vec<u64> {
        let k = self.num_classes();
        (0..k).map(|c| self.counts.iter().map(|row| row[c]).sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        self.counts.iter().enumerate().map(|(i, row)| row[i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.trace() as f64 / total as f64
    }
}

/// Precision/recall/F1 for one class; `degenerate` flags a zero
/// denominator that was reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub degenerate: bool,
}

/// Harmonic mean of precision and recall; 0 when both vanish.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Per-class precision, recall and F1 from a confusion matrix.
/// Zero-denominator cases yield 0 and set the degenerate flag (also
/// logged), never NaN.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<ClassPrf> {
    let k = cm.num_classes();
    let supports = cm.supports();
    let predicted = cm.predicted_counts();
    (0..k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let mut degenerate = false;
            let precision = if predicted[c] == 0 {
                log::warn!("class {c}: no predicted positives; precision reported as 0");
                degenerate = true;
                0.0
            } else {
                tp / predicted[c] as f64
            };
            let recall = if supports[c] == 0 {
                log::warn!("class {c}: no true positives in the data; recall reported as 0");
                degenerate = true;
                0.0
            } else {
                tp / supports[c] as f64
            };
            ClassPrf {
                precision,
                recall,
                f1: f1_score(precision, recall),
                support: supports[c],
                degenerate,
            }
        })
        .collect()
}

/// Unweighted arithmetic mean — the paper-style "average score".
pub fn macro_average(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "macro average over an empty list");
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// `None` marks the (0, 0) anchor above every score.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

fn check_binary_inputs(y_true: &[bool], scores: &[f64]) -> Result<(u64, u64)> {
    if y_true.len() != scores.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("scores must be finite".into()));
    }
    let pos = y_true.iter().filter(|&&t| t).count() as u64;
    let neg = y_true.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices ordered by descending score, grouped so equal scores form one
/// threshold step.
fn descending_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(group) if scores[group[0]] == scores[i] => group.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// One-vs-rest ROC curve and trapezoidal AUC. Tied scores collapse into
/// a single threshold step, which gives ties exactly half credit.
pub fn roc_auc(y_true: &[bool], scores: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    let (pos, neg) = check_binary_inputs(y_true, scores)?;
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    for group in descending_groups(scores) {
        let threshold = scores[group[0]];
        for i in group {
            if y_true[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: Some(threshold),
        });
    }
    debug_assert_eq!(points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[0].tpr + pair[1].tpr) / 2.0;
    }
    Ok((points, auc))
}

/// Precision-recall points over descending unique-score thresholds.
pub fn pr_curve(y_true: &[bool], scores: &[f64]) -> Result<Vec<PrPoint>> {
    let (pos, _neg) = check_binary_inputs(y_true, scores)?;
    let mut points = Vec::new();
    let mut tp = 0u64;
    let mut fp = 0u64;
    for group in descending_groups(scores) {
        let threshold = scores[group[0]];
        for i in group {
            if y_true[i] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push(PrPoint {
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
            threshold,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub support: u64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

/// Everything the evaluation produces, in codec class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub classes: Vec<String>,
    pub num_samples: u64,
    pub accuracy: f64,
    pub per_class: BTreeMap<String, PerClassReport>,
    /// Unweighted means — the headline "average" numbers.
    pub macro_avg: AverageReport,
    /// Support-weighted means, reported alongside for completeness.
    pub weighted_avg: AverageReport,
    pub confusion: ConfusionMatrix,
    pub roc_points: BTreeMap<String, Vec<RocPoint>>,
    pub pr_points: BTreeMap<String, Vec<PrPoint>>,
}

/// Round half-up to `digits` decimals (for non-negative metric values).
pub fn round_half_up(value: f64, digits: u32) -> f64 {
    let scale = 10f64.powi(digits as i32);
    (value * scale + 0.5).floor() / scale
}

impl EvaluationReport {
    /// Build a report from per-sample truths, argmax predictions, and the
    /// class-probability matrix (columns in codec order).
    pub fn from_scores(
        y_true: &[usize],
        probs: &Array2<f32>,
        codec: &LabelCodec,
    ) -> Result<EvaluationReport> {
        let k = codec.num_classes();
        if probs.nrows() != y_true.len() {
            return Err(Error::LengthMismatch {
                left: y_true.len(),
                right: probs.nrows(),
            });
        }
        if probs.ncols() != k {
            return Err(Error::ShapeMismatch {
                expected: format!("probability matrix with {k} columns"),
                actual: format!("{} columns", probs.ncols()),
            });
        }
        let y_pred: Vec<usize> = probs
            .rows()
            .into_iter()
            .map(|row| argmax(row.iter().copied()))
            .collect();
        let confusion = ConfusionMatrix::from_predictions(y_true, &y_pred, k)?;
        let prf = per_class_metrics(&confusion);

        let mut per_class = BTreeMap::new();
        let mut roc_points = BTreeMap::new();
        let mut pr_points = BTreeMap::new();
        for c in 0..k {
            let name = codec.decode(c)?.to_string();
            let binary: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
            let scores: Vec<f64> = probs.column(c).iter().map(|&v| f64::from(v)).collect();
            let auc = match roc_auc(&binary, &scores) {
                Ok((points, auc)) => {
                    roc_points.insert(name.clone(), points);
                    Some(auc)
                }
                Err(Error::SingleClass) => {
                    log::warn!("class {name}: single-label data, AUC absent");
                    None
                }
                Err(e) => return Err(e),
            };
            if let Ok(points) = pr_curve(&binary, &scores) {
                pr_points.insert(name.clone(), points);
            }
            per_class.insert(
                name,
                PerClassReport {
                    precision: prf[c].precision,
                    recall: prf[c].recall,
                    f1: prf[c].f1,
                    auc,
                    support: prf[c].support,
                    degenerate: prf[c].degenerate,
                },
            );
        }

        let classes: Vec<String> = codec.classes().to_vec();
        let collect = |f: &dyn Fn(&PerClassReport) -> f64| -> Vec<f64> {
            classes.iter().map(|c| f(&per_class[c])).collect()
        };
        let aucs: Vec<f64> = classes
            .iter()
            .filter_map(|c| per_class[c].auc)
            .collect();
        let macro_avg = AverageReport {
            precision: macro_average(&collect(&|r| r.precision)),
            recall: macro_average(&collect(&|r| r.recall)),
            f1: macro_average(&collect(&|r| r.f1)),
            auc: if aucs.len() == k {
                Some(macro_average(&aucs))
            } else {
                None
            },
        };

        let supports: Vec<f64> = classes.iter().map(|c| per_class[c].support as f64).collect();
        let total: f64 = supports.iter().sum();
        let weighted = |f: &dyn Fn(&PerClassReport) -> f64| -> f64 {
            classes
                .iter()
                .zip(&supports)
                .map(|(c, s)| f(&per_class[c]) * s)
                .sum::<f64>()
                / total
        };
        let weighted_avg = AverageReport {
            precision: weighted(&|r| r.precision),
            recall: weighted(&|r| r.recall),
            f1: weighted(&|r| r.f1),
            auc: if aucs.len() == k {
                Some(weighted(&|r| r.auc.unwrap()))
            } else {
                None
            },
        };

        Ok(EvaluationReport {
            classes,
            num_samples: y_true.len() as u64,
            accuracy: confusion.accuracy(),
            per_class,
            macro_avg,
            weighted_avg,
            confusion,
            roc_points,
            pr_points,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Json {
            path: "<inline report>".into(),
            source: e,
        })
    }

    /// Table-shaped per-class rows, rendered at 2 decimals (half-up) the
    /// way the headline tables present them.
    pub fn to_table_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,auc,support\n");
        let fmt = |v: f64| format!("{:.2}", round_half_up(v, 2));
        for class in &self.classes {
            let r = &self.per_class[class];
            out.push_str(&format!(
                "{class},{},{},{},{},{}\n",
                fmt(r.precision),
                fmt(r.recall),
                fmt(r.f1),
                r.auc.map(fmt).unwrap_or_else(|| "".into()),
                r.support
            ));
        }
        out.push_str(&format!(
            "macro,{},{},{},{},{}\n",
            fmt(self.macro_avg.precision),
            fmt(self.macro_avg.recall),
            fmt(self.macro_avg.f1),
            self.macro_avg.auc.map(fmt).unwrap_or_else(|| "".into()),
            self.num_samples
        ));
        out
    }

    pub fn roc_csv(&self, class: &str) -> Option<String> {
        self.roc_points.get(class).map(|points| {
            let mut out = String::from("fpr,tpr,threshold\n");
            for p in points {
                let threshold = p.threshold.map(|t| t.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{threshold}\n", p.fpr, p.tpr));
            }
            out
        })
    }

    pub fn pr_csv(&self, class: &str) -> Option<String> {
        self.pr_points.get(class).map(|points| {
            let mut out = String::from("recall,precision,threshold\n");
            for p in points {
                out.push_str(&format!("{},{},{}\n", p.recall, p.precision, p.threshold));
            }
            out
        })
    }
}

/// Run a model over an (unaugmented) stream and produce the full report.
/// `predict` maps an image batch to class probabilities.
pub fn evaluate<F>(predict: F, stream: &BatchStream, codec: &LabelCodec) -> Result<EvaluationReport>
where
    F: Fn(&Array4<f32>) -> Result<Array2<f32>>,
{
    let mut y_true: Vec<usize> = Vec::new();
    let mut prob_rows: Vec<Array2<f32>> = Vec::new();
    for batch in stream.epoch(0) {
        let batch = batch?;
        let probs = predict(&batch.images)?;
        if probs.nrows() != batch.images.shape()[0] || probs.ncols() != codec.num_classes() {
            return Err(Error::ShapeMismatch {
                expected: format!("({}, {})", batch.images.shape()[0], codec.num_classes()),
                actual: format!("{:?}", probs.dim()),
            });
        }
        for label_row in batch.labels.rows() {
            y_true.push(argmax(label_row.iter().copied()));
        }
        prob_rows.push(probs);
    }
    let views: Vec<_> = prob_rows.iter().map(|p| p.view()).collect();
    let probs = ndarray::concatenate(ndarray::Axis(0), &views)
        .expect("batches share the class dimension");
    EvaluationReport::from_scores(&y_true, &probs, codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // ------------------------------------------------------------------
    // independent oracles

    fn confusion_oracle(y_true: &[usize], y_pred: &[usize], k: usize) -> Vec<Vec<u64>> {
        let mut counts = vec![vec![0u64; k]; k];
        for t in 0..k {
            for p in 0..k {
                counts[t][p] = y_true
                    .iter()
                    .zip(y_pred)
                    .filter(|(&yt, &yp)| yt == t && yp == p)
                    .count() as u64;
            }
        }
        counts
    }

    /// O(n^2) pairwise AUC: P(score_pos > score_neg) + 0.5 P(tie).
    fn pairwise_auc_oracle(y_true: &[bool], scores: &[f64]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &yi) in y_true.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in y_true.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Re-count precision/recall at each unique threshold with plain loops.
    fn pr_oracle(y_true: &[bool], scores: &[f64]) -> Vec<(f64, f64)> {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = y_true.iter().filter(|&&t| t).count() as f64;
        thresholds
            .iter()
            .map(|&th| {
                let mut tp = 0.0;
                let mut fp = 0.0;
                for (i, &t) in y_true.iter().enumerate() {
                    if scores[i] >= th {
                        if t {
                            tp += 1.0;
                        } else {
                            fp += 1.0;
                        }
                    }
                }
                (tp / pos, tp / (tp + fp))
            })
            .collect()
    }

    // ------------------------------------------------------------------

    #[test]
    fn confusion_perfect_classifier_is_diagonal() {
        let y: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let cm = ConfusionMatrix::from_predictions(&y, &y, 4).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.counts()[t][p], if t == p { 3 } else { 0 });
            }
        }
        assert_eq!(cm.accuracy(), 1.0);
    }

    #[test]
    fn confusion_hand_count() {
        let cm = ConfusionMatrix::from_predictions(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.counts(), &[vec![1, 1], vec![0, 1]]);
    }

    #[test]
    fn confusion_matches_nested_loop_oracle() {
        let mut rng = crate::seeding::rng_for(1, "cm_oracle", &[]);
        let k = 4;
        let y_true: Vec<usize> = (0..200).map(|_| rng.gen_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..200).map(|_| rng.gen_range(0..k)).collect();
        let cm = ConfusionMatrix::from_predictions(&y_true, &y_pred, k).unwrap();
        assert_eq!(cm.counts(), confusion_oracle(&y_true, &y_pred, k).as_slice());
    }

    #[test]
    fn confusion_errors() {
        assert!(matches!(
            ConfusionMatrix::from_predictions(&[0, 1], &[0], 2),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            ConfusionMatrix::from_predictions(&[0, 5], &[0, 1], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn f1_from_paper_rows() {
        // Tumor row of the strongest mobile model: P 0.87, R 0.98
        assert_eq!(round_half_up(f1_score(0.87, 0.98), 2), 0.92);
        // the weakest Normal row: P 0.77, R 0.54
        assert_eq!(round_half_up(f1_score(0.77, 0.54), 2), 0.63);
    }

    #[test]
    fn zero_predicted_positives_reports_zero_with_flag() {
        // class 1 never predicted
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 1], &[0, 0, 0], 2).unwrap();
        let prf = per_class_metrics(&cm);
        assert_eq!(prf[1].precision, 0.0);
        assert_eq!(prf[1].recall, 0.0);
        assert_eq!(prf[1].f1, 0.0);
        assert!(prf[1].degenerate);
        assert!(!prf[0].degenerate);
    }

    #[test]
    fn macro_average_examples() {
        let avg = macro_average(&[0.87, 0.96, 0.79, 0.87]);
        assert!((avg - 0.8725).abs() < 1e-12);
        let avg = macro_average(&[0.98, 1.0, 0.92, 0.94]);
        assert!((avg - 0.96).abs() < 1e-12);
        assert_eq!(macro_average(&[0.42]), 0.42);
    }

    #[test]
    fn roc_perfect_separation_has_auc_one() {
        let y = [true, true, false, false];
        let s = [0.9, 0.8, 0.2, 0.1];
        let (points, auc) = roc_auc(&y, &s).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(points.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(points.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn roc_constant_scores_give_half() {
        let y = [true, false, true, false, false];
        let s = [0.5; 5];
        let (points, auc) = roc_auc(&y, &s).unwrap();
        assert_eq!(auc, 0.5);
        assert_eq!(points.len(), 2); // (0,0) and the single tie step to (1,1)
    }

    #[test]
    fn roc_single_class_is_an_error() {
        assert!(matches!(
            roc_auc(&[true, true], &[0.1, 0.9]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn roc_matches_pairwise_oracle_with_ties() {
        let mut rng = crate::seeding::rng_for(2, "auc_oracle", &[]);
        for trial in 0..200 {
            let n = 5 + (trial % 46);
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
                continue;
            }
            // quantized scores force plenty of ties
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8)) / 8.0).collect();
            let (_, auc) = roc_auc(&y, &s).unwrap();
            let oracle = pairwise_auc_oracle(&y, &s);
            assert!((auc - oracle).abs() < 1e-9, "trial {trial}: {auc} vs {oracle}");
        }
    }

    #[test]
    fn auc_antisymmetry() {
        let mut rng = crate::seeding::rng_for(3, "auc_antisym", &[]);
        for _ in 0..100 {
            let n = 30;
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
                continue;
            }
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..10)) / 10.0).collect();
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let (_, auc_pos) = roc_auc(&y, &s).unwrap();
            let (_, auc_neg) = roc_auc(&y, &neg).unwrap();
            assert!((auc_pos + auc_neg - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pr_perfect_separation_keeps_precision_one() {
        let y = [true, true, false, false];
        let s = [0.9, 0.8, 0.2, 0.1];
        let points = pr_curve(&y, &s).unwrap();
        for p in points.iter().take(2) {
            assert_eq!(p.precision, 1.0);
        }
    }

    #[test]
    fn pr_one_positive_ranked_last() {
        let mut y = vec![false; 10];
        y[9] = true;
        let s: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
        let points = pr_curve(&y, &s).unwrap();
        let last = points.last().unwrap();
        assert_eq!(last.recall, 1.0);
        assert!((last.precision - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pr_matches_threshold_loop_oracle() {
        let mut rng = crate::seeding::rng_for(4, "pr_oracle", &[]);
        for _ in 0..100 {
            let n = 40;
            let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
                continue;
            }
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..12)) / 12.0).collect();
            let points = pr_curve(&y, &s).unwrap();
            let oracle = pr_oracle(&y, &s);
            assert_eq!(points.len(), oracle.len());
            for (p, (r_o, p_o)) in points.iter().zip(oracle) {
                assert!((p.recall - r_o).abs() < 1e-12);
                assert!((p.precision - p_o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confusion_marginals_and_accuracy_identity() {
        let mut rng = crate::seeding::rng_for(5, "marginals", &[]);
        for _ in 0..50 {
            let k = 2 + rng.gen_range(0..4);
            let n = 50 + rng.gen_range(0..100);
            let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let cm = ConfusionMatrix::from_predictions(&y_true, &y_pred, k).unwrap();
            assert_eq!(cm.total(), n as u64);
            for c in 0..k {
                let support = y_true.iter().filter(|&&t| t == c).count() as u64;
                assert_eq!(cm.supports()[c], support);
            }
            let correct = y_true.iter().zip(&y_pred).filter(|(t, p)| t == p).count();
            assert!((cm.accuracy() - correct as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn label_permutation_equivariance() {
        let mut rng = crate::seeding::rng_for(6, "perm_equiv", &[]);
        let k = 4;
        let n = 120;
        let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let perm = [2usize, 3, 1, 0];

        let base = per_class_metrics(&ConfusionMatrix::from_predictions(&y_true, &y_pred, k).unwrap());
        let yt_p: Vec<usize> = y_true.iter().map(|&t| perm[t]).collect();
        let yp_p: Vec<usize> = y_pred.iter().map(|&p| perm[p]).collect();
        let permuted =
            per_class_metrics(&ConfusionMatrix::from_predictions(&yt_p, &yp_p, k).unwrap());

        for c in 0..k {
            assert!((base[c].precision - permuted[perm[c]].precision).abs() < 1e-12);
            assert!((base[c].recall - permuted[perm[c]].recall).abs() < 1e-12);
        }
        let macro_base = macro_average(&base.iter().map(|m| m.f1).collect::<Vec<_>>());
        let macro_perm = macro_average(&permuted.iter().map(|m| m.f1).collect::<Vec<_>>());
        assert!((macro_base - macro_perm).abs() < 1e-12);
    }

    #[test]
    fn report_from_oracle_model_is_all_ones() {
        let codec = LabelCodec::from_class_names(["a", "b", "c"]);
        let y_true = vec![0usize, 1, 2, 0, 1, 2];
        let mut probs = Array2::<f32>::zeros((6, 3));
        for (i, &t) in y_true.iter().enumerate() {
            probs[[i, t]] = 1.0;
        }
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        assert_eq!(report.accuracy, 1.0);
        for class in &report.classes {
            let r = &report.per_class[class];
            assert_eq!(r.precision, 1.0);
            assert_eq!(r.recall, 1.0);
            assert_eq!(r.f1, 1.0);
            assert_eq!(r.auc, Some(1.0));
        }
        assert_eq!(report.macro_avg.auc, Some(1.0));
    }

    #[test]
    fn report_from_uniform_model_matches_prevalence() {
        let codec = LabelCodec::from_class_names(["a", "b", "c", "d"]);
        // balanced data, uniform output: argmax lands on class 0
        let y_true: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let probs = Array2::<f32>::from_elem((40, 4), 0.25);
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        let first = &report.per_class[&report.classes[0]];
        assert!((first.precision - 0.25).abs() < 1e-12);
        for class in &report.classes {
            assert_eq!(report.per_class[class].auc, Some(0.5));
        }
        // unpredicted classes carry the degenerate flag
        assert!(report.per_class[&report.classes[1]].degenerate);
    }

    #[test]
    fn f1_harmonic_identity_holds_in_reports() {
        let mut rng = crate::seeding::rng_for(7, "f1_identity", &[]);
        let codec = LabelCodec::from_class_names(["x", "y", "z"]);
        let n = 90;
        let y_true: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let mut probs = Array2::<f32>::zeros((n, 3));
        for mut row in probs.rows_mut() {
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen::<f32>() + 0.05;
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        for class in &report.classes {
            let r = &report.per_class[class];
            assert!((r.f1 - f1_score(r.precision, r.recall)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_rendering_rounds_half_up() {
        assert_eq!(round_half_up(0.8725, 2), 0.87);
        // 0.875 is exact in binary, a true half case
        assert_eq!(round_half_up(0.875, 2), 0.88);
        assert_eq!(round_half_up(0.994999, 2), 0.99);
    }

    #[test]
    fn report_json_round_trip() {
        let codec = LabelCodec::from_class_names(["a", "b"]);
        let y_true = vec![0usize, 0, 1, 1];
        let probs = ndarray::array![[0.9f32, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]];
        let report = EvaluationReport::from_scores(&y_true, &probs, &codec).unwrap();
        let json = report.to_json();
        let loaded = EvaluationReport::from_json(&json).unwrap();
        assert_eq!(loaded, report);
        assert!(report.to_table_csv().contains("macro,"));
        assert!(report.roc_csv("a").unwrap().starts_with("fpr,tpr,threshold"));
    }
}
