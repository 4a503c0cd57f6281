//! Classification metrics: confusion matrix, per-class precision/recall/F1
//! with macro averages, and one-vs-rest ROC curves with trapezoidal AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major confusion counts: `counts[true_class * k + predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Config(format!(
                "confusion matrix for {k} classes needs {} counts, got {}",
                k * k,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) -> Result<()> {
        if true_class >= self.k || predicted >= self.k {
            return Err(Error::IndexOutOfRange {
                index: true_class.max(predicted),
                limit: self.k,
            });
        }
        self.counts[true_class * self.k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    /// Samples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    /// Samples predicted as `c`.
    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum()
    }

    /// CSV with a header row of predicted-class labels and one row per
    /// true class.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for t in 0..self.k {
            out.push_str(&class_names[t]);
            for p in 0..self.k {
                out.push_str(&format!(",{}", self.get(t, p)));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the `to_csv` format (or the same matrix without a header).
    pub fn from_csv(text: &str) -> Result<(Self, Vec<String>)> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::Config("empty confusion matrix".into()));
        }
        let has_header = lines[0]
            .split(',')
            .skip(1)
            .any(|f| f.trim().parse::<u64>().is_err());
        let (names, rows): (Vec<String>, &[&str]) = if has_header {
            (
                lines[0].split(',').skip(1).map(|s| s.trim().to_string()).collect(),
                &lines[1..],
            )
        } else {
            (
                (0..lines.len()).map(|i| format!("class_{i}")).collect(),
                &lines[..],
            )
        };
        let k = names.len();
        if rows.len() != k {
            return Err(Error::Config(format!(
                "confusion matrix has {k} columns but {} rows",
                rows.len()
            )));
        }
        let mut counts = Vec::with_capacity(k * k);
        for row in rows {
            let fields: Vec<&str> = row.split(',').collect();
            // A labeled row carries one extra leading field.
            let values = if fields.len() == k + 1 { &fields[1..] } else { &fields[..] };
            if values.len() != k {
                return Err(Error::Config(format!(
                    "confusion row '{row}' does not have {k} entries"
                )));
            }
            for v in values {
                counts.push(v.trim().parse::<u64>().map_err(|_| {
                    Error::Config(format!("bad confusion count '{v}'"))
                })?);
            }
        }
        Ok((ConfusionMatrix { k, counts }, names))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub accuracy: f64,
    pub per_class: Vec<ClassReport>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes where an undefined ratio (0/0) was reported as 0.
    pub zero_division_classes: Vec<String>,
}

/// Per-class precision/recall/F1 and unweighted macro averages. Undefined
/// ratios (no predictions or no support) score 0 and are flagged.
pub fn classification_report(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Report> {
    if class_names.len() != cm.k {
        return Err(Error::Config(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            cm.k
        )));
    }
    let mut per_class = Vec::with_capacity(cm.k);
    let mut flagged = Vec::new();
    for c in 0..cm.k {
        let tp = cm.get(c, c) as f64;
        let predicted = cm.predicted(c) as f64;
        let support = cm.support(c);
        let mut undefined = false;
        let precision = if predicted > 0.0 {
            tp / predicted
        } else {
            undefined = true;
            0.0
        };
        let recall = if support > 0 {
            tp / support as f64
        } else {
            undefined = true;
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined = true;
            0.0
        };
        if undefined {
            flagged.push(class_names[c].clone());
        }
        per_class.push(ClassReport {
            name: class_names[c].clone(),
            precision,
            recall,
            f1,
            support,
        });
    }
    let kf = cm.k as f64;
    Ok(Report {
        accuracy: cm.accuracy(),
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / kf,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / kf,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / kf,
        per_class,
        zero_division_classes: flagged,
    })
}

/// One ROC operating point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve and trapezoidal AUC for binary scores. Tied scores collapse
/// into a single operating point, which makes the trapezoid rule agree
/// with the Mann-Whitney statistic under ties.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<RocCurve> {
    if scores.len() != positives.len() {
        return Err(Error::Config(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config(
            "ROC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("non-finite score in ROC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point.
        let threshold = scores[order[i]];
        let (mut dtp, mut dfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        let prev = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        tp += dtp;
        fp += dfp;
        let cur = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (cur.0 - prev.0) * (cur.1 + prev.1) / 2.0;
        points.push(RocPoint {
            threshold,
            fpr: cur.0,
            tpr: cur.1,
        });
    }
    Ok(RocCurve { points, auc })
}

/// One-vs-rest ROC per class from per-sample probability vectors
/// (`probs[i]` has one score per class; `labels[i]` is the true class).
pub fn one_vs_rest_roc(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<Vec<RocCurve>> {
    if probs.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    (0..k)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positives: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            roc_auc(&scores, &positives)
        })
        .collect()
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        out
    }
}
