//! Evaluation report rendering: JSONL history, JSON report, CSV matrices
//! and curves, and a fixed-width text summary. All payloads are
//! deterministic functions of their inputs (no timestamps).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Report, RocCurve};
use crate::train::EpochRecord;

/// Per-class ROC result; `None` marks an undefined curve (the class had
/// no positives or no negatives in the evaluation split).
#[derive(Debug, Clone)]
pub struct ClassRoc {
    pub class: String,
    pub curve: Option<RocCurve>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    #[serde(flatten)]
    report: &'a Report,
    /// Per-class AUC; "undefined" when the ROC curve does not exist.
    auc: BTreeMap<&'a str, serde_json::Value>,
}

fn filename_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn summary_text(report: &Report, rocs: &[ClassRoc]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Accuracy {:.4}", report.accuracy);
    let _ = writeln!(s);
    let name_w = report
        .per_class
        .iter()
        .map(|c| c.name.len())
        .chain(["Class".len(), "Macro".len()])
        .max()
        .unwrap_or(5);
    let _ = writeln!(
        s,
        "{:<name_w$}  {:>9}  {:>9}  {:>9}  {:>7}",
        "Class", "Precision", "Recall", "F1", "Support"
    );
    for c in &report.per_class {
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            c.name, c.precision, c.recall, c.f1, c.support
        );
    }
    let _ = writeln!(
        s,
        "{:<name_w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
        "Macro", report.macro_precision, report.macro_recall, report.macro_f1, "-"
    );
    if !rocs.is_empty() {
        let _ = writeln!(s);
        for r in rocs {
            match &r.curve {
                Some(c) => {
                    let _ = writeln!(s, "AUC {:<name_w$}  {:.4}", r.class, c.auc);
                }
                None => {
                    let _ = writeln!(s, "AUC {:<name_w$}  undefined", r.class);
                }
            }
        }
    }
    if !report.zero_division_classes.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "Zero-division classes (ratios reported as 0): {}",
            report.zero_division_classes.join(", ")
        );
    }
    s
}

/// Writes `history.jsonl`, `report.json`, `confusion.csv`, one
/// `roc_<class>.csv` per entry in `rocs`, and `summary.txt` into `dir`.
/// Returns the created paths.
pub fn write_report(
    dir: &Path,
    history: &[EpochRecord],
    report: &Report,
    cm: &ConfusionMatrix,
    class_names: &[String],
    rocs: &[ClassRoc],
) -> Result<Vec<PathBuf>> {
    if class_names.len() != cm.k {
        return Err(Error::Config(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            cm.k
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let mut hist = String::new();
    for rec in history {
        hist.push_str(&serde_json::to_string(rec)?);
        hist.push('\n');
    }
    let path = dir.join("history.jsonl");
    std::fs::write(&path, hist)?;
    written.push(path);

    let auc: BTreeMap<&str, serde_json::Value> = rocs
        .iter()
        .map(|r| {
            let v = match &r.curve {
                Some(c) => serde_json::json!(c.auc),
                None => serde_json::json!("undefined"),
            };
            (r.class.as_str(), v)
        })
        .collect();
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&ReportJson { report, auc })?)?;
    written.push(path);

    let path = dir.join("confusion.csv");
    std::fs::write(&path, cm.to_csv(class_names))?;
    written.push(path);

    for r in rocs {
        let csv = match &r.curve {
            Some(c) => c.to_csv(),
            None => "threshold,fpr,tpr\n".to_string(),
        };
        let path = dir.join(format!("roc_{}.csv", filename_safe(&r.class)));
        std::fs::write(&path, csv)?;
        written.push(path);
    }

    let path = dir.join("summary.txt");
    std::fs::write(&path, summary_text(report, rocs))?;
    written.push(path);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{classification_report, roc_auc};

    fn names() -> Vec<String> {
        ["normal", "UC", "polyps", "esophagitis"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// 4-class capsule-endoscopy fixture: 225 per class, two polyps
    /// samples predicted as UC.
    fn fixture() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(
            4,
            vec![
                225, 0, 0, 0, //
                0, 225, 0, 0, //
                0, 2, 223, 0, //
                0, 0, 0, 225,
            ],
        )
        .unwrap()
    }

    #[test]
    fn summary_prints_accuracy_line_for_fixture() {
        let cm = fixture();
        let report = classification_report(&cm, &names()).unwrap();
        let text = summary_text(&report, &[]);
        assert!(text.starts_with("Accuracy 0.9978\n"), "got: {text}");
        assert!(text.contains("UC"));
        assert!(text.contains("0.9912"));
        assert!(text.contains("0.9911"));
    }

    #[test]
    fn writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let cm = fixture();
        let report = classification_report(&cm, &names()).unwrap();
        let curve = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        let rocs = vec![
            ClassRoc {
                class: "normal".into(),
                curve: Some(curve),
            },
            ClassRoc {
                class: "UC".into(),
                curve: None,
            },
        ];
        let history = vec![EpochRecord {
            epoch: 0,
            train_loss: 1.0,
            val_loss: 0.9,
            val_accuracy: 0.5,
            lr: 1e-4,
            grad_norm: 2.0,
            improved: true,
        }];
        let files = write_report(dir.path(), &history, &report, &cm, &names(), &rocs).unwrap();
        assert_eq!(files.len(), 6);
        for f in &files {
            assert!(f.exists(), "{f:?} missing");
        }
        let hist = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert_eq!(hist.lines().count(), 1);
        assert!(hist.contains("\"val_loss\":0.9"));
        let conf = std::fs::read_to_string(dir.path().join("confusion.csv")).unwrap();
        let (parsed, parsed_names) = ConfusionMatrix::from_csv(&conf).unwrap();
        assert_eq!(parsed.counts, cm.counts);
        assert_eq!(parsed_names, names());
    }

    #[test]
    fn undefined_roc_writes_header_only_and_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cm = fixture();
        let report = classification_report(&cm, &names()).unwrap();
        let rocs = vec![ClassRoc {
            class: "polyps".into(),
            curve: None,
        }];
        write_report(dir.path(), &[], &report, &cm, &names(), &rocs).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("roc_polyps.csv")).unwrap();
        assert_eq!(csv, "threshold,fpr,tpr\n");
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(json["auc"]["polyps"], "undefined");
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("undefined"));
    }

    #[test]
    fn output_bytes_are_deterministic() {
        let cm = fixture();
        let report = classification_report(&cm, &names()).unwrap();
        let rocs = vec![ClassRoc {
            class: "normal".into(),
            curve: Some(roc_auc(&[0.9, 0.2], &[true, false]).unwrap()),
        }];
        let read_all = |dir: &Path| -> Vec<(String, Vec<u8>)> {
            let mut entries: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            entries
                .into_iter()
                .map(|p| {
                    (
                        p.file_name().unwrap().to_string_lossy().into_owned(),
                        std::fs::read(&p).unwrap(),
                    )
                })
                .collect()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_report(d1.path(), &[], &report, &cm, &names(), &rocs).unwrap();
        write_report(d2.path(), &[], &report, &cm, &names(), &rocs).unwrap();
        assert_eq!(read_all(d1.path()), read_all(d2.path()));
    }

    #[test]
    fn class_names_become_safe_filenames() {
        assert_eq!(filename_safe("2_polyps/a b"), "2_polyps_a_b");
    }
}
