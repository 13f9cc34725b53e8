//! Classification metrics and evaluation reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `counts[t][p]` for true class `t` and predicted class `p`.
pub fn confusion_matrix(
    y_true: &[usize],
    y_pred: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    check_pair(y_true, y_pred)?;
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(invalid!(
                "label {} out of range for {n_classes} classes",
                t.max(p)
            ));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn check_pair(y_true: &[usize], y_pred: &[usize]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(invalid!(
            "label arrays differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        ));
    }
    if y_true.is_empty() {
        return Err(invalid!("empty label arrays"));
    }
    Ok(())
}

fn class_count(y_true: &[usize], y_pred: &[usize]) -> usize {
    y_true.iter().chain(y_pred).max().map_or(0, |m| m + 1)
}

/// Cohen's kappa. Returns 0 when chance agreement is 1 (a single class on
/// both sides), where the statistic is undefined.
pub fn cohen_kappa(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let n_classes = class_count(y_true, y_pred);
    let m = confusion_matrix(y_true, y_pred, n_classes)?;
    let n = y_true.len() as f64;
    let observed = (0..n_classes).map(|k| m[k][k]).sum::<u64>() as f64 / n;
    let expected: f64 = (0..n_classes)
        .map(|k| {
            let row: u64 = m[k].iter().sum();
            let col: u64 = m.iter().map(|r| r[k]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n);
    if (1.0 - expected).abs() < 1e-15 {
        log::warn!("kappa undefined for single-class agreement; reporting 0");
        return Ok(0.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred)?;
    Ok(y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count() as f64 / y_true.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Support-weighted precision, recall and F-score. Classes with a zero
/// denominator contribute 0.
pub fn weighted_prf(y_true: &[usize], y_pred: &[usize]) -> Result<Prf> {
    let n_classes = class_count(y_true, y_pred);
    let m = confusion_matrix(y_true, y_pred, n_classes)?;
    let n = y_true.len() as f64;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut out = Prf {
        precision: 0.0,
        recall: 0.0,
        fscore: 0.0,
    };
    for k in 0..n_classes {
        let tp = m[k][k];
        let support: u64 = m[k].iter().sum();
        let predicted: u64 = m.iter().map(|r| r[k]).sum();
        let p = ratio(tp, predicted);
        let r = ratio(tp, support);
        let f = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        let w = support as f64 / n;
        out.precision += w * p;
        out.recall += w * r;
        out.fscore += w * f;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub kappa: f64,
}

impl Metrics {
    pub fn compute(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        let prf = weighted_prf(y_true, y_pred)?;
        Ok(Self {
            precision: prf.precision,
            recall: prf.recall,
            fscore: prf.fscore,
            kappa: cohen_kappa(y_true, y_pred)?,
        })
    }

    pub const NAMES: [&'static str; 4] = ["precision", "recall", "fscore", "kappa"];

    pub fn values(&self) -> [f64; 4] {
        [self.precision, self.recall, self.fscore, self.kappa]
    }
}

/// One evaluated run together with the protocol coordinates that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Training mode, e.g. `frozen` or `supervised_scratch`.
    pub mode: String,
    /// Extra grouping key such as a probed layer or a pretext task; empty if unused.
    pub variant: String,
    pub labels_per_class: Option<usize>,
    pub fold: Option<usize>,
    pub run: usize,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean,
            std,
            values: values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub mode: String,
    pub variant: String,
    pub labels_per_class: Option<usize>,
    pub n_runs: usize,
    pub precision: Summary,
    pub recall: Summary,
    pub fscore: Summary,
    pub kappa: Summary,
}

/// Per-run results of one protocol invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub records: Vec<RunRecord>,
}

pub const REPORT_CSV_HEADER: [&str; 11] = [
    "protocol",
    "mode",
    "variant",
    "labels_per_class",
    "fold",
    "run",
    "seed",
    "precision",
    "recall",
    "fscore",
    "kappa",
];

impl EvalReport {
    pub fn new(protocol: impl Into<String>) -> Self {
        Self {
            protocol: protocol.into(),
            records: Vec::new(),
        }
    }

    /// Groups runs by (mode, variant, labels_per_class), folds pooled, in
    /// first-seen order.
    pub fn summarize(&self) -> Vec<GroupSummary> {
        let mut order: Vec<(String, String, Option<usize>)> = Vec::new();
        let mut groups: BTreeMap<(String, String, Option<usize>), Vec<Metrics>> = BTreeMap::new();
        for r in &self.records {
            let key = (r.mode.clone(), r.variant.clone(), r.labels_per_class);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r.metrics);
        }
        order
            .into_iter()
            .map(|key| {
                let ms = &groups[&key];
                let col =
                    |f: fn(&Metrics) -> f64| Summary::of(&ms.iter().map(f).collect::<Vec<_>>());
                GroupSummary {
                    n_runs: ms.len(),
                    precision: col(|m| m.precision),
                    recall: col(|m| m.recall),
                    fscore: col(|m| m.fscore),
                    kappa: col(|m| m.kappa),
                    mode: key.0,
                    variant: key.1,
                    labels_per_class: key.2,
                }
            })
            .collect()
    }

    /// Summary for one group, if present.
    pub fn group(
        &self,
        mode: &str,
        variant: &str,
        labels_per_class: Option<usize>,
    ) -> Option<GroupSummary> {
        self.summarize().into_iter().find(|g| {
            g.mode == mode && g.variant == variant && g.labels_per_class == labels_per_class
        })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(REPORT_CSV_HEADER)?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let m = r.metrics;
            out.write_record([
                self.protocol.clone(),
                r.mode.clone(),
                r.variant.clone(),
                opt(r.labels_per_class),
                opt(r.fold),
                r.run.to_string(),
                r.seed.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.fscore.to_string(),
                m.kappa.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut report = EvalReport::default();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let parse_err = |what: &str| crate::Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                message: format!("bad {what}"),
            };
            let opt = |s: &str, what: &str| -> Result<Option<usize>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| parse_err(what))
                }
            };
            let num = |j: usize| -> Result<f64> {
                row[j].parse().map_err(|_| parse_err(REPORT_CSV_HEADER[j]))
            };
            if row.len() != REPORT_CSV_HEADER.len() {
                return Err(parse_err("column count"));
            }
            report.protocol = row[0].to_string();
            report.records.push(RunRecord {
                mode: row[1].to_string(),
                variant: row[2].to_string(),
                labels_per_class: opt(&row[3], "labels_per_class")?,
                fold: opt(&row[4], "fold")?,
                run: row[5].parse().map_err(|_| parse_err("run"))?,
                seed: row[6].parse().map_err(|_| parse_err("seed"))?,
                metrics: Metrics {
                    precision: num(7)?,
                    recall: num(8)?,
                    fscore: num(9)?,
                    kappa: num(10)?,
                },
            });
        }
        Ok(report)
    }

    /// Machine-readable summary: `{"protocol", "n_records", "groups": [...]}`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol,
            "n_records": self.records.len(),
            "groups": self.summarize(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>_summary.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        let json = serde_json::to_string_pretty(&self.summary_json())?;
        std::fs::write(dir.join(format!("{stem}_summary.json")), json + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_reference_cases() {
        assert_eq!(cohen_kappa(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[0, 1, 0, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&[2, 2, 2], &[2, 2, 2]).unwrap(), 0.0);
        // p_o = 0.5, p_e = 0.5 for a complete disagreement on a balanced pair
        let k = cohen_kappa(&[0, 1], &[1, 0]).unwrap();
        assert!((k + 1.0).abs() < 1e-12);
        assert!(cohen_kappa(&[0, 1], &[0]).is_err());
        assert!(cohen_kappa(&[], &[]).is_err());
    }

    #[test]
    fn prf_zero_division() {
        let prf = weighted_prf(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
        assert!((prf.precision - 0.25).abs() < 1e-12);
        assert!((prf.recall - 0.5).abs() < 1e-12);
        assert!((prf.fscore - 0.5 * (2.0 * 0.5 / 1.5)).abs() < 1e-12);
        let perfect = weighted_prf(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(
            perfect,
            Prf {
                precision: 1.0,
                recall: 1.0,
                fscore: 1.0
            }
        );
    }

    #[test]
    fn report_round_trip_and_summary() {
        let mut r = EvalReport::new("semi");
        for run in 0..3 {
            r.records.push(RunRecord {
                mode: "frozen".into(),
                variant: String::new(),
                labels_per_class: Some(10),
                fold: None,
                run,
                seed: run as u64,
                metrics: Metrics {
                    precision: 0.5,
                    recall: 0.5,
                    fscore: 0.5,
                    kappa: run as f64 * 0.1,
                },
            });
        }
        let g = r.group("frozen", "", Some(10)).unwrap();
        assert_eq!(g.n_runs, 3);
        assert!((g.kappa.mean - 0.1).abs() < 1e-12);
        assert!((g.kappa.std - 0.1).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        r.save(dir.path(), "report").unwrap();
        let back = EvalReport::read_csv(&dir.path().join("report.csv")).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back.records[2].metrics.kappa, 0.2);
        let json: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("report_summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(json["groups"][0]["n_runs"], 3);
    }
}
