use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";

/// One evaluated victim, one line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub label: String,
    /// Crafting objective id, or `clean`.
    pub attack: String,
    pub arch: String,
    pub epsilon: f64,
    pub defense: String,
    pub seed: u64,
    pub val_acc: f64,
    #[serde(default)]
    pub per_class_acc: Vec<f64>,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
///
/// The error is absent for a single value.
pub fn mean_se(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, None));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, Some((var / n).sqrt())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub attack: String,
    pub epsilon: f64,
    pub arch: String,
    pub defense: String,
    pub seeds: usize,
    pub mean: f64,
    pub se: Option<f64>,
}

/// Group by (attack, epsilon, architecture, defense), in that order.
pub fn aggregate(records: &[MetricRecord]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, u64, String, String), (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.attack.clone(), r.epsilon.to_bits(), r.arch.clone(), r.defense.clone()))
            .or_insert_with(|| (r.epsilon, Vec::new()))
            .1
            .push(r.val_acc);
    }
    groups
        .into_iter()
        .map(|((attack, _, arch, defense), (epsilon, accs))| {
            let (mean, se) = mean_se(&accs).expect("groups are non-empty");
            ReportRow {
                attack,
                epsilon,
                arch,
                defense,
                seeds: accs.len(),
                mean,
                se,
            }
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                record: i,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn epsilon_label(eps: f64) -> String {
    let k = eps * 255.0;
    if (k - k.round()).abs() < 1e-6 {
        format!("{}/255", k.round() as i64)
    } else {
        format!("{eps:.4}")
    }
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from("| attack | epsilon | arch | defense | seeds | val acc (%) |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let acc = match r.se {
            Some(se) => format!("{:.2} ± {:.2}", r.mean, se),
            None => format!("{:.2}", r.mean),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.attack,
            epsilon_label(r.epsilon),
            r.arch,
            r.defense,
            r.seeds,
            acc
        );
    }
    out
}

pub fn render_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["attack", "epsilon", "arch", "defense", "seeds", "mean", "se"])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for r in rows {
        w.write_record([
            r.attack.clone(),
            format!("{}", r.epsilon),
            r.arch.clone(),
            r.defense.clone(),
            r.seeds.to_string(),
            format!("{:.4}", r.mean),
            r.se.map(|s| format!("{s:.4}")).unwrap_or_default(),
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aggregate `metrics.jsonl` in `run_dir` into `report.md` and `report.csv`.
pub fn emit_report(run_dir: &Path) -> Result<(Vec<ReportRow>, Vec<PathBuf>)> {
    let metrics = run_dir.join(METRICS_FILE);
    if !metrics.is_file() {
        return Err(Error::MissingArtifact {
            artifact: "evaluation".into(),
            stage: "evaluate".into(),
        });
    }
    let records = read_metrics(&metrics)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("no evaluation records in {}", metrics.display())));
    }
    let rows = aggregate(&records);
    let md = run_dir.join("report.md");
    let csv = run_dir.join("report.csv");
    let title = format!("# Run `{}`\n\nValidation accuracy, mean ± standard error over seeds.\n\n", records[0].run_id);
    fs::write(&md, title + &render_markdown(&rows)).at(&md)?;
    fs::write(&csv, render_csv(&rows)?).at(&csv)?;
    Ok((rows, vec![md, csv]))
}
