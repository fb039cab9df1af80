//! Consolidation of metrics logs into comparison tables.
//!
//! Logs are grouped by their echoed config (minus the `report` section).
//! Columns are labelled by the config keys whose values differ between
//! groups, so a sweep over one key yields one column per value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::commands::mean_std;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::fedengine::MetricsLog;

/// One config group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportColumn {
    pub label: String,
    /// Values of the differing keys, as JSON text.
    pub deltas: BTreeMap<String, String>,
    pub runs: usize,
    pub final_mean: f64,
    pub final_std: f64,
    /// Best metric reached by each checkpoint, `(tag, mean, std)`.
    pub checkpoints: Vec<(String, f64, f64)>,
}

impl ReportColumn {
    fn checkpoint_mean(&self, tag: &str) -> Option<f64> {
        self.checkpoints.iter().find(|(t, _, _)| t == tag).map(|(_, m, _)| *m)
    }
}

/// Directional check across columns that differ in one trend key.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub key: String,
    /// Other differing keys held fixed within this check.
    pub context: String,
    pub description: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub columns: Vec<ReportColumn>,
    pub varying_keys: Vec<String>,
    pub trends: Vec<TrendCheck>,
    /// Unreadable logs and why.
    pub problems: Vec<(PathBuf, String)>,
}

const CHECKPOINT_TAGS: [&str; 3] = ["50%", "80%", "100%"];
/// Allowed shortfall of a directional comparison, in metric units.
const TREND_SLACK: f64 = 0.01;
/// Allowed half16 vs full-precision gap.
const PRECISION_GAP: f64 = 0.10;

fn collect_logs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_logs(&path, found)?;
        } else if path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("metrics_") && n.ends_with(".jsonl"))
        {
            found.push(path);
        }
    }
    Ok(())
}

fn flatten(config: &serde_json::Value) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some(sections) = config.as_object() {
        for (section, body) in sections {
            if section == "report" {
                continue;
            }
            match body.as_object() {
                Some(keys) => {
                    for (k, v) in keys {
                        out.insert(format!("{section}.{k}"), v.to_string());
                    }
                }
                None => {
                    out.insert(section.clone(), body.to_string());
                }
            }
        }
    }
    out
}

fn numeric(v: &str) -> Option<f64> {
    v.parse().ok()
}

fn compare_values(a: &str, b: &str) -> std::cmp::Ordering {
    match (numeric(a), numeric(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

fn unquote(v: &str) -> &str {
    v.trim_matches('"')
}

/// Heterogeneity level of a column: alpha, or infinity for centralized.
fn effective_alpha(deltas: &BTreeMap<String, String>, base: &BTreeMap<String, String>) -> Option<f64> {
    let get = |k: &str| deltas.get(k).or_else(|| base.get(k)).map(String::as_str);
    match unquote(get("partition.scheme")?) {
        "centralized" => Some(f64::INFINITY),
        _ => numeric(get("partition.alpha")?),
    }
}

struct TrendSpec {
    key: &'static str,
    /// Keys consumed by this trend and excluded from the context.
    members: &'static [&'static str],
}

const TRENDS: [TrendSpec; 4] = [
    TrendSpec {
        key: "noise.ratio",
        members: &["noise.ratio"],
    },
    TrendSpec {
        key: "partition.alpha",
        members: &["partition.alpha", "partition.scheme"],
    },
    TrendSpec {
        key: "fed.sample_ratio",
        members: &["fed.sample_ratio"],
    },
    TrendSpec {
        key: "quant.precision",
        members: &["quant.precision"],
    },
];

fn fmt_value(x: f64) -> String {
    if x.is_infinite() {
        "centralized".into()
    } else {
        format!("{x}")
    }
}

fn trend_checks(columns: &[ReportColumn], varying: &[String], base: &BTreeMap<String, String>) -> Vec<TrendCheck> {
    let mut checks = Vec::new();
    for spec in &TRENDS {
        if !spec.members.iter().any(|m| varying.iter().any(|v| v == m)) {
            continue;
        }
        if spec.key == "partition.alpha" {
            let schemes: Vec<String> = columns
                .iter()
                .filter_map(|c| c.deltas.get("partition.scheme").or_else(|| base.get("partition.scheme")))
                .map(|s| unquote(s).to_string())
                .filter(|s| s != "centralized")
                .collect();
            if schemes.windows(2).any(|w| w[0] != w[1]) {
                continue;
            }
        }
        let mut contexts: BTreeMap<String, Vec<&ReportColumn>> = BTreeMap::new();
        for col in columns {
            let context: Vec<String> = col
                .deltas
                .iter()
                .filter(|(k, _)| !spec.members.contains(&k.as_str()))
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            contexts.entry(context.join(" ")).or_default().push(col);
        }
        for (context, cols) in contexts {
            if cols.len() < 2 {
                continue;
            }
            if let Some(check) = evaluate_trend(spec.key, &context, &cols, base) {
                checks.push(check);
            }
        }
    }
    checks
}

fn evaluate_trend(key: &str, context: &str, cols: &[&ReportColumn], base: &BTreeMap<String, String>) -> Option<TrendCheck> {
    let value_of = |c: &ReportColumn| -> Option<f64> {
        match key {
            "partition.alpha" => effective_alpha(&c.deltas, base),
            _ => numeric(c.deltas.get(key)?),
        }
    };
    let check = |description: String, passed: bool| TrendCheck {
        key: key.to_string(),
        context: context.to_string(),
        description,
        passed,
    };
    if key == "quant.precision" {
        let find = |p: &str| cols.iter().find(|c| c.deltas.get(key).is_some_and(|v| unquote(v) == p));
        let half = find("half16")?;
        let full = find("full32").or_else(|| find("full64"))?;
        let gap = full.final_mean - half.final_mean;
        return Some(check(
            format!(
                "half16 {:.4} vs {} {:.4}: gap {:.4} (limit {PRECISION_GAP})",
                half.final_mean,
                unquote(&full.deltas[key]),
                full.final_mean,
                gap
            ),
            gap.abs() <= PRECISION_GAP,
        ));
    }
    let mut points: Vec<(f64, f64)> = cols
        .iter()
        .map(|c| {
            let metric = match key {
                "fed.sample_ratio" => c.checkpoint_mean("50%"),
                _ => Some(c.final_mean),
            }?;
            Some((value_of(c)?, metric))
        })
        .collect::<Option<_>>()?;
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    // noise hurts as it grows; alpha and participation help as they grow
    let increasing = key != "noise.ratio";
    let passed = points.windows(2).all(|w| {
        let (lo, hi) = (w[0].1, w[1].1);
        if w[0].0 == w[1].0 {
            true
        } else if increasing {
            hi >= lo - TREND_SLACK
        } else {
            hi <= lo + TREND_SLACK
        }
    });
    let metric_name = if key == "fed.sample_ratio" { "best@50%" } else { "final" };
    let chain: Vec<String> = points.iter().map(|(v, m)| format!("{}:{m:.4}", fmt_value(*v))).collect();
    Some(check(
        format!(
            "{metric_name} {} expected {} within {TREND_SLACK}",
            chain.join(" -> "),
            if increasing { "non-decreasing" } else { "non-increasing" }
        ),
        passed,
    ))
}

fn build_table(logs: &[(PathBuf, MetricsLog)], problems: Vec<(PathBuf, String)>) -> ReportTable {
    let mut groups: BTreeMap<String, Vec<&MetricsLog>> = BTreeMap::new();
    for (_, log) in logs {
        let mut key = log.header.config.clone();
        if let Some(obj) = key.as_object_mut() {
            obj.remove("report");
        }
        groups.entry(key.to_string()).or_default().push(log);
    }
    let flats: Vec<BTreeMap<String, String>> = groups
        .values()
        .map(|g| flatten(&g[0].header.config))
        .collect();
    let all_keys: std::collections::BTreeSet<&String> = flats.iter().flat_map(|f| f.keys()).collect();
    let varying: Vec<String> = all_keys
        .into_iter()
        .filter(|k| flats.windows(2).any(|w| w[0].get(*k) != w[1].get(*k)))
        .cloned()
        .collect();
    let base = flats.first().cloned().unwrap_or_default();

    let mut columns: Vec<ReportColumn> = groups
        .values()
        .zip(&flats)
        .map(|(runs, flat)| {
            let deltas: BTreeMap<String, String> = varying
                .iter()
                .map(|k| (k.clone(), flat.get(k).cloned().unwrap_or_else(|| "-".into())))
                .collect();
            let label = if deltas.is_empty() {
                "all".to_string()
            } else {
                deltas
                    .iter()
                    .map(|(k, v)| format!("{k}={}", unquote(v)))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let finals: Vec<f64> = runs.iter().filter_map(|l| l.final_metric()).collect();
            let (final_mean, final_std) = mean_std(&finals);
            let checkpoints = CHECKPOINT_TAGS
                .iter()
                .map(|&tag| {
                    let bests: Vec<f64> = runs
                        .iter()
                        .filter_map(|l| l.checkpoints().into_iter().find(|c| c.tag == tag).map(|c| c.best))
                        .collect();
                    let (m, s) = mean_std(&bests);
                    (tag.to_string(), m, s)
                })
                .collect();
            ReportColumn {
                label,
                deltas,
                runs: runs.len(),
                final_mean,
                final_std,
                checkpoints,
            }
        })
        .collect();
    columns.sort_by(|a, b| {
        a.deltas
            .values()
            .zip(b.deltas.values())
            .map(|(x, y)| compare_values(x, y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let trends = trend_checks(&columns, &varying, &base);
    ReportTable {
        columns,
        varying_keys: varying,
        trends,
        problems,
    }
}

fn pm(mean: f64, std: f64) -> String {
    if mean.is_nan() {
        "n/a".into()
    } else {
        format!("{mean:.4} ± {std:.4}")
    }
}

impl ReportTable {
    /// Transposed text table: one column per config group.
    pub fn render_text(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![std::iter::once("config".to_string())
            .chain(self.columns.iter().map(|c| c.label.clone()))
            .collect()];
        rows.push(
            std::iter::once("runs".to_string())
                .chain(self.columns.iter().map(|c| c.runs.to_string()))
                .collect(),
        );
        rows.push(
            std::iter::once("final".to_string())
                .chain(self.columns.iter().map(|c| pm(c.final_mean, c.final_std)))
                .collect(),
        );
        for (k, tag) in CHECKPOINT_TAGS.iter().enumerate() {
            rows.push(
                std::iter::once(format!("best@{tag}"))
                    .chain(self.columns.iter().map(|c| pm(c.checkpoints[k].1, c.checkpoints[k].2)))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
        }
        if !self.trends.is_empty() {
            let _ = writeln!(out);
            for t in &self.trends {
                let ctx = if t.context.is_empty() { String::new() } else { format!(" [{}]", t.context) };
                let _ = writeln!(
                    out,
                    "trend {}{ctx}: {} {}",
                    t.key,
                    t.description,
                    if t.passed { "PASS" } else { "FAIL" }
                );
            }
        }
        if !self.problems.is_empty() {
            let _ = writeln!(out);
            for (path, why) in &self.problems {
                let _ = writeln!(out, "unreadable {}: {why}", path.display());
            }
        }
        out
    }

    /// One CSV row per config group.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("config,runs,final_mean,final_std");
        for tag in CHECKPOINT_TAGS {
            let _ = write!(out, ",best{0}_mean,best{0}_std", tag.trim_end_matches('%'));
        }
        out.push('\n');
        for c in &self.columns {
            let _ = write!(out, "\"{}\",{},{:.6},{:.6}", c.label.replace('"', "\"\""), c.runs, c.final_mean, c.final_std);
            for (_, m, s) in &c.checkpoints {
                let _ = write!(out, ",{m:.6},{s:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Reads every `metrics_*.jsonl` under `run_dir` (recursively) and writes
/// `report.txt` and `report.csv` into `out`. Unreadable logs are listed in
/// the report instead of aborting it.
pub fn cli_report(run_dir: &Path, out: &Path) -> Result<ReportTable> {
    let mut paths = Vec::new();
    collect_logs(run_dir, &mut paths)?;
    let mut logs = Vec::new();
    let mut problems = Vec::new();
    for path in paths {
        let parsed = fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|text| MetricsLog::from_jsonl(&text).map_err(|e| e.to_string()));
        match parsed {
            Ok(log) => logs.push((path, log)),
            Err(why) => problems.push((path, why)),
        }
    }
    let table = build_table(&logs, problems);
    write_atomic(&out.join("report.txt"), table.render_text().as_bytes())?;
    write_atomic(&out.join("report.csv"), table.render_csv().as_bytes())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedengine::{LogHeader, RoundRecord};

    fn log(config: serde_json::Value, finals: &[f64]) -> MetricsLog {
        let records = finals
            .iter()
            .enumerate()
            .map(|(i, &m)| RoundRecord {
                round: i + 1,
                clients: vec![0],
                train_loss: 1.0,
                metric: Some(m),
                checkpoint_tag: None,
                dropped: vec![],
                wall_time_ms: 0.0,
            })
            .collect();
        MetricsLog {
            header: LogHeader {
                version: "t".into(),
                config,
                seed: 0,
                param_count: 1,
                memory: "param_bytes=8".into(),
                note: None,
            },
            records,
        }
    }

    fn noise_cfg(ratio: f64) -> serde_json::Value {
        serde_json::json!({"noise": {"ratio": ratio, "mode": "matrix"}, "report": {"seeds": [1]}})
    }

    #[test]
    fn empty_table_still_has_header() {
        let t = build_table(&[], vec![]);
        assert!(t.columns.is_empty());
        assert!(t.render_csv().starts_with("config,runs,final_mean"));
        assert_eq!(t.render_csv().lines().count(), 1);
        assert!(t.render_text().starts_with("config"));
    }

    #[test]
    fn groups_by_config_and_ignores_report_section() {
        let mut a = noise_cfg(0.1);
        a["report"]["seeds"] = serde_json::json!([2]);
        let logs = vec![
            (PathBuf::from("a"), log(noise_cfg(0.1), &[0.5])),
            (PathBuf::from("b"), log(a, &[0.7])),
        ];
        let t = build_table(&logs, vec![]);
        assert_eq!(t.columns.len(), 1);
        assert_eq!(t.columns[0].runs, 2);
        assert!((t.columns[0].final_mean - 0.6).abs() < 1e-12);
        assert_eq!(t.columns[0].label, "all");
    }

    #[test]
    fn noise_trend_annotation() {
        let logs = vec![
            (PathBuf::from("a"), log(noise_cfg(0.0), &[0.90])),
            (PathBuf::from("b"), log(noise_cfg(0.3), &[0.80])),
            (PathBuf::from("c"), log(noise_cfg(0.1), &[0.85])),
        ];
        let t = build_table(&logs, vec![]);
        assert_eq!(t.varying_keys, vec!["noise.ratio".to_string()]);
        assert_eq!(t.columns.iter().map(|c| c.label.as_str()).collect::<Vec<_>>(), [
            "noise.ratio=0.0",
            "noise.ratio=0.1",
            "noise.ratio=0.3"
        ]);
        assert_eq!(t.trends.len(), 1);
        assert!(t.trends[0].passed);

        let logs = vec![
            (PathBuf::from("a"), log(noise_cfg(0.0), &[0.80])),
            (PathBuf::from("b"), log(noise_cfg(0.3), &[0.90])),
        ];
        assert!(!build_table(&logs, vec![]).trends[0].passed);
    }

    #[test]
    fn centralized_counts_as_infinite_alpha() {
        let cfg = |scheme: &str, alpha: f64| {
            serde_json::json!({"partition": {"scheme": scheme, "alpha": alpha}, "report": {"seeds": [1]}})
        };
        let logs = vec![
            (PathBuf::from("a"), log(cfg("centralized", 0.5), &[0.95])),
            (PathBuf::from("b"), log(cfg("labels", 0.5), &[0.90])),
            (PathBuf::from("c"), log(cfg("labels", 0.1), &[0.85])),
        ];
        let t = build_table(&logs, vec![]);
        assert_eq!(t.trends.len(), 1);
        assert!(t.trends[0].passed, "{:?}", t.trends);
        assert!(t.trends[0].description.contains("centralized:0.9500"));
    }

    #[test]
    fn precision_pair_is_a_two_column_comparison() {
        let cfg = |p: &str| serde_json::json!({"quant": {"precision": p}, "report": {"seeds": [1]}});
        let logs = vec![
            (PathBuf::from("a"), log(cfg("full32"), &[0.9])),
            (PathBuf::from("b"), log(cfg("half16"), &[0.88])),
        ];
        let t = build_table(&logs, vec![]);
        assert_eq!(t.columns.len(), 2);
        assert_eq!(t.trends.len(), 1);
        assert!(t.trends[0].passed);
        assert_eq!(t.render_csv().lines().count(), 3);
    }
}
