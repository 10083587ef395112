//! Cross-run comparison: one column per training variant, one row per
//! (dataset, metric, dim).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{EvalReport, Metric};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::trainer::{block_medians, read_trace, TRACE_FILE};

pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const RUN_CONFIG_FILE: &str = "config.json";
/// Column order for the known variants; anything else follows alphabetically.
pub const COLUMN_ORDER: [&str; 4] = ["MIPIC", "w/o SIA", "w/o PIC", "MRL-only"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub label: String,
    pub seed: Option<u64>,
    /// Median total loss over the last 50 trace steps, when a trace exists.
    pub final_loss_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub metric: Metric,
    pub dim: usize,
    /// Aligned with `ComparisonTable::columns`; None where a variant lacks the row.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    /// Number of runs merged into each column (values are medians).
    pub runs_per_column: Vec<usize>,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunSummary>,
}

fn column_rank(label: &str) -> (usize, String) {
    let pos = COLUMN_ORDER.iter().position(|c| *c == label).unwrap_or(COLUMN_ORDER.len());
    (pos, label.to_string())
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Finds the eval report of a run directory: either directly inside it or
/// in an `eval/` subdirectory.
fn find_eval_report(dir: &Path) -> Option<PathBuf> {
    [dir.join(EVAL_REPORT_FILE), dir.join("eval").join(EVAL_REPORT_FILE)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Variant label from the training config beside the run (or one level up
/// for an evaluation subdirectory); the directory name otherwise.
fn run_label(dir: &Path) -> String {
    let candidates = [Some(dir.to_path_buf()), dir.parent().map(Path::to_path_buf)];
    for d in candidates.into_iter().flatten() {
        if let Ok(cfg) = RunConfig::load(&d.join(RUN_CONFIG_FILE)) {
            return cfg.train.ablation().label().to_string();
        }
    }
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn final_loss(dir: &Path) -> Option<f64> {
    let candidates = [Some(dir.to_path_buf()), dir.parent().map(Path::to_path_buf)];
    for d in candidates.into_iter().flatten() {
        let path = d.join(TRACE_FILE);
        if path.is_file() {
            let trace = read_trace(&path).ok()?;
            return block_medians(&trace, 50).last().copied();
        }
    }
    None
}

/// Builds the comparison over `dirs`. Directories without a manifest are
/// skipped with a warning; at least one usable run is required.
pub fn build_report(dirs: &[PathBuf]) -> Result<ComparisonTable> {
    let mut runs: Vec<(RunSummary, EvalReport)> = Vec::new();
    for dir in dirs {
        if !dir.join(MANIFEST_FILE).is_file() {
            log::warn!("skipping {}: no {MANIFEST_FILE}", dir.display());
            continue;
        }
        let manifest = RunManifest::read(dir)?;
        let Some(path) = find_eval_report(dir) else {
            log::warn!("skipping {}: no {EVAL_REPORT_FILE}", dir.display());
            continue;
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        runs.push((
            RunSummary {
                dir: dir.clone(),
                label: run_label(dir),
                seed: manifest.seed,
                final_loss_median: final_loss(dir),
            },
            report,
        ));
    }
    if runs.is_empty() {
        return Err(Error::Input("no run directory with a manifest and an eval report".into()));
    }

    let mut columns: Vec<String> = runs.iter().map(|(s, _)| s.label.clone()).collect();
    columns.sort_by_key(|l| column_rank(l));
    columns.dedup();
    let col_of: BTreeMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();

    let mut cells: BTreeMap<(String, Metric, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut runs_per_column = vec![0; columns.len()];
    for (summary, report) in &runs {
        let col = col_of[summary.label.as_str()];
        runs_per_column[col] += 1;
        for table in &report.tables {
            for row in &table.rows {
                let key = (table.dataset.clone(), table.metric, row.dim);
                let entry = cells.entry(key).or_insert_with(|| vec![Vec::new(); columns.len()]);
                entry[col].push(row.value);
            }
        }
    }
    let rows = cells
        .into_iter()
        .map(|((dataset, metric, dim), mut per_col)| ComparisonRow {
            dataset,
            metric,
            dim,
            values: per_col
                .iter_mut()
                .map(|v| if v.is_empty() { None } else { Some(median(v)) })
                .collect(),
        })
        .collect();
    Ok(ComparisonTable {
        columns,
        runs_per_column,
        rows,
        runs: runs.into_iter().map(|(s, _)| s).collect(),
    })
}

impl ComparisonTable {
    /// `dataset,metric,dim,<column>...`; missing cells are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,metric,dim");
        for c in &self.columns {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{},{}", r.dataset, r.metric.name(), r.dim);
            for v in &r.values {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Inverse of `to_csv` for the columns and rows.
    pub fn rows_from_csv(text: &str) -> Result<(Vec<String>, Vec<ComparisonRow>)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Input("empty report csv".into()))?;
        let columns: Vec<String> = header.split(',').skip(3).map(str::to_string).collect();
        let bad = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from("<csv>"),
            line,
            msg,
        };
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + columns.len() {
                return Err(bad(i + 2, format!("expected {} fields", 3 + columns.len())));
            }
            let metric = match f[1] {
                "spearman" => Metric::Spearman,
                "pair_accuracy" => Metric::PairAccuracy,
                "probe_f1" => Metric::ProbeF1,
                other => return Err(bad(i + 2, format!("unknown metric {other}"))),
            };
            let dim = f[2].parse().map_err(|_| bad(i + 2, format!("bad dim {}", f[2])))?;
            let values = f[3..]
                .iter()
                .map(|v| {
                    if v.is_empty() {
                        Ok(None)
                    } else {
                        v.parse().map(Some).map_err(|_| bad(i + 2, format!("bad value {v}")))
                    }
                })
                .collect::<Result<_>>()?;
            rows.push(ComparisonRow {
                dataset: f[0].to_string(),
                metric,
                dim,
                values,
            });
        }
        Ok((columns, rows))
    }

    /// Fixed-width text rendering for the terminal.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16} {:<14} {:>4}", "dataset", "metric", "dim");
        for c in &self.columns {
            let _ = write!(s, " {c:>10}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<16} {:<14} {:>4}", r.dataset, r.metric.name(), r.dim);
            for v in &r.values {
                match v {
                    Some(v) => {
                        let _ = write!(s, " {v:>10.4}");
                    }
                    None => {
                        let _ = write!(s, " {:>10}", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::evaluator::{DimValue, MetricTable};
    use std::time::Duration;

    fn fake_run(root: &Path, name: &str, cfg: Option<RunConfig>, values: &[f64]) -> PathBuf {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        if let Some(cfg) = cfg {
            std::fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_string(&cfg).unwrap()).unwrap();
        }
        let report = EvalReport {
            checkpoint: "c".into(),
            seed: 0,
            tables: vec![MetricTable {
                dataset: "sts".into(),
                metric: Metric::Spearman,
                rows: values
                    .iter()
                    .zip([4, 8])
                    .map(|(&value, dim)| DimValue { dim, value })
                    .collect(),
            }],
        };
        std::fs::write(dir.join(EVAL_REPORT_FILE), serde_json::to_string(&report).unwrap()).unwrap();
        RunManifest::new("evaluate", vec![], serde_json::Value::Null, Some(0))
            .write(&dir, Duration::ZERO)
            .unwrap();
        dir
    }

    fn variant(f: impl FnOnce(&mut RunConfig)) -> Option<RunConfig> {
        let mut c = RunConfig::desk();
        f(&mut c);
        Some(c)
    }

    #[test]
    fn single_run_gives_one_column() {
        let root = tempfile::tempdir().unwrap();
        let d = fake_run(root.path(), "a", None, &[0.5, 0.6]);
        let t = build_report(&[d]).unwrap();
        assert_eq!(t.columns, vec!["a".to_string()]);
        assert_eq!(t.rows.len(), 2);
    }

    #[test]
    fn ablation_grid_column_order_and_csv() {
        let root = tempfile::tempdir().unwrap();
        let dirs = vec![
            fake_run(root.path(), "m", variant(|c| c.train.mrl_only = true), &[0.1, 0.2]),
            fake_run(root.path(), "p", variant(|c| c.train.no_pic = true), &[0.3, 0.4]),
            fake_run(root.path(), "f", variant(|_| {}), &[0.5, 0.6]),
            fake_run(root.path(), "s", variant(|c| c.train.no_sia = true), &[0.7, 0.8]),
        ];
        let missing = root.path().join("nomanifest");
        std::fs::create_dir_all(&missing).unwrap();
        let mut all = dirs.clone();
        all.push(missing);
        let t = build_report(&all).unwrap();
        assert_eq!(t.columns, COLUMN_ORDER.map(String::from).to_vec());
        assert_eq!(t.rows[0].values, vec![Some(0.5), Some(0.7), Some(0.3), Some(0.1)]);
        let (cols, rows) = ComparisonTable::rows_from_csv(&t.to_csv()).unwrap();
        assert_eq!(cols, t.columns);
        assert_eq!(rows, t.rows);
    }

    #[test]
    fn repeated_variants_take_median() {
        let root = tempfile::tempdir().unwrap();
        let dirs: Vec<PathBuf> = [0.1, 0.9, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &v)| fake_run(root.path(), &format!("r{i}"), variant(|_| {}), &[v, 1.0 / 3.0]))
            .collect();
        let t = build_report(&dirs).unwrap();
        assert_eq!(t.runs_per_column, vec![3]);
        assert_eq!(t.rows[0].values, vec![Some(0.3)]);
        let (_, rows) = ComparisonTable::rows_from_csv(&t.to_csv()).unwrap();
        assert_eq!(rows[1].values[0], Some(1.0 / 3.0));
        assert!(build_report(&[root.path().join("none")]).is_err());
    }
}
