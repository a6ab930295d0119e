//! One-parameter sweeps. Grid points run in parallel, each into its own
//! subdirectory, and a failing point is recorded without stopping the rest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::run::{exit_code_for, run_experiment, EXIT_PASS};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub dir: PathBuf,
    pub exit_code: i32,
    pub passed: bool,
    pub eta: Option<f64>,
    pub metrics: std::collections::BTreeMap<String, f64>,
    pub error: Option<String>,
}

/// Subdirectory name for one grid point, e.g. `n_cs=16`.
pub fn point_dir_name(param: &str, value: f64) -> String {
    format!("{param}={value}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn aggregate_csv(param: &str, rows: &[SweepRow]) -> String {
    let keys: BTreeSet<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut out = String::new();
    write!(out, "{},exit_code,passed,eta", csv_field(param)).unwrap();
    for k in &keys {
        write!(out, ",{}", csv_field(k)).unwrap();
    }
    out.push_str(",error\n");
    for r in rows {
        write!(out, "{},{},{},", r.value, r.exit_code, r.passed).unwrap();
        if let Some(e) = r.eta {
            write!(out, "{e}").unwrap();
        }
        for k in &keys {
            out.push(',');
            if let Some(v) = r.metrics.get(*k) {
                write!(out, "{v}").unwrap();
            }
        }
        writeln!(out, ",{}", csv_field(r.error.as_deref().unwrap_or(""))).unwrap();
    }
    out
}

/// Runs `cfg` once per value of `cfg.sweep_param` and writes `aggregate.csv`.
pub fn sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let Some(param) = cfg.sweep_param.as_deref() else {
        return Err(Error::Config("sweep needs sweep_param".into()));
    };
    if cfg.sweep_values.is_empty() {
        return Err(Error::Config("sweep_values is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<SweepRow> = cfg
        .sweep_values
        .par_iter()
        .map(|&value| {
            let dir = out_dir.join(point_dir_name(param, value));
            let outcome = cfg.with_param(param, value).and_then(|point| run_experiment(&point, &dir));
            match outcome {
                Ok(o) => SweepRow {
                    value,
                    dir,
                    exit_code: o.exit_code,
                    passed: o.exit_code == EXIT_PASS,
                    eta: o.result.eta,
                    metrics: o.result.metrics,
                    error: None,
                },
                Err(e) => SweepRow {
                    value,
                    dir,
                    exit_code: exit_code_for(&e),
                    passed: false,
                    eta: None,
                    metrics: Default::default(),
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let path = out_dir.join("aggregate.csv");
    std::fs::write(&path, aggregate_csv(param, &rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
