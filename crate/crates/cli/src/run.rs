//! Sweep execution and output files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use aqm_core::analysis::write_csv;

use crate::experiments::Row;
use crate::scenario::Scenario;

#[derive(Clone, Debug, Serialize)]
pub struct RowFailure {
    pub row: usize,
    pub error: String,
}

#[derive(Debug)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub failures: Vec<RowFailure>,
}

/// Runs every sweep point on `workers` threads. Rows come back in grid
/// order; a failed point keeps its axis values and NaN elsewhere.
pub fn execute(scenario: &Scenario, workers: usize) -> Result<Table, String> {
    let exp = scenario.experiment;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
    let results: Vec<(Vec<f64>, Result<Vec<f64>, String>)> = pool.install(|| {
        (0..scenario.len())
            .into_par_iter()
            .map(|k| {
                let cfg = scenario.config_at(k);
                let row = Row { index: k, seed: scenario.seed };
                let out = (exp.row)(&cfg, &row).and_then(|v| {
                    if v.len() == exp.columns.len() {
                        Ok(v)
                    } else {
                        Err(format!("produced {} values for {} columns", v.len(), exp.columns.len()))
                    }
                });
                (scenario.coordinates(k), out)
            })
            .collect()
    });

    let mut columns: Vec<String> = scenario.axes.iter().map(|a| a.column.clone()).collect();
    columns.extend(exp.columns.iter().map(|c| c.to_string()));
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (k, (mut coords, out)) in results.into_iter().enumerate() {
        match out {
            Ok(v) => coords.extend(v),
            Err(error) => {
                coords.extend(std::iter::repeat_n(f64::NAN, exp.columns.len()));
                failures.push(RowFailure { row: k, error });
            }
        }
        rows.push(coords);
    }
    Ok(Table { columns, rows, failures })
}

/// SHA-256 of the canonical scenario JSON (object keys sorted).
pub fn config_hash(scenario: &Scenario) -> String {
    let text = serde_json::to_string(&scenario.canonical()).expect("scenario serializes");
    let digest = Sha256::digest(text.as_bytes());
    format!("sha256:{}", digest.iter().map(|b| format!("{b:02x}")).collect::<String>())
}

pub fn metadata(scenario: &Scenario, table: &Table) -> Value {
    json!({
        "experiment": scenario.experiment.name,
        "description": scenario.experiment.description,
        "seed": scenario.seed,
        "config_hash": config_hash(scenario),
        "versions": {
            "aqm-cli": env!("CARGO_PKG_VERSION"),
            "aqm-core": aqm_core::VERSION,
        },
        "columns": table.columns,
        "rows": table.rows.len(),
        "failed_rows": table.failures,
        "scenario": scenario.canonical(),
    })
}

/// Writes `<dir>/<experiment>.csv` and `<dir>/<experiment>.json`.
pub fn write_outputs(dir: &Path, scenario: &Scenario, table: &Table) -> Result<(PathBuf, PathBuf), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let name = scenario.experiment.name;
    let csv_path = dir.join(format!("{name}.csv"));
    let meta_path = dir.join(format!("{name}.json"));
    let headers: Vec<&str> = table.columns.iter().map(String::as_str).collect();
    let mut buf = Vec::new();
    write_csv(&mut buf, &headers, &table.rows).map_err(|e| e.to_string())?;
    fs::write(&csv_path, buf).map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;
    let meta = serde_json::to_string_pretty(&metadata(scenario, table)).expect("metadata serializes");
    fs::write(&meta_path, meta + "\n").map_err(|e| format!("cannot write {}: {e}", meta_path.display()))?;
    Ok((csv_path, meta_path))
}
