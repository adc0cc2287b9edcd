use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use super::{atomic_write, certify_system, make_dataset, run_training, CliError, RunConfig, EXIT_CONFIG};
use crate::dynamics::fmt17;

/// One summary line per grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub run: usize,
    pub config_hash: String,
    pub overrides: String,
    pub status: String,
    pub train_loss: f64,
    pub test_loss: f64,
    pub r_ex: f64,
    pub rho_ex: f64,
}

/// Cartesian product of `{"dotted.key": [values...]}`; keys in sorted order,
/// the last key varying fastest. An empty object or an empty value list
/// yields no combinations.
pub fn expand_grid(spec: &str) -> Result<Vec<Vec<(String, Value)>>, CliError> {
    let grid: BTreeMap<String, Vec<Value>> = serde_json::from_str(spec)
        .map_err(|e| CliError::config(format!("grid spec line {} column {}: {e}", e.line(), e.column())))?;
    if grid.is_empty() || grid.values().any(Vec::is_empty) {
        return Ok(vec![]);
    }
    let mut combos: Vec<Vec<(String, Value)>> = vec![vec![]];
    for (k, vals) in &grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                vals.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("`{key}` does not name an object path"))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn one_run(base: &RunConfig, run: usize, over: &[(String, Value)]) -> Result<SweepRow, (String, String)> {
    let mut doc = serde_json::to_value(base).expect("config serializes");
    for (k, v) in over {
        set_path(&mut doc, k, v.clone()).map_err(|e| (String::new(), e))?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| (String::new(), format!("config: {e}")))?;
    cfg.output_dir = base.output_dir.join(format!("run{run:03}"));
    let hash = cfg.hash();
    let fail = |e: CliError| (hash.clone(), e.message);
    let ds = make_dataset(&cfg).map_err(fail)?;
    let out = run_training(&cfg, &ds, None, 0, true).map_err(fail)?;
    let last = out.final_losses();
    let cert = certify_system(&cfg, &out.system, &cfg.mesh).map_err(fail)?;
    Ok(SweepRow {
        run,
        config_hash: hash.clone(),
        overrides: String::new(),
        status: "ok".into(),
        train_loss: last.map_or(f64::NAN, |r| r.train_loss),
        test_loss: last.map_or(f64::NAN, |r| r.test_loss),
        r_ex: cert.r_ex,
        rho_ex: cert.rho_ex,
    })
}

/// Runs every combination in order; failures are recorded and the sweep
/// continues. Writes `sweep_summary.csv` under the output directory.
pub fn run_sweep(base: &RunConfig, spec: &str) -> Result<Vec<SweepRow>, CliError> {
    let combos = expand_grid(spec)?;
    let mut rows = Vec::with_capacity(combos.len());
    for (i, over) in combos.iter().enumerate() {
        let desc = over.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
        let row = match one_run(base, i, over) {
            Ok(r) => SweepRow { overrides: desc, ..r },
            Err((hash, msg)) => SweepRow {
                run: i,
                config_hash: hash,
                overrides: desc,
                status: format!("failed: {msg}"),
                train_loss: f64::NAN,
                test_loss: f64::NAN,
                r_ex: f64::NAN,
                rho_ex: f64::NAN,
            },
        };
        rows.push(row);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError { code: EXIT_CONFIG, message: e.to_string() };
    w.write_record(["run", "config_hash", "overrides", "status", "train_loss", "test_loss", "r_ex", "rho_ex"])
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.run.to_string(),
            r.config_hash.clone(),
            r.overrides.clone(),
            r.status.clone(),
            fmt17(r.train_loss),
            fmt17(r.test_loss),
            fmt17(r.r_ex),
            fmt17(r.rho_ex),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
    atomic_write(&base.output_dir.join("sweep_summary.csv"), &bytes)?;
    Ok(rows)
}
