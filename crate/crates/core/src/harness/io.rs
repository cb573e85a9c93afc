use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::sweep::{row_values, SweepResult};
use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        path,
    )?)))
}

/// Serializes `rows` as CSV with headers taken from the field names.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid point and repeat.
pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = [
        "grid_index",
        "repeat",
        "seed",
        "requested_mu",
        "mu",
        "alpha",
        "target",
        "tau",
        "calibrated_incorrect_rate",
        "rho",
        "nu",
        "gamma",
        "final_task_loss",
        "final_gate_loss",
        "final_sparsity_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some(first) = result.rows.first() {
        header.extend(
            row_values(first, &result.regimes)
                .into_iter()
                .map(|(n, _)| n),
        );
    }
    header.push("error".into());
    w.write_record(&header)?;
    for r in &result.rows {
        let mut rec = vec![
            r.grid_index.to_string(),
            r.repeat.to_string(),
            r.seed.to_string(),
            r.requested_mu.to_string(),
            r.mu.to_string(),
            r.alpha.to_string(),
            r.target.to_string(),
            opt(r.tau),
            opt(r.calibrated_incorrect_rate),
            opt(r.power_params.map(|p| p.rho)),
            opt(r.power_params.map(|p| p.nu)),
            opt(r.power_params.map(|p| p.gamma)),
            opt(r.final_loss.map(|l| l.task)),
            opt(r.final_loss.map(|l| l.gate)),
            opt(r.final_loss.map(|l| l.sparsity)),
        ];
        rec.extend(
            row_values(r, &result.regimes)
                .into_iter()
                .map(|(_, v)| opt(v)),
        );
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid point with `<column>_mean` and `<column>_var` pairs.
pub fn write_aggregate_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = writer(path)?;
    let Some(first) = result.aggregates.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header: Vec<String> = ["grid_index", "mu", "alpha", "target", "runs", "failures"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (name, _) in &first.columns {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_var"));
    }
    w.write_record(&header)?;
    for a in &result.aggregates {
        let mut rec = vec![
            a.grid_index.to_string(),
            a.mu.to_string(),
            a.alpha.to_string(),
            a.target.to_string(),
            a.runs.to_string(),
            a.failures.to_string(),
        ];
        for (_, s) in &a.columns {
            rec.push(opt(s.mean));
            rec.push(opt(s.variance));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run manifest written next to the outputs of every command.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the normalized configuration.
    pub config_sha256: String,
    pub root_seed: u64,
    pub dataset_seed: u64,
    pub repeats: usize,
    pub outputs: Vec<String>,
    pub details: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        Manifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: config_hash(cfg),
            root_seed: cfg.seed,
            dataset_seed: cfg.dataset.seed,
            repeats: cfg.repeats,
            outputs: Vec::new(),
            details: BTreeMap::new(),
            config: cfg.clone(),
        }
    }

    pub fn detail(&mut self, key: &str, value: impl ToString) {
        self.details.insert(key.into(), value.to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
