//! Grid sweeps: the cartesian product of config values, times seeds, run in parallel.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{error, info};
use rayon::prelude::*;
use serde::Deserialize;
use steallab::metrics::{emit_report, summarize, MetricRow, ReportFormat};
use steallab::seed::fnv1a;

use crate::config::{config_error, resolve, Overrides, RunConfig};
use crate::run::{attack, train_victim};

pub const COMBINED: &str = "combined.csv";
pub const SUMMARY: &str = "summary.csv";

/// A sweep description.
///
/// ```toml
/// task = "blobs-4"
/// seeds = [0, 1, 2]
///
/// [grid]
/// n_c = [1, 2, 5, 10]
/// "generator.num_blocks" = [0, 3]
/// ```
///
/// Bare grid keys name top-level run-config fields such as `baseline`, or
/// else attack fields; dotted keys reach any run-config field.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub task: Option<String>,
    /// Base run config, relative to the grid file.
    pub config: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut spec = Self::from_toml(&text)?;
        if let (Some(cfg), Some(dir)) = (spec.config.as_mut(), path.parent()) {
            *cfg = dir.join(&*cfg);
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub seed: u64,
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}/seed-{}", self.name, self.seed)
    }
}

fn json_value(v: &toml::Value) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn set_path(cfg: &RunConfig, key: &str, value: &toml::Value) -> Result<RunConfig> {
    let mut root = serde_json::to_value(cfg)?;
    let top_level = root.get(key).is_some();
    let path = if key.contains('.') || top_level { key.to_string() } else { format!("attack.{key}") };
    let mut slot = &mut root;
    for part in path.split('.') {
        if slot.is_null() {
            *slot = serde_json::Value::Object(Default::default());
        }
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| config_error(format!("grid key `{key}` does not name a config field")))?;
        slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
    }
    *slot = json_value(value)?;
    serde_json::from_value(root).map_err(|e| config_error(format!("grid key `{key}`: {e}")))
}

fn label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expands the grid into cells, checking every config and output path before anything runs.
pub fn plan(spec: &GridSpec, overrides: &Overrides, out: &Path) -> Result<Vec<Cell>> {
    if spec.grid.is_empty() || spec.grid.values().any(Vec::is_empty) || spec.seeds.is_empty() {
        bail!(config_error("empty grid: every grid key and `seeds` needs at least one value"));
    }
    let mut combos: Vec<Vec<(&String, &toml::Value)>> = vec![vec![]];
    for (key, values) in &spec.grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key, v));
                    c
                })
            })
            .collect();
    }
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for combo in &combos {
        let name = combo
            .iter()
            .map(|(k, v)| format!("{k}={}", label(v)))
            .collect::<Vec<_>>()
            .join(",")
            .replace(['/', '\\', ' '], "_");
        for &seed in &spec.seeds {
            let flags = Overrides {
                seed: Some(seed),
                ..overrides.clone()
            };
            let mut config = resolve(spec.task.as_deref(), spec.config.as_deref(), &flags)?;
            for (k, v) in combo {
                config = set_path(&config, k, v)?;
            }
            config.validate()?;
            let cell_out = out.join(&name).join(format!("seed-{seed}"));
            if !seen.insert(cell_out.clone()) {
                bail!(config_error(format!(
                    "cells share the output path {}; remove duplicate grid values",
                    cell_out.display()
                )));
            }
            cells.push(Cell {
                name: name.clone(),
                seed,
                config,
                out: cell_out,
            });
        }
    }
    Ok(cells)
}

fn victim_key(cfg: &RunConfig) -> String {
    let key = serde_json::json!([cfg.task, cfg.victim, cfg.attack.seed]);
    format!("{:016x}", fnv1a(key.to_string().as_bytes()))
}

pub struct SweepOutcome {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<MetricRow>,
}

/// Runs every cell with at most `jobs` in flight and writes the combined and
/// summary reports. Cells that share a task, victim config and seed share one
/// trained victim.
pub fn sweep(spec: &GridSpec, overrides: &Overrides, out: &Path, jobs: usize) -> Result<SweepOutcome> {
    let mut cells = plan(spec, overrides, out)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;

    let mut victims: BTreeMap<String, RunConfig> = BTreeMap::new();
    for cell in cells.iter().filter(|c| c.config.victim.path.is_none()) {
        victims.entry(victim_key(&cell.config)).or_insert_with(|| cell.config.clone());
    }
    info!("sweep: {} cells, {} victims to train", cells.len(), victims.len());
    let victim_dir = out.join("victims");
    pool.install(|| {
        victims
            .par_iter()
            .map(|(key, cfg)| train_victim(cfg, &victim_dir.join(key)).map(|_| ()))
            .collect::<Result<Vec<()>>>()
    })?;
    for cell in cells.iter_mut().filter(|c| c.config.victim.path.is_none()) {
        cell.config.victim.path = Some(victim_dir.join(victim_key(&cell.config)));
    }

    let results: Vec<Result<Vec<MetricRow>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| attack(&cell.config, &cell.out, &cell.run_id()).map(|o| o.trace))
            .collect()
    });
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(trace) => rows.extend(trace),
            Err(e) => {
                error!("{}: {e:#}", cell.run_id());
                failed.push(cell.run_id());
            }
        }
    }
    let summary = summarize(&rows);
    if !rows.is_empty() {
        emit_report(&rows, &out.join(COMBINED), ReportFormat::Csv)?;
        emit_report(&summary, &out.join(SUMMARY), ReportFormat::Csv)?;
    }
    if !failed.is_empty() {
        bail!("{} of {} cells failed: {}", failed.len(), cells.len(), failed.join(", "));
    }
    Ok(SweepOutcome { rows, summary })
}
