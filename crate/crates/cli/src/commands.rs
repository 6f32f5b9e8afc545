use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use egl_core::metrics::{write_metrics, MetricsRecord};
use egl_core::protocols::{Method, Schedule};
use egl_core::sim::{prepare_data, run_experiment, Checkpoint, Divergence, ExperimentConfig, RunOptions};

use crate::config::{config_hash, parse_config_value, to_toml};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed(Option<MetricsRecord>),
    Diverged(Divergence),
}

/// Runs one experiment into `out`, writing the metrics CSV, the final
/// checkpoint and the resolved config. A diverged run keeps its metrics and
/// config but gets no checkpoint.
pub fn cmd_run(config: &ExperimentConfig, out: &Path, force: bool, threads: usize) -> Result<RunStatus> {
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let targets = [METRICS_FILE, CHECKPOINT_FILE, CONFIG_FILE].map(|f| out.join(f));
    if !force {
        if let Some(existing) = targets.iter().find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", existing.display());
        }
    }
    let [metrics_path, checkpoint_path, config_path] = targets;
    let resolved = to_toml(config)?;
    fs::write(&config_path, &resolved).with_context(|| format!("cannot write {}", config_path.display()))?;

    let data = prepare_data::<f64>(&config.data, config.seed)?;
    let options = RunOptions {
        threads,
        ..RunOptions::default()
    };
    let output = run_experiment(config, &data, &options)?;
    write_metrics(&output.series, &metrics_path)?;
    if let Some(d) = output.divergence {
        if checkpoint_path.exists() {
            fs::remove_file(&checkpoint_path)
                .with_context(|| format!("cannot remove stale {}", checkpoint_path.display()))?;
        }
        return Ok(RunStatus::Diverged(d));
    }
    Checkpoint {
        config_hash: config_hash(config)?,
        params: output.params,
    }
    .write(&checkpoint_path)?;
    Ok(RunStatus::Completed(output.series.last().cloned()))
}

/// One `--axis key=v1,v2,...` argument.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("axis `{s}` is not of the form key=v1,v2,..."))?;
        let key = key.trim();
        if key.is_empty() {
            bail!("axis `{s}` has an empty key");
        }
        let values: Vec<toml::Value> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(parse_scalar)
            .collect();
        if values.is_empty() {
            bail!("axis `{key}` has no values");
        }
        Ok(Axis {
            key: key.to_string(),
            values,
        })
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_scalar(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_key(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    for part in parents {
        let table = node
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{key}`: `{part}` is not inside a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| anyhow!("`{key}` does not name a table entry"))?;
    table.insert(last.to_string(), value);
    Ok(())
}

fn remove_key(root: &mut toml::Value, section: &str, key: &str) {
    if let Some(t) = root.get_mut(section).and_then(toml::Value::as_table_mut) {
        t.remove(key);
    }
}

/// Applies an axis value, dropping keys the new value makes meaningless:
/// a period replaces a probability and vice versa, and a method sheds the
/// alpha or schedule it does not use.
pub fn apply_axis(root: &mut toml::Value, key: &str, value: &toml::Value) -> Result<()> {
    set_key(root, key, value.clone())?;
    match key {
        "protocol.tau" => remove_key(root, "protocol", "comm_probability"),
        "protocol.comm_probability" => remove_key(root, "protocol", "tau"),
        "protocol.method" => {
            let method: Method = value
                .as_str()
                .ok_or_else(|| anyhow!("protocol.method values must be strings"))?
                .parse()
                .map_err(|e| anyhow!("protocol.method: {e}"))?;
            if !method.uses_alpha() {
                remove_key(root, "protocol", "alpha");
            }
            if !method.uses_schedule() {
                remove_key(root, "protocol", "tau");
                remove_key(root, "protocol", "comm_probability");
            }
        }
        _ => {}
    }
    Ok(())
}

const LABEL_KEYS: [&str; 5] = [
    "protocol.method",
    "workers",
    "protocol.tau",
    "protocol.comm_probability",
    "protocol.alpha",
];

/// `<METHOD>-<W>[-<sched>][-<alpha>]`; a period is written `t<τ>`.
pub fn cell_label(config: &ExperimentConfig) -> String {
    let mut label = format!("{}-{}", config.protocol.method.label(), config.workers);
    match config.protocol.schedule {
        Some(Schedule::Period(t)) => label += &format!("-t{t}"),
        Some(Schedule::Probability(p)) => label += &format!("-{p}"),
        None => {}
    }
    if let Some(a) = config.protocol.alpha {
        label += &format!("-{a}");
    }
    label
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub status: Result<RunStatus, String>,
}

impl SweepCell {
    pub fn succeeded(&self) -> bool {
        matches!(self.status, Ok(RunStatus::Completed(_)))
    }
}

/// Runs the cartesian product of `axes` for every seed, one subdirectory per
/// cell, and writes `summary.csv`. Failed cells are recorded and skipped.
pub fn cmd_sweep(
    base_path: &Path,
    axes: &[Axis],
    seeds: &[u64],
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<Vec<SweepCell>> {
    if axes.iter().any(|a| a.values.is_empty()) {
        bail!("every axis needs at least one value");
    }
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let text = fs::read_to_string(base_path).with_context(|| format!("cannot read config {}", base_path.display()))?;
    let base: toml::Value = toml::Value::Table(
        text.parse()
            .with_context(|| format!("invalid config {}", base_path.display()))?,
    );
    let base_dir = base_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;

    let mut combos: Vec<Vec<usize>> = vec![vec![]];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                (0..axis.values.len()).map(move |i| {
                    let mut next = c.clone();
                    next.push(i);
                    next
                })
            })
            .collect();
    }

    let mut cells = Vec::new();
    let mut used = HashSet::new();
    for combo in &combos {
        let mut value = base.clone();
        let mut extras = String::new();
        let mut edit = Ok(());
        for (axis, &i) in axes.iter().zip(combo) {
            edit = edit.and_then(|_| apply_axis(&mut value, &axis.key, &axis.values[i]));
            if !LABEL_KEYS.contains(&axis.key.as_str()) {
                let short = axis.key.rsplit('.').next().unwrap_or(&axis.key);
                extras += &format!("-{short}{}", value_text(&axis.values[i]));
            }
        }
        for &seed in seeds {
            let config = edit
                .as_ref()
                .map_err(|e| anyhow!("{e:#}"))
                .and_then(|_| parse_config_value(value.clone(), base_dir))
                .map(|mut c| {
                    c.seed = seed;
                    c
                });
            let label = match &config {
                Ok(c) => cell_label(c),
                Err(_) => combo
                    .iter()
                    .zip(axes)
                    .map(|(&i, a)| value_text(&a.values[i]))
                    .collect::<Vec<_>>()
                    .join("-"),
            };
            let mut name = format!("{label}{extras}-s{seed}");
            let stem = name.clone();
            let mut k = 2;
            while !used.insert(name.clone()) {
                name = format!("{stem}-{k}");
                k += 1;
            }
            let dir = out.join(&name);
            let status = config
                .and_then(|c| cmd_run(&c, &dir, force, threads))
                .map_err(|e| format!("{e:#}"));
            if let Err(e) = &status {
                eprintln!("cell {name} failed: {e}");
            }
            cells.push(SweepCell {
                label,
                seed,
                dir,
                status,
            });
        }
    }
    write_summary(&cells, &out.join(SUMMARY_FILE))?;
    Ok(cells)
}

fn write_summary(cells: &[SweepCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record([
        "label",
        "seed",
        "dir",
        "status",
        "final_step",
        "rank0_acc",
        "aggregate_acc",
    ])?;
    for c in cells {
        let dir = c
            .dir
            .file_name()
            .map(|d| d.to_string_lossy().into_owned())
            .unwrap_or_default();
        let (status, last) = match &c.status {
            Ok(RunStatus::Completed(last)) => ("ok", last.as_ref()),
            Ok(RunStatus::Diverged(_)) => ("diverged", None),
            Err(_) => ("error", None),
        };
        let (step, r0, agg) = match last {
            Some(r) => (
                r.step.to_string(),
                format!("{:.16e}", r.rank0_acc),
                format!("{:.16e}", r.aggregate_acc),
            ),
            None => Default::default(),
        };
        w.write_record([c.label.as_str(), &c.seed.to_string(), &dir, status, &step, &r0, &agg])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
