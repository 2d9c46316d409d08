//! Ablation grids.
//!
//! A grid file is TOML:
//!
//! ```toml
//! base = "toy.toml"              # relative to the grid file
//! output_dir = "runs/msfl-grid"  # one subdirectory per run
//! seeds = [0, 1, 2]              # optional, default: the base seed
//! set = ["schedule.scale=0.25"]  # optional, applied to every row
//!
//! [[row]]
//! name = "a"
//! set = ["model.csip=off", "model.msff=off", "msgr.mode=off"]
//!
//! [axes]                         # optional cross-product
//! "msgr.p" = ["1", "2", "inf"]
//! ```
//!
//! Runs are rows x axis values x seeds. A run whose directory already holds
//! a result with the same config fingerprint is skipped, so an interrupted
//! grid resumes where it stopped.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use msfl_core::config::{parse_overrides, ExperimentConfig};
use msfl_core::data::Dataset;
use msfl_core::train::{self, TrainOptions, RESOLVED_CONFIG_FILE};

use crate::{Failure, Outcome};

pub const RESULT_FILE: &str = "result.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    base: Option<PathBuf>,
    output_dir: String,
    #[serde(default)]
    seeds: Vec<u64>,
    #[serde(default)]
    set: Vec<String>,
    #[serde(default)]
    row: Vec<Row>,
    #[serde(default)]
    axes: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Row {
    name: String,
    #[serde(default)]
    set: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub fingerprint: String,
    pub rank1: f64,
    pub rank5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub train_accuracy: f64,
}

struct Run {
    name: String,
    config: ExperimentConfig,
}

impl Run {
    fn dir(&self) -> PathBuf {
        PathBuf::from(&self.config.output_dir)
    }

    fn finished(&self) -> Option<RunResult> {
        let text = fs::read_to_string(self.dir().join(RESULT_FILE)).ok()?;
        let r: RunResult = serde_json::from_str(&text).ok()?;
        (r.fingerprint == self.config.fingerprint()).then_some(r)
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Expand the grid into fully resolved run configs; all problems across all
/// rows are reported together.
fn expand(grid_path: &Path) -> Result<Vec<Run>, Failure> {
    let text = fs::read_to_string(grid_path)
        .with_context(|| format!("reading {}", grid_path.display()))
        .map_err(Failure::Invalid)?;
    let grid: Grid = toml::from_str(&text)
        .map_err(|e| Failure::Invalid(anyhow!("{}: {}", grid_path.display(), e.message())))?;
    let here = grid_path.parent().unwrap_or(Path::new("."));
    let base_text = match &grid.base {
        Some(b) => {
            let p = here.join(b);
            fs::read_to_string(&p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(Failure::Invalid)?
        }
        None => String::new(),
    };
    let rows = if grid.row.is_empty() {
        vec![Row {
            name: "base".into(),
            set: Vec::new(),
        }]
    } else {
        grid.row
    };
    let mut combos: Vec<(String, Vec<String>)> = vec![(String::new(), Vec::new())];
    for (key, values) in &grid.axes {
        let mut next = Vec::new();
        for (suffix, sets) in &combos {
            for v in values {
                let text = value_text(v);
                let mut s = sets.clone();
                s.push(format!("{key}={text}"));
                next.push((format!("{suffix}__{}={text}", key.rsplit('.').next().unwrap_or(key)), s));
            }
        }
        combos = next;
    }

    let mut runs = Vec::new();
    let mut errors = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for row in &rows {
        for (suffix, axis_sets) in &combos {
            let seeds: Vec<Option<u64>> = if grid.seeds.is_empty() {
                vec![None]
            } else {
                grid.seeds.iter().copied().map(Some).collect()
            };
            for seed in seeds {
                let mut name = format!("{}{suffix}", row.name);
                let mut sets: Vec<String> = grid.set.iter().chain(&row.set).chain(axis_sets).cloned().collect();
                if let Some(s) = seed {
                    name = format!("{name}__seed={s}");
                    sets.push(format!("seed={s}"));
                }
                let dir = Path::new(&grid.output_dir).join(&name);
                sets.push(format!("output_dir={}", toml::Value::String(dir.display().to_string())));
                let resolved = parse_overrides(&sets).and_then(|o| ExperimentConfig::resolve(&base_text, &o));
                match resolved {
                    Ok(config) => {
                        if !names.insert(name.clone()) {
                            errors.push(format!("duplicate run name {name}"));
                        }
                        runs.push(Run { name, config });
                    }
                    Err(msfl_core::Error::Config(list)) => errors.extend(list.into_iter().map(|e| format!("{name}: {e}"))),
                    Err(e) => errors.push(format!("{name}: {e}")),
                }
            }
        }
    }
    if !errors.is_empty() {
        return Err(msfl_core::Error::Config(errors).into());
    }
    Ok(runs)
}

/// Train, evaluate and record one run in its output directory.
pub fn run_row(cfg: &ExperimentConfig) -> anyhow::Result<RunResult> {
    let out = train::train(cfg, &TrainOptions::default())?;
    let ds = Dataset::open(Path::new(&cfg.data.root))?;
    let mut model = out.model;
    let r = train::evaluate_model(&mut model, &ds, cfg.eval.max_rank, cfg.eval.batch_size)?;
    let name = Path::new(&cfg.output_dir)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    let result = RunResult {
        name,
        seed: cfg.seed,
        fingerprint: cfg.fingerprint(),
        rank1: r.rank(1),
        rank5: r.rank(5),
        map: r.map,
        train_accuracy: out.history.last().map_or(0.0, |h| h.train_accuracy),
    };
    fs::write(
        Path::new(&cfg.output_dir).join(RESULT_FILE),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;
    Ok(result)
}

fn onoff(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn write_summary(path: &Path, runs: &[Run], results: &[RunResult]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "row", "seed", "fingerprint", "fused", "lateral", "top_down", "msff", "msgr", "norm", "sigma", "targets", "rank1", "rank5",
        "mAP", "train_accuracy",
    ])?;
    for (run, r) in runs.iter().zip(results) {
        let c = &run.config;
        let targets: Vec<&str> = c.msgr.targets.iter().map(|t| t.name()).collect();
        let m = c.model_config(1);
        let fused = if m.is_baseline() {
            "C5".to_string()
        } else {
            let first = 6 - m.fused_levels();
            let kind = if m.csip || m.msff { "F" } else { "C" };
            format!("{kind}{first}..5")
        };
        w.write_record([
            run.name.clone(),
            c.seed.to_string(),
            r.fingerprint.clone(),
            fused,
            onoff(!m.is_baseline() && (!m.csip || m.lateral)).into(),
            onoff(c.model.csip).into(),
            onoff(c.model.msff).into(),
            c.msgr.mode.name().into(),
            c.msgr.p.to_string(),
            c.msgr.sigma.to_string(),
            targets.join("+"),
            format!("{:.6}", r.rank1),
            format!("{:.6}", r.rank5),
            format!("{:.6}", r.map),
            format!("{:.6}", r.train_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_grid(grid_path: &Path, parallel: usize, rerun: bool) -> Outcome {
    if parallel == 0 {
        return Err(Failure::Invalid(anyhow!("--parallel must be at least 1")));
    }
    let runs = expand(grid_path)?;
    let out_root = Path::new(&runs[0].config.output_dir)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    fs::create_dir_all(&out_root).map_err(|e| Failure::Runtime(e.into()))?;

    let pending: Vec<usize> = (0..runs.len())
        .filter(|&i| rerun || runs[i].finished().is_none())
        .collect();
    eprintln!("{} runs, {} to do", runs.len(), pending.len());
    if parallel == 1 {
        for &i in &pending {
            eprintln!("run {}", runs[i].name);
            run_row(&runs[i].config).map_err(Failure::from)?;
        }
    } else {
        spawn_workers(&runs, &pending, parallel).map_err(Failure::Runtime)?;
    }

    let results: Vec<RunResult> = runs
        .iter()
        .map(|r| r.finished().ok_or_else(|| anyhow!("run {} left no result", r.name)))
        .collect::<anyhow::Result<_>>()
        .map_err(Failure::Runtime)?;
    let summary = out_root.join(SUMMARY_FILE);
    write_summary(&summary, &runs, &results).map_err(Failure::Runtime)?;
    println!("{:<36} {:>8} {:>8}", "run", "rank1", "mAP");
    for r in &results {
        println!("{:<36} {:>8.4} {:>8.4}", r.name, r.rank1, r.map);
    }
    println!("summary written to {}", summary.display());
    Ok(())
}

/// Independent `run-row` processes, at most `n` at a time.
fn spawn_workers(runs: &[Run], pending: &[usize], n: usize) -> anyhow::Result<()> {
    let exe = std::env::current_exe()?;
    let mut queue = pending.iter().copied();
    let mut active: Vec<(usize, Child)> = Vec::new();
    let mut failed = Vec::new();
    loop {
        while active.len() < n {
            let Some(i) = queue.next() else { break };
            let dir = runs[i].dir();
            fs::create_dir_all(&dir)?;
            let cfg_path = dir.join(RESOLVED_CONFIG_FILE);
            fs::write(&cfg_path, runs[i].config.to_toml())?;
            let log = fs::File::create(dir.join("worker.log"))?;
            eprintln!("start {}", runs[i].name);
            let child = Command::new(&exe)
                .arg("run-row")
                .arg("--config")
                .arg(&cfg_path)
                .stdout(log.try_clone()?)
                .stderr(log)
                .spawn()?;
            active.push((i, child));
        }
        if active.is_empty() {
            break;
        }
        let mut done = None;
        for (k, (_, child)) in active.iter_mut().enumerate() {
            if let Some(status) = child.try_wait()? {
                done = Some((k, status));
                break;
            }
        }
        match done {
            Some((k, status)) => {
                let (i, _) = active.remove(k);
                eprintln!("done  {} ({status})", runs[i].name);
                if !status.success() {
                    failed.push(runs[i].name.clone());
                }
            }
            None => std::thread::sleep(std::time::Duration::from_millis(100)),
        }
    }
    if !failed.is_empty() {
        bail!("runs failed (see worker.log in each run directory): {}", failed.join(", "));
    }
    Ok(())
}
