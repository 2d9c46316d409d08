//! `msfl`: data generation, training, evaluation, gradient and oracle checks,
//! and ablation grids.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure, 3 a verification check failed.

mod ablate;
mod checks;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use msfl_core::config::{parse_overrides, ExperimentConfig};
use msfl_core::data::{self, Dataset, GenerateSpec, PreprocessMode, Split};
use msfl_core::eval;
use msfl_core::rng::stream_rng;
use msfl_core::train::{self, Checkpoint, TrainOptions};

#[derive(Parser)]
#[command(name = "msfl", version, about = "Multi-scale feature learning and gradient regularization for re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic re-identification dataset.
    GenerateData {
        #[arg(long)]
        ids: usize,
        #[arg(long)]
        per_id: usize,
        #[arg(long, default_value_t = 2)]
        cameras: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 80)]
        height: usize,
        #[arg(long, default_value_t = 40)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from a config file plus dotted-key overrides.
    Train {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// `key=value` overrides, e.g. `msgr.sigma=0.01 model.csip=off`.
        #[arg(long = "set", num_args = 1.., value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Rank query against gallery images and write CMC/mAP metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `eval/` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// A config whose model section must match the checkpoint.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Images (relative to the dataset root or the working directory)
        /// whose activation maps to export.
        #[arg(long, num_args = 1..)]
        viz: Vec<PathBuf>,
    },
    /// Finite-difference and chain-rule verification.
    GradCheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
    },
    /// Closed-form worst-case perturbation against a numerical search.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_dim: usize,
        #[arg(long, default_value_t = msfl_core::msgr::ORACLE_MIN_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate every row of a grid file; one summary CSV.
    Ablate {
        grid: PathBuf,
        /// Number of worker processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Retrain rows that already have results.
        #[arg(long)]
        rerun: bool,
    },
    /// Train and evaluate one resolved config (used by `ablate --parallel`).
    #[command(hide = true)]
    RunRow {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Layers,
    Model,
    Msgr,
    Chain,
    All,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Check(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let invalid = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<msfl_core::Error>(),
                Some(msfl_core::Error::Config(_)) | Some(msfl_core::Error::Checkpoint(_))
            )
        });
        if invalid {
            Failure::Invalid(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<msfl_core::Error> for Failure {
    fn from(e: msfl_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Invalid(e) | Failure::Runtime(e) => eprintln!("error: {e:#}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenerateData {
            ids,
            per_id,
            cameras,
            seed,
            height,
            width,
            out,
            force,
        } => {
            let mut spec = GenerateSpec::new(ids, per_id, cameras, seed);
            spec.height = height;
            spec.width = width;
            let manifest = data::generate(&spec, &out, force)?;
            println!("wrote {} images to {}", manifest.records.len(), out.display());
            for split in [Split::Train, Split::Query, Split::Gallery] {
                println!(
                    "  {split:<8} {:>5} images  {:>4} identities",
                    manifest.split(split).len(),
                    manifest.identities(split).len()
                );
            }
            Ok(())
        }
        Command::Train {
            config,
            set,
            resume,
            stop_after,
            print_config,
            quiet,
        } => {
            let cfg = load_config(config.as_deref(), &set)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            cmd_train(&cfg, resume, stop_after, quiet)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            config,
            viz,
        } => cmd_eval(&checkpoint, data, out, config, &viz),
        Command::GradCheck { scope } => checks::grad_check(scope),
        Command::OracleCheck {
            trials,
            max_dim,
            samples,
            seed,
        } => checks::oracle_check(trials, max_dim, samples, seed),
        Command::Ablate { grid, parallel, rerun } => ablate::run_grid(&grid, parallel, rerun),
        Command::RunRow { config } => {
            let cfg = load_config(Some(&config), &[])?;
            ablate::run_row(&cfg)?;
            Ok(())
        }
    }
}

/// Config file (or defaults) plus `--set` overrides; every problem is
/// reported at once.
fn load_config(path: Option<&Path>, set: &[String]) -> Result<ExperimentConfig, Failure> {
    let overrides = parse_overrides(set)?;
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(Failure::Invalid)?,
        None => String::new(),
    };
    Ok(ExperimentConfig::resolve(&text, &overrides)?)
}

fn cmd_train(cfg: &ExperimentConfig, resume: Option<PathBuf>, stop_after: Option<usize>, quiet: bool) -> Outcome {
    let opts = TrainOptions {
        resume,
        stop_after,
        progress: !quiet,
    };
    let out = train::train(cfg, &opts)?;
    let dir = &out.output_dir;
    plot::write_curves(dir).map_err(|e| Failure::Runtime(e.context("writing curves")))?;
    println!("config     {}", dir.join(train::RESOLVED_CONFIG_FILE).display());
    println!("log        {}", dir.join(train::LOG_FILE).display());
    println!("epochs     {}", out.epochs);
    println!("train acc  {:.4}", out.final_train_accuracy());
    if out.epochs == cfg.schedule().map_err(|e| Failure::Invalid(anyhow!(e)))?.epochs {
        println!("checkpoint {}", dir.join(train::FINAL_CHECKPOINT).display());
    } else {
        println!("checkpoint {}", train::checkpoint_path(dir, out.epochs).display());
    }
    Ok(())
}

/// Stages whose activation maps `--viz` exports.
const VIZ_STAGES: [&str; 5] = ["C2", "P2", "F2", "C5", "P5"];

fn cmd_eval(checkpoint: &Path, data: Option<PathBuf>, out: Option<PathBuf>, config: Option<PathBuf>, viz: &[PathBuf]) -> Outcome {
    let ckpt = Checkpoint::load(checkpoint)?;
    if let Some(path) = config {
        let cfg = load_config(Some(&path), &[])?;
        if cfg.model != ckpt.config.model {
            return Err(Failure::Invalid(anyhow!(
                "{} describes a different model than {}",
                path.display(),
                checkpoint.display()
            )));
        }
    }
    let root = data.unwrap_or_else(|| PathBuf::from(&ckpt.config.data.root));
    let ds = Dataset::open(&root)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    fs::create_dir_all(&out).map_err(|e| Failure::Runtime(e.into()))?;
    let mut model = ckpt.model()?;
    let result = train::evaluate_model(&mut model, &ds, ckpt.config.eval.max_rank, ckpt.config.eval.batch_size)?;
    eval::write_metrics_csv(&out.join("metrics.csv"), &result.rows())?;
    eval::write_metrics_json(&out.join("metrics.json"), &result)?;
    for (k, v) in result.rows() {
        println!("{k:<17}{v:.4}");
    }
    println!("metrics written to {}", out.display());

    if !viz.is_empty() {
        let vdir = out.join("viz");
        fs::create_dir_all(&vdir).map_err(|e| Failure::Runtime(e.into()))?;
        let target = (ckpt.config.model.input_height, ckpt.config.model.input_width);
        for path in viz {
            let file = if path.exists() { path.clone() } else { root.join(path) };
            let img = data::load_image(&file)?;
            let (x, _) = data::preprocess(&img, target, PreprocessMode::Eval, &mut stream_rng(0, 0, 0))?;
            let x = data::stack(&[x])?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            for (name, feat) in model.feature_maps(&x)? {
                if !VIZ_STAGES.contains(&name.as_str()) {
                    continue;
                }
                let (map, _) = eval::activation_map(&feat)?;
                let dest = vdir.join(format!("{stem}_{name}.pgm"));
                eval::export_map(&map, &dest)?;
                println!("wrote {}", dest.display());
            }
        }
    }
    Ok(())
}
