//! `crt` command-line driver: synthetic datasets, training, evaluation,
//! gradient checks, embedding analysis and correlation heat-map export.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration or file problems,
//! 3 numerical failure (NaN loss or a failed gradient check).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crt_core::crt::correlation_map;
use crt_core::data::{class_ids, generate_dataset, load_dataset, sample_batch, save_dataset, split_classes};
use crt_core::metrics::{embedding_space_density, spectral_decay};
use crt_core::model::ModelState;
use crt_core::trainer::{
    batch_rng, grad_check, history_to_csv, init_rng, load_checkpoint, normalize_embeddings,
    save_checkpoint, train_steps, Optimizer,
};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "crt", version, about = "Coded residual metric-learning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key=value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; falls back to the config file, then $CRT_SEED, then 42.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(ConfigArgs),
    /// Train a model on the train-class split of a dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out test classes.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare autodiff gradients against finite differences.
    Gradcheck(ConfigArgs),
    /// Density and spectral reports from an embedding dump.
    Analyze {
        /// CSV written by eval (label,e0,e1,...).
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export per-prototype correlation grids for one sample.
    Heatmap {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample index in the dataset file.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Branch whose prototypes are mapped.
        #[arg(long, default_value_t = 0)]
        branch: usize,
    },
}

enum CliError {
    Config(String),
    File(String),
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::File(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::File(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<crt_core::Error> for CliError {
    fn from(e: crt_core::Error) -> Self {
        use crt_core::Error::*;
        match e {
            NanLoss { .. } | NonFinite { .. } | DegenerateVector { .. } => {
                CliError::Numerical(e.to_string())
            }
            Io(_) | CorruptFile { .. } => CliError::File(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.message)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::File(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with success.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    } else if !cfg.seed_explicit {
        if let Ok(env_seed) = std::env::var("CRT_SEED") {
            cfg.seed = env_seed
                .parse()
                .map_err(|_| CliError::Config(format!("CRT_SEED '{env_seed}' is not an integer")))?;
        }
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.render())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = resolve_config(&args)?;
            prepare_out(&args.out, &cfg)?;
            let samples = generate_dataset(&cfg.synthetic_spec())?;
            let path = args.out.join("dataset.bin");
            save_dataset(&path, &samples)?;
            println!("wrote {} samples to {}", samples.len(), path.display());
            Ok(())
        }
        Command::Train { common, data } => {
            let cfg = resolve_config(&common)?;
            prepare_out(&common.out, &cfg)?;
            let samples = load_dataset(&data)?;
            let feature_dim = samples[0].feature_map.dim();
            let (train_set, _) = split_classes(&samples, cfg.train_fraction)?;

            let mut model = ModelState::new(
                &cfg.branch_configs(),
                feature_dim,
                cfg.share_weights,
                &mut init_rng(cfg.seed),
            )?;
            let tcfg = cfg.train_config();
            let sizes: Vec<usize> = model.groups.iter().map(|g| g.len()).collect();
            let mut optimizer = Optimizer::new(tcfg.optimizer, tcfg.learning_rate, &sizes);
            let mut rng = batch_rng(tcfg.seed);
            let history = train_steps(
                &mut model,
                &train_set,
                &tcfg,
                &mut optimizer,
                &mut rng,
                0,
                tcfg.total_steps(),
            )?;

            std::fs::write(common.out.join("loss_log.csv"), history_to_csv(&history))?;
            save_checkpoint(
                &common.out.join("checkpoint.bin"),
                &model,
                &optimizer,
                tcfg.total_steps() as u64,
                &rng,
            )?;
            if let Some(last) = history.last() {
                println!("trained {} steps, final loss {}", history.len(), last.total);
            } else {
                println!("trained 0 steps");
            }
            Ok(())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
        } => {
            let cfg = resolve_config(&common)?;
            prepare_out(&common.out, &cfg)?;
            let samples = load_dataset(&data)?;
            let (train_set, test_set) = split_classes(&samples, cfg.train_fraction)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let train_ids = class_ids(&train_set);

            let evals = crt_core::trainer::evaluate(&ckpt.model, &test_set, &train_ids, &cfg.ks)?;
            let labels: Vec<usize> = test_set.iter().map(|s| s.label).collect();
            for (b, eval) in evals.iter().enumerate() {
                let report_path = common.out.join(format!("report_branch{}.txt", b + 1));
                std::fs::write(&report_path, eval.to_kv())?;

                let mut embeddings = crt_core::trainer::embed_samples(&ckpt.model, &test_set, b)?;
                normalize_embeddings(&mut embeddings);
                let mut csv = String::from("label");
                for i in 0..embeddings[0].len() {
                    csv.push_str(&format!(",e{i}"));
                }
                csv.push('\n');
                for (label, e) in labels.iter().zip(&embeddings) {
                    csv.push_str(&label.to_string());
                    for v in e {
                        csv.push_str(&format!(",{v}"));
                    }
                    csv.push('\n');
                }
                std::fs::write(common.out.join(format!("embeddings_branch{}.csv", b + 1)), csv)?;
                println!(
                    "branch {}: {}",
                    b + 1,
                    eval.retrieval.to_kv().trim().replace('\n', " ")
                );
            }
            Ok(())
        }
        Command::Gradcheck(args) => {
            let cfg = resolve_config(&args)?;
            prepare_out(&args.out, &cfg)?;
            let samples = generate_dataset(&cfg.synthetic_spec())?;
            let mut model = ModelState::new(
                &cfg.branch_configs(),
                cfg.data.dim,
                cfg.share_weights,
                &mut init_rng(cfg.seed),
            )?;
            let mut rng = batch_rng(cfg.seed);
            let batch = sample_batch(&samples, cfg.gradcheck_p, cfg.gradcheck_q, &mut rng)?;
            let report = grad_check(
                &mut model,
                &batch,
                &cfg.loss_weights(),
                cfg.gradcheck_tolerance,
                cfg.gradcheck_probes,
            )?;
            std::fs::write(args.out.join("gradcheck.txt"), report.to_kv())?;
            println!(
                "max relative error {} (tolerance {})",
                report.max_rel_err, report.tolerance
            );
            if report.pass() {
                Ok(())
            } else {
                Err(CliError::Numerical(format!(
                    "gradient check failed: max relative error {} exceeds {}",
                    report.max_rel_err, report.tolerance
                )))
            }
        }
        Command::Analyze { embeddings, out } => {
            std::fs::create_dir_all(&out)?;
            let (labels, vectors) = read_embedding_dump(&embeddings)?;
            let mut text = String::new();
            match embedding_space_density(&vectors, &labels) {
                Ok(report) => text.push_str(&report.to_kv()),
                Err(e) => text.push_str(&format!("density_error={e}\n")),
            }
            let spectral = spectral_decay(&vectors).map_err(CliError::from)?;
            text.push_str(&spectral.to_kv());
            std::fs::write(out.join("analysis.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Heatmap {
            common,
            data,
            checkpoint,
            sample,
            branch,
        } => {
            let cfg = resolve_config(&common)?;
            prepare_out(&common.out, &cfg)?;
            let samples = load_dataset(&data)?;
            let s = samples.get(sample).ok_or_else(|| {
                CliError::Config(format!(
                    "sample index {sample} out of range ({} samples)",
                    samples.len()
                ))
            })?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let prototypes = ckpt.model.prototype_set(branch)?;
            let map = correlation_map(&s.feature_map, &prototypes)?;
            let (h, w) = (s.feature_map.height(), s.feature_map.width());
            for k in 0..prototypes.count() {
                let grid = &map.data()[k * h * w..(k + 1) * h * w];
                write_heatmap_csv(&common.out.join(format!("heatmap_k{k:02}.csv")), grid, h, w)?;
                write_heatmap_pgm(&common.out.join(format!("heatmap_k{k:02}.pgm")), grid, h, w)?;
            }
            println!(
                "wrote {} correlation grids for sample {sample} (label {})",
                prototypes.count(),
                s.label
            );
            Ok(())
        }
    }
}

fn read_embedding_dump(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CliError::File(format!("{}: empty embedding dump", path.display())))?;
    if !header.starts_with("label,") {
        return Err(CliError::File(format!(
            "{}: expected 'label,e0,...' header",
            path.display()
        )));
    }
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::File(format!("{}:{}: bad label", path.display(), idx + 2)))?;
        let vector: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let vector = vector
            .map_err(|_| CliError::File(format!("{}:{}: bad value", path.display(), idx + 2)))?;
        labels.push(label);
        vectors.push(vector);
    }
    if vectors.is_empty() {
        return Err(CliError::File(format!("{}: no embeddings", path.display())));
    }
    Ok((labels, vectors))
}

fn write_heatmap_csv(path: &Path, grid: &[f64], h: usize, w: usize) -> Result<(), CliError> {
    let mut out = String::new();
    for row in 0..h {
        let line: Vec<String> = (0..w).map(|col| grid[row * w + col].to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_heatmap_pgm(path: &Path, grid: &[f64], h: usize, w: usize) -> Result<(), CliError> {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in grid {
        // Constant maps fall back to mid-gray.
        let level = if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        };
        bytes.push(level);
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
