//! Flat key=value run configuration with dotted namespaces.
//!
//! The format is deliberately tiny: one `key = value` pair per line, `#`
//! comments, no nesting. [`RunConfig::render`] emits every effective key in
//! a fixed order, and parsing that output reproduces the config exactly, so
//! echoed configs re-run bit-identically.

use std::fmt::Write as _;
use std::path::Path;

use crt_core::crt::BranchConfig;
use crt_core::data::SyntheticSpec;
use crt_core::loss::LossWeights;
use crt_core::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug)]
pub struct ConfigError {
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(message: impl Into<String>) -> ConfigError {
    ConfigError {
        message: message.into(),
    }
}

/// Everything one run needs: data spec, model shape, training and loss
/// settings, evaluation cutoffs and gradient-check bounds.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub train_fraction: f64,
    pub branch_count: usize,
    pub share_weights: bool,
    pub branch1: BranchConfig,
    pub branch2: BranchConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub p: usize,
    pub q: usize,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub mining_eps: f64,
    pub div_weight: f64,
    pub ks: Vec<usize>,
    pub gradcheck_tolerance: f64,
    pub gradcheck_probes: usize,
    pub gradcheck_p: usize,
    pub gradcheck_q: usize,
    /// True once a file or override set `seed`; gates the $CRT_SEED fallback.
    pub seed_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: SyntheticSpec::default(),
            train_fraction: 0.5,
            branch_count: 2,
            share_weights: false,
            branch1: BranchConfig {
                prototype_count: 8,
                hidden_dim: 64,
                out_dim: 32,
                per_prototype_heads: true,
                ms_weight: 1.0,
            },
            branch2: BranchConfig {
                prototype_count: 12,
                hidden_dim: 64,
                out_dim: 64,
                per_prototype_heads: true,
                ms_weight: 0.1,
            },
            epochs: 3,
            steps_per_epoch: 25,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            p: 4,
            q: 4,
            lambda2: 0.9,
            alpha: 2.0,
            beta: 50.0,
            margin: 1.0,
            mining_eps: 0.1,
            div_weight: 1.0,
            ks: vec![1, 2, 4, 8],
            gradcheck_tolerance: 1e-4,
            gradcheck_probes: 12,
            gradcheck_p: 3,
            gradcheck_q: 2,
            seed_explicit: false,
        }
    }
}

impl RunConfig {
    /// Parse a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), ConfigError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("{source}:{}: expected key = value", idx + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| err(format!("{source}:{}: {}", idx + 1, e.message)))?;
        }
        Ok(())
    }

    /// Apply `key=value` command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| err(format!("override '{item}' is not key=value")))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| err(format!("override '{item}': {}", e.message)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| err(format!("key '{key}': cannot parse '{value}'")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(err(format!("key '{key}': expected true or false, got '{value}'"))),
            }
        }

        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.seed_explicit = true;
            }
            "data.n_classes" => self.data.n_classes = parse(key, value)?,
            "data.samples_per_class" => self.data.samples_per_class = parse(key, value)?,
            "data.height" => self.data.height = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.dim" => self.data.dim = parse(key, value)?,
            "data.class_sep" => self.data.class_sep = parse(key, value)?,
            "data.noise_sigma" => self.data.noise_sigma = parse(key, value)?,
            "data.part_count" => self.data.part_count = parse(key, value)?,
            "data.train_fraction" => self.train_fraction = parse(key, value)?,
            "model.branches" => {
                let n: usize = parse(key, value)?;
                if !(1..=2).contains(&n) {
                    return Err(err(format!("key '{key}': expected 1 or 2, got {n}")));
                }
                self.branch_count = n;
            }
            "model.share_weights" => self.share_weights = parse_bool(key, value)?,
            "branch1.k" => self.branch1.prototype_count = parse(key, value)?,
            "branch1.d_hidden" => self.branch1.hidden_dim = parse(key, value)?,
            "branch1.d_out" => self.branch1.out_dim = parse(key, value)?,
            "branch1.per_prototype_heads" => {
                self.branch1.per_prototype_heads = parse_bool(key, value)?
            }
            "branch1.ms_weight" => self.branch1.ms_weight = parse(key, value)?,
            "branch2.k" => self.branch2.prototype_count = parse(key, value)?,
            "branch2.d_hidden" => self.branch2.hidden_dim = parse(key, value)?,
            "branch2.d_out" => self.branch2.out_dim = parse(key, value)?,
            "branch2.per_prototype_heads" => {
                self.branch2.per_prototype_heads = parse_bool(key, value)?
            }
            "branch2.ms_weight" => self.branch2.ms_weight = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(err(format!("key '{key}': expected sgd or adam, got '{value}'"))),
                }
            }
            "train.p" => self.p = parse(key, value)?,
            "train.q" => self.q = parse(key, value)?,
            "loss.lambda2" => self.lambda2 = parse(key, value)?,
            "loss.alpha" => self.alpha = parse(key, value)?,
            "loss.beta" => self.beta = parse(key, value)?,
            "loss.margin" => self.margin = parse(key, value)?,
            "loss.mining_eps" => self.mining_eps = parse(key, value)?,
            "loss.div_weight" => self.div_weight = parse(key, value)?,
            "eval.ks" => {
                let ks: Result<Vec<usize>, _> = value.split(',').map(|s| s.trim().parse()).collect();
                self.ks = ks.map_err(|_| err(format!("key '{key}': cannot parse '{value}'")))?;
                if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0) {
                    return Err(err(format!("key '{key}': cutoffs must be positive")));
                }
            }
            "gradcheck.tolerance" => self.gradcheck_tolerance = parse(key, value)?,
            "gradcheck.probes" => self.gradcheck_probes = parse(key, value)?,
            "gradcheck.p" => self.gradcheck_p = parse(key, value)?,
            "gradcheck.q" => self.gradcheck_q = parse(key, value)?,
            _ => return Err(err(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Branch configs active for this run.
    pub fn branch_configs(&self) -> Vec<BranchConfig> {
        let mut out = vec![self.branch1.clone()];
        if self.branch_count >= 2 {
            out.push(self.branch2.clone());
        }
        out
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.branch_configs().iter().map(|b| b.ms_weight).collect(),
            lambda2: self.lambda2,
            alpha: self.alpha,
            beta: self.beta,
            margin: self.margin,
            mining_eps: self.mining_eps,
            div_weight: self.div_weight,
        }
    }

    /// Synthetic spec with the run seed applied.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            p: self.p,
            q: self.q,
            weights: self.loss_weights(),
            seed: self.seed,
        }
    }

    /// Effective config as a parseable key=value block, fixed key order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "data.n_classes = {}", self.data.n_classes);
        let _ = writeln!(out, "data.samples_per_class = {}", self.data.samples_per_class);
        let _ = writeln!(out, "data.height = {}", self.data.height);
        let _ = writeln!(out, "data.width = {}", self.data.width);
        let _ = writeln!(out, "data.dim = {}", self.data.dim);
        let _ = writeln!(out, "data.class_sep = {}", self.data.class_sep);
        let _ = writeln!(out, "data.noise_sigma = {}", self.data.noise_sigma);
        let _ = writeln!(out, "data.part_count = {}", self.data.part_count);
        let _ = writeln!(out, "data.train_fraction = {}", self.train_fraction);
        let _ = writeln!(out, "model.branches = {}", self.branch_count);
        let _ = writeln!(out, "model.share_weights = {}", self.share_weights);
        for (name, b) in [("branch1", &self.branch1), ("branch2", &self.branch2)] {
            let _ = writeln!(out, "{name}.k = {}", b.prototype_count);
            let _ = writeln!(out, "{name}.d_hidden = {}", b.hidden_dim);
            let _ = writeln!(out, "{name}.d_out = {}", b.out_dim);
            let _ = writeln!(out, "{name}.per_prototype_heads = {}", b.per_prototype_heads);
            let _ = writeln!(out, "{name}.ms_weight = {}", b.ms_weight);
        }
        let _ = writeln!(out, "train.epochs = {}", self.epochs);
        let _ = writeln!(out, "train.steps_per_epoch = {}", self.steps_per_epoch);
        let _ = writeln!(out, "train.learning_rate = {}", self.learning_rate);
        let _ = writeln!(
            out,
            "train.optimizer = {}",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
        );
        let _ = writeln!(out, "train.p = {}", self.p);
        let _ = writeln!(out, "train.q = {}", self.q);
        let _ = writeln!(out, "loss.lambda2 = {}", self.lambda2);
        let _ = writeln!(out, "loss.alpha = {}", self.alpha);
        let _ = writeln!(out, "loss.beta = {}", self.beta);
        let _ = writeln!(out, "loss.margin = {}", self.margin);
        let _ = writeln!(out, "loss.mining_eps = {}", self.mining_eps);
        let _ = writeln!(out, "loss.div_weight = {}", self.div_weight);
        let _ = writeln!(
            out,
            "eval.ks = {}",
            self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(out, "gradcheck.tolerance = {}", self.gradcheck_tolerance);
        let _ = writeln!(out, "gradcheck.probes = {}", self.gradcheck_probes);
        let _ = writeln!(out, "gradcheck.p = {}", self.gradcheck_p);
        let _ = writeln!(out, "gradcheck.q = {}", self.gradcheck_q);
        out
    }
}
