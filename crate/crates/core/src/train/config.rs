use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CpvError, Result};
use crate::model::{ConditioningMode, LossWeights, DEFAULT_DIM};

/// Flat `key = value` training configuration. `#` starts a comment.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: ConditioningMode,
    pub lambda_hom: f64,
    pub lambda_pair: f64,
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    /// Best-validation checkpoint.
    pub checkpoint: PathBuf,
    /// End-of-training checkpoint; defaults to `<checkpoint>.last`.
    pub last_checkpoint: Option<PathBuf>,
    pub metrics: PathBuf,
    /// Optimizer steps between metric rows; 0 logs at epoch ends only.
    pub eval_every: usize,
    /// Fixed batches per split used for loss metrics.
    pub eval_batches: usize,
    /// Pairs per split whose every timestep enters the accuracy metric.
    pub acc_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: ConditioningMode::Cpv,
            lambda_hom: 1.0,
            lambda_pair: 1.0,
            dim: DEFAULT_DIM,
            lr: 1e-4,
            batch_size: 32,
            epochs: 20,
            seed: 0,
            dataset: PathBuf::from("data.cpvd"),
            checkpoint: PathBuf::from("model.cpvm"),
            last_checkpoint: None,
            metrics: PathBuf::from("metrics.csv"),
            eval_every: 0,
            eval_batches: 4,
            acc_pairs: 64,
        }
    }
}

/// Named loss-weight presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    Pair,
    Hom,
    Full,
}

impl Variant {
    pub fn weights(self) -> LossWeights {
        match self {
            Variant::Plain => LossWeights { hom: 0.0, pair: 0.0 },
            Variant::Pair => LossWeights { hom: 0.0, pair: 1.0 },
            Variant::Hom => LossWeights { hom: 1.0, pair: 0.0 },
            Variant::Full => LossWeights { hom: 1.0, pair: 1.0 },
        }
    }
}

impl FromStr for Variant {
    type Err = CpvError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Variant::Plain),
            "pair" => Ok(Variant::Pair),
            "hom" => Ok(Variant::Hom),
            "full" => Ok(Variant::Full),
            other => Err(CpvError::Config(format!("unknown variant {other:?} (plain|pair|hom|full)"))),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CpvError::Config(format!("bad value for {key}: {v:?}")))
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { hom: self.lambda_hom, pair: self.lambda_pair }
    }

    pub fn last_checkpoint_path(&self) -> PathBuf {
        self.last_checkpoint.clone().unwrap_or_else(|| {
            let mut s = self.checkpoint.clone().into_os_string();
            s.push(".last");
            PathBuf::from(s)
        })
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.mode = value.parse()?,
            "variant" => {
                let w = value.parse::<Variant>()?.weights();
                self.lambda_hom = w.hom;
                self.lambda_pair = w.pair;
            }
            "lambda_hom" => self.lambda_hom = parse(key, value)?,
            "lambda_pair" => self.lambda_pair = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "last_checkpoint" => self.last_checkpoint = Some(PathBuf::from(value)),
            "metrics" => self.metrics = PathBuf::from(value),
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_batches" => self.eval_batches = parse(key, value)?,
            "acc_pairs" => self.acc_pairs = parse(key, value)?,
            other => return Err(CpvError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CpvError::Config(m.to_string()));
        if !(self.lambda_hom >= 0.0 && self.lambda_hom.is_finite()) || !(self.lambda_pair >= 0.0 && self.lambda_pair.is_finite()) {
            return bad("loss weights must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.dim == 0 || self.batch_size == 0 || self.epochs == 0 || self.eval_batches == 0 {
            return bad("dim, batch_size, epochs and eval_batches must be positive");
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CpvError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse_str(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "lambda_hom = {}", self.lambda_hom)?;
        writeln!(f, "lambda_pair = {}", self.lambda_pair)?;
        writeln!(f, "dim = {}", self.dim)?;
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "dataset = {}", self.dataset.display())?;
        writeln!(f, "checkpoint = {}", self.checkpoint.display())?;
        if let Some(p) = &self.last_checkpoint {
            writeln!(f, "last_checkpoint = {}", p.display())?;
        }
        writeln!(f, "metrics = {}", self.metrics.display())?;
        writeln!(f, "eval_every = {}", self.eval_every)?;
        writeln!(f, "eval_batches = {}", self.eval_batches)?;
        writeln!(f, "acc_pairs = {}", self.acc_pairs)
    }
}
