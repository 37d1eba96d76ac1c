//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. [`RunConfig::to_text`] writes every key, so the echoed file
//! reproduces the run.

use crate::diffusion::ReverseNoise;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ModelConfig;
use crate::train::{AdamConfig, TrainConfig};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub length: usize,
    pub stride: usize,
    pub drop_columns: Vec<String>,
    pub hidden_dim: usize,
    pub state_dim: usize,
    pub num_encoders: usize,
    pub num_difm: usize,
    pub num_dipm: usize,
    pub dilation_factors: Vec<usize>,
    /// `0` picks the default period
    pub period: usize,
    pub lag_weight_init: f64,
    pub time_features: usize,
    pub diffusion_steps: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub threads: usize,
    pub reverse_noise: ReverseNoise,
    /// solve the channel scan order from the training data
    pub solve_order: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::new(24, 1);
        let t = TrainConfig::default();
        Self {
            length: m.seq_len,
            stride: 1,
            drop_columns: Vec::new(),
            hidden_dim: m.hidden_dim,
            state_dim: m.state_dim,
            num_encoders: m.num_encoders,
            num_difm: m.num_difm,
            num_dipm: m.num_dipm,
            dilation_factors: m.dilation_factors,
            period: 0,
            lag_weight_init: m.lag_weight_init,
            time_features: m.time_features,
            diffusion_steps: m.diffusion_steps,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            lambda1: t.weights.lambda1,
            lambda2: t.weights.lambda2,
            seed: 0,
            checkpoint_every: 0,
            threads: 0,
            reverse_noise: ReverseNoise::Beta,
            solve_order: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "length" => self.length = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "drop_columns" => {
                self.drop_columns = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "state_dim" => self.state_dim = parse(key, value)?,
            "num_encoders" => self.num_encoders = parse(key, value)?,
            "num_difm" => self.num_difm = parse(key, value)?,
            "num_dipm" => self.num_dipm = parse(key, value)?,
            "dilation_factors" => self.dilation_factors = parse_list(key, value)?,
            "period" => self.period = parse(key, value)?,
            "lag_weight_init" => self.lag_weight_init = parse(key, value)?,
            "time_features" => self.time_features = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "lambda1" => self.lambda1 = parse(key, value)?,
            "lambda2" => self.lambda2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "reverse_noise" => {
                self.reverse_noise = match value.trim() {
                    "beta" => ReverseNoise::Beta,
                    "posterior" => ReverseNoise::Posterior,
                    "zero" => ReverseNoise::Zero,
                    other => return Err(Error::Config(format!("unknown reverse_noise {other:?}"))),
                }
            }
            "solve_order" => self.solve_order = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let noise = match self.reverse_noise {
            ReverseNoise::Beta => "beta",
            ReverseNoise::Posterior => "posterior",
            ReverseNoise::Zero => "zero",
        };
        let mut s = String::new();
        let pairs: [(&str, String); 26] = [
            ("length", self.length.to_string()),
            ("stride", self.stride.to_string()),
            ("drop_columns", self.drop_columns.join(",")),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("num_encoders", self.num_encoders.to_string()),
            ("num_difm", self.num_difm.to_string()),
            ("num_dipm", self.num_dipm.to_string()),
            ("dilation_factors", join(&self.dilation_factors)),
            ("period", self.period.to_string()),
            ("lag_weight_init", self.lag_weight_init.to_string()),
            ("time_features", self.time_features.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("threads", self.threads.to_string()),
            ("reverse_noise", noise.to_string()),
            ("solve_order", self.solve_order.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            seq_len: self.length,
            channels,
            hidden_dim: self.hidden_dim,
            state_dim: self.state_dim,
            num_encoders: self.num_encoders,
            num_difm: self.num_difm,
            num_dipm: self.num_dipm,
            dilation_factors: self.dilation_factors.clone(),
            period: (self.period > 0).then_some(self.period),
            lag_weight_init: self.lag_weight_init,
            time_features: self.time_features,
            diffusion_steps: self.diffusion_steps,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            weights: LossWeights::new(self.lambda1, self.lambda2)?,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            threads: self.threads,
        })
    }
}
