//! Run configuration: flat key-value config file with CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condgen::AblationFlags;
use crate::losses::LossWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for key {key:?}")]
    BadValue { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetSource {
    Synthetic,
    Directory,
}

/// Everything a training or evaluation run needs. Desk-scale defaults;
/// paper-scale values stay reachable through the config file or CLI flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub condition_resolution: (usize, usize),
    pub output_resolution: (usize, usize),
    pub weights: LossWeights,
    pub lr_tocg: f64,
    pub lr_toig_gen: f64,
    pub lr_toig_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_tocg: usize,
    pub batch_toig: usize,
    pub iterations: u64,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub dataset: DatasetSource,
    pub synth_n: usize,
    pub occlusion_prob: f64,
    pub data_root: Option<PathBuf>,
    pub pairs_file: Option<PathBuf>,
    /// 0 = use all available cores.
    pub threads: usize,
    pub deterministic: bool,
    pub tau: f64,
    pub cond_widths: [usize; 5],
    pub toig_widths: [usize; 4],
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            condition_resolution: (64, 48),
            output_resolution: (128, 96),
            weights: LossWeights::default(),
            lr_tocg: 2e-4,
            lr_toig_gen: 1e-4,
            lr_toig_disc: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_tocg: 8,
            batch_toig: 4,
            iterations: 2000,
            seed: 0,
            ablation: AblationFlags::default(),
            dataset: DatasetSource::Synthetic,
            synth_n: 256,
            occlusion_prob: 0.5,
            data_root: None,
            pairs_file: None,
            threads: 0,
            deterministic: true,
            tau: 0.3,
            cond_widths: [16, 32, 64, 128, 128],
            toig_widths: [128, 64, 32, 16],
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let (ch, cw) = self.condition_resolution;
        if ch % 16 != 0 || cw % 16 != 0 {
            return Err(ConfigError::Invalid(format!(
                "condition resolution {ch}x{cw} must be divisible by 16"
            )));
        }
        let (oh, ow) = self.output_resolution;
        if oh % 16 != 0 || ow % 16 != 0 {
            return Err(ConfigError::Invalid(format!(
                "output resolution {oh}x{ow} must be divisible by 16"
            )));
        }
        if oh % ch != 0 || ow % cw != 0 || oh / ch != ow / cw {
            return Err(ConfigError::Invalid(format!(
                "output resolution {oh}x{ow} must be an integer multiple of condition resolution {ch}x{cw}"
            )));
        }
        for (name, v) in [
            ("lr_tocg", self.lr_tocg),
            ("lr_toig_gen", self.lr_toig_gen),
            ("lr_toig_disc", self.lr_toig_disc),
        ] {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.batch_tocg == 0 || self.batch_toig == 0 {
            return Err(ConfigError::Invalid("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ConfigError::Invalid("tau must lie in [0, 1]".into()));
        }
        if self.dataset == DatasetSource::Directory && self.data_root.is_none() {
            return Err(ConfigError::Invalid(
                "dataset = directory requires data_root".into(),
            ));
        }
        Ok(())
    }

    /// Scale factor between condition and output resolution.
    pub fn upscale_factor(&self) -> usize {
        self.output_resolution.0 / self.condition_resolution.0
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        match key {
            "condition_height" => self.condition_resolution.0 = num!(),
            "condition_width" => self.condition_resolution.1 = num!(),
            "output_height" => self.output_resolution.0 = num!(),
            "output_width" => self.output_resolution.1 = num!(),
            "lr_tocg" => self.lr_tocg = num!(),
            "lr_toig_gen" => self.lr_toig_gen = num!(),
            "lr_toig_disc" => self.lr_toig_disc = num!(),
            "beta1" => self.beta1 = num!(),
            "beta2" => self.beta2 = num!(),
            "batch_tocg" => self.batch_tocg = num!(),
            "batch_toig" => self.batch_toig = num!(),
            "iterations" => self.iterations = num!(),
            "seed" => self.seed = num!(),
            "lambda_ce" => self.weights.lambda_ce = num!(),
            "lambda_l1" => self.weights.lambda_l1 = num!(),
            "lambda_vgg" => self.weights.lambda_vgg = num!(),
            "lambda_tv" => self.weights.lambda_tv = num!(),
            "w0" => self.weights.w[0] = num!(),
            "w1" => self.weights.w[1] = num!(),
            "w2" => self.weights.w[2] = num!(),
            "w3" => self.weights.w[3] = num!(),
            "lambda_vgg_toig" => self.weights.lambda_vgg_toig = num!(),
            "lambda_fm_toig" => self.weights.lambda_fm_toig = num!(),
            "no_fusion_exchange" => self.ablation.no_fusion_exchange = num!(),
            "no_condition_align" => self.ablation.no_condition_align = num!(),
            "no_occlusion_handling" => self.ablation.no_occlusion_handling = num!(),
            "no_multiscale_losses" => self.ablation.no_multiscale_losses = num!(),
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetSource::Synthetic,
                    "directory" => DatasetSource::Directory,
                    _ => return Err(bad()),
                }
            }
            "synth_n" => self.synth_n = num!(),
            "occlusion_prob" => self.occlusion_prob = num!(),
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "pairs_file" => self.pairs_file = Some(PathBuf::from(value)),
            "threads" => self.threads = num!(),
            "deterministic" => self.deterministic = num!(),
            "tau" => self.tau = num!(),
            "cond_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                self.cond_widths = parts.try_into().map_err(|_| bad())?;
            }
            "toig_widths" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad())?;
                self.toig_widths = parts.try_into().map_err(|_| bad())?;
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Parse {
                line: i + 1,
                message: "missing '='".into(),
            })?;
            cfg.apply_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}
