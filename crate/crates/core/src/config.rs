//! Run configuration: a flat `key = value` text format with typed values,
//! lossless round-tripping, fail-fast unknown keys, and a stable hash
//! embedded in every artifact.

use crate::backbone::ModelConfig;
use crate::episodes::TaskMode;
use crate::error::{Error, Result};
use crate::evaluation::ScoreMode;
use crate::losses::LossWeights;
use crate::metalearn::{MetaConfig, PretrainConfig};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Environment variable that overrides `dataset_root` when set.
pub const DATASET_ROOT_ENV: &str = "METASCENE_DATASET_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: String,
    pub out_dir: String,
    /// Scene ids used for pre-training and meta-training.
    pub train_scenes: Vec<String>,
    /// Held-out scene ids used for adaptation and evaluation.
    pub test_scenes: Vec<String>,

    pub frame_size: usize,
    pub frame_channels: usize,
    pub t: usize,
    pub unet_depth: usize,
    pub unet_base: usize,
    pub lstm_hidden: usize,
    pub disc_blocks: usize,
    pub disc_base: usize,

    pub mode: TaskMode,
    pub alpha: f64,
    pub beta: f64,
    pub n_tasks: usize,
    pub k: usize,
    pub inner_steps: usize,
    pub second_order: bool,
    pub iterations: usize,
    pub seed: u64,
    pub outer_adam: bool,

    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub adversarial_weight: f64,

    pub finetune_steps: usize,
    pub finetune_lr: f64,

    pub score_mode: ScoreMode,
    pub checkpoint_every: usize,
    pub k_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: "data".into(),
            out_dir: "out".into(),
            train_scenes: vec![],
            test_scenes: vec![],
            frame_size: 64,
            frame_channels: 3,
            t: 4,
            unet_depth: 4,
            unet_base: 32,
            lstm_hidden: 32,
            disc_blocks: 4,
            disc_base: 32,
            mode: TaskMode::Prediction,
            alpha: 1e-4,
            beta: 1e-4,
            n_tasks: 5,
            k: 10,
            inner_steps: 1,
            second_order: true,
            iterations: 500,
            seed: 0,
            outer_adam: false,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            pretrain_steps: 2000,
            pretrain_lr: 1e-4,
            pretrain_batch: 4,
            adversarial_weight: 0.05,
            finetune_steps: 50,
            finetune_lr: 1e-4,
            score_mode: ScoreMode::Psnr,
            checkpoint_every: 100,
            k_grid: vec![1, 5, 10],
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    parse_list(v).iter().map(|s| parse_num(key, s)).collect()
}

impl RunConfig {
    /// Apply one `key=value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset_root" => self.dataset_root = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            "train_scenes" => self.train_scenes = parse_list(v),
            "test_scenes" => self.test_scenes = parse_list(v),
            "frame_size" => self.frame_size = parse_num(key, v)?,
            "frame_channels" => self.frame_channels = parse_num(key, v)?,
            "t" => self.t = parse_num(key, v)?,
            "unet_depth" => self.unet_depth = parse_num(key, v)?,
            "unet_base" => self.unet_base = parse_num(key, v)?,
            "lstm_hidden" => self.lstm_hidden = parse_num(key, v)?,
            "disc_blocks" => self.disc_blocks = parse_num(key, v)?,
            "disc_base" => self.disc_base = parse_num(key, v)?,
            "mode" => {
                self.mode = match v {
                    "prediction" => TaskMode::Prediction,
                    "reconstruction" => TaskMode::Reconstruction,
                    _ => return Err(Error::Config(format!("mode: unknown value {v:?}"))),
                }
            }
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "n_tasks" => self.n_tasks = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "inner_steps" => self.inner_steps = parse_num(key, v)?,
            "second_order" => self.second_order = parse_bool(key, v)?,
            "iterations" => self.iterations = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "outer_adam" => self.outer_adam = parse_bool(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "lambda3" => self.lambda3 = parse_num(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, v)?,
            "adversarial_weight" => self.adversarial_weight = parse_num(key, v)?,
            "finetune_steps" => self.finetune_steps = parse_num(key, v)?,
            "finetune_lr" => self.finetune_lr = parse_num(key, v)?,
            "score_mode" => {
                self.score_mode = match v {
                    "psnr" => ScoreMode::Psnr,
                    "mse" => ScoreMode::Mse,
                    _ => return Err(Error::Config(format!("score_mode: unknown value {v:?}"))),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "k_grid" => self.k_grid = parse_usize_list(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse the flat `key = value` text format. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialization: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        let mode = match self.mode {
            TaskMode::Prediction => "prediction",
            TaskMode::Reconstruction => "reconstruction",
        };
        let score_mode = match self.score_mode {
            ScoreMode::Psnr => "psnr",
            ScoreMode::Mse => "mse",
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("adversarial_weight", self.adversarial_weight.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dataset_root", self.dataset_root.clone()),
            ("disc_base", self.disc_base.to_string()),
            ("disc_blocks", self.disc_blocks.to_string()),
            ("finetune_lr", self.finetune_lr.to_string()),
            ("finetune_steps", self.finetune_steps.to_string()),
            ("frame_channels", self.frame_channels.to_string()),
            ("frame_size", self.frame_size.to_string()),
            ("inner_steps", self.inner_steps.to_string()),
            ("iterations", self.iterations.to_string()),
            ("k", self.k.to_string()),
            ("k_grid", self.k_grid.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("lambda3", self.lambda3.to_string()),
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("mode", mode.to_string()),
            ("n_tasks", self.n_tasks.to_string()),
            ("out_dir", self.out_dir.clone()),
            ("outer_adam", self.outer_adam.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("score_mode", score_mode.to_string()),
            ("second_order", self.second_order.to_string()),
            ("seed", self.seed.to_string()),
            ("t", self.t.to_string()),
            ("test_scenes", self.test_scenes.join(",")),
            ("train_scenes", self.train_scenes.join(",")),
            ("unet_base", self.unet_base.to_string()),
            ("unet_depth", self.unet_depth.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Stable hash over the canonical text, minus machine-local paths:
    /// the same experiment run under different directories produces
    /// mergeable artifacts.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("dataset_root ") && !l.starts_with("out_dir "))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(text.as_bytes());
        crate::backbone::hex_prefix(&digest, 16)
    }

    /// Meta-train and meta-test scene sets must be disjoint: evaluation
    /// targets scenes never seen during training.
    pub fn validate(&self) -> Result<()> {
        for s in &self.train_scenes {
            if self.test_scenes.contains(s) {
                return Err(Error::Config(format!(
                    "scene {s:?} appears in both train_scenes and test_scenes"
                )));
            }
        }
        if self.t == 0 {
            return Err(Error::Config("t must be at least 1".into()));
        }
        if self.frame_channels != 1 && self.frame_channels != 3 {
            return Err(Error::Config("frame_channels must be 1 or 3".into()));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(Error::Config("k_grid must list positive shot counts".into()));
        }
        self.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Dataset root, honoring the environment override.
    pub fn resolved_dataset_root(&self) -> PathBuf {
        match std::env::var(DATASET_ROOT_ENV) {
            Ok(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from(&self.dataset_root),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frame_channels: self.frame_channels,
            frame_size: self.frame_size,
            t: self.t,
            unet_depth: self.unet_depth,
            unet_base: self.unet_base,
            lstm_hidden: self.lstm_hidden,
            disc_blocks: self.disc_blocks,
            disc_base: self.disc_base,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            alpha: self.alpha,
            beta: self.beta,
            n_tasks: self.n_tasks,
            k: self.k,
            inner_steps: self.inner_steps,
            second_order: self.second_order,
            iterations: self.iterations,
            seed: self.seed,
            weights: self.weights(),
            mode: self.mode,
            outer_adam: self.outer_adam,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            adversarial_weight: self.adversarial_weight,
            seed: self.seed,
            weights: self.weights(),
            mode: self.mode,
        }
    }
}
