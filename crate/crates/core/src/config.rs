//! Run configuration: `key = value` text with `#` comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{CircleParams, LossConfig};
use crate::model::{Architecture, Estimator, EstimatorConfig, ModelConfig};
use crate::roformer::EmbeddingKind;
use crate::superpoint::{DetectorConfig, LEVELS};

/// Every tunable of the pipeline in one flat record.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub fine_voxel: f64,
    pub coarse_voxel: f64,
    pub feature_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub embedding: EmbeddingKind,
    pub num_coarse: usize,
    pub sinkhorn_iters: usize,
    pub max_patch_points: usize,
    pub inlier_threshold: f64,
    pub rr_rotation_deg: f64,
    pub rr_translation: f64,
    pub fmr_threshold: f64,
    pub pos_margin: f64,
    pub neg_margin: f64,
    pub gamma: f64,
    pub eta: f64,
    pub tau: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: usize,
    pub clip_norm: f64,
    pub max_fine_pairs: usize,
    /// Training re-rotates each source by a random yaw within this bound.
    pub augment_yaw_deg: f64,
    pub voting: bool,
    pub estimator: Estimator,
    pub ransac_iters: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            fine_voxel: 0.6,
            coarse_voxel: 4.8,
            feature_dim: 64,
            layers: 3,
            heads: 1,
            embedding: EmbeddingKind::Rotary,
            num_coarse: 128,
            sinkhorn_iters: 100,
            max_patch_points: 64,
            inlier_threshold: 0.6,
            rr_rotation_deg: 5.0,
            rr_translation: 2.0,
            fmr_threshold: 0.05,
            pos_margin: 0.1,
            neg_margin: 1.4,
            gamma: 24.0,
            eta: 0.5,
            tau: 0.6,
            lr: 1e-4,
            lr_decay: 0.05,
            lr_decay_epochs: 4,
            clip_norm: 10.0,
            max_fine_pairs: 128,
            augment_yaw_deg: 30.0,
            voting: true,
            estimator: Estimator::Lgr,
            ransac_iters: 1000,
            seed: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{value}` is not a valid value for {key}"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("`{value}` is not a valid value for {key}")),
    }
}

impl Config {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "fine_voxel" => self.fine_voxel = num(key, v)?,
            "coarse_voxel" => self.coarse_voxel = num(key, v)?,
            "feature_dim" => self.feature_dim = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "heads" => self.heads = num(key, v)?,
            "embedding" => self.embedding = v.parse().map_err(|e: Error| e.to_string())?,
            "num_coarse" => self.num_coarse = num(key, v)?,
            "sinkhorn_iters" => self.sinkhorn_iters = num(key, v)?,
            "max_patch_points" => self.max_patch_points = num(key, v)?,
            "inlier_threshold" => self.inlier_threshold = num(key, v)?,
            "rr_rotation_deg" => self.rr_rotation_deg = num(key, v)?,
            "rr_translation" => self.rr_translation = num(key, v)?,
            "fmr_threshold" => self.fmr_threshold = num(key, v)?,
            "pos_margin" => self.pos_margin = num(key, v)?,
            "neg_margin" => self.neg_margin = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "eta" => self.eta = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = num(key, v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "max_fine_pairs" => self.max_fine_pairs = num(key, v)?,
            "augment_yaw_deg" => self.augment_yaw_deg = num(key, v)?,
            "voting" => self.voting = flag(key, v)?,
            "estimator" => self.estimator = v.parse().map_err(|e: Error| e.to_string())?,
            "ransac_iters" => self.ransac_iters = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, n + 1, format!("expected `key = value`, got `{line}`")))?;
            self.set(key, value).map_err(|m| Error::parse(path, n + 1, m))?;
        }
        Ok(())
    }

    /// Defaults overridden by the file at `path`, then validated.
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fine_voxel", self.fine_voxel),
            ("coarse_voxel", self.coarse_voxel),
            ("inlier_threshold", self.inlier_threshold),
            ("rr_rotation_deg", self.rr_rotation_deg),
            ("rr_translation", self.rr_translation),
            ("fmr_threshold", self.fmr_threshold),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("tau", self.tau),
            ("lr", self.lr),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("feature_dim", self.feature_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("num_coarse", self.num_coarse),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("max_patch_points", self.max_patch_points),
            ("lr_decay_epochs", self.lr_decay_epochs),
            ("ransac_iters", self.ransac_iters),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.lr_decay) {
            return Err(Error::invalid(format!("lr_decay must lie in [0, 1), got {}", self.lr_decay)));
        }
        if !(0.0..=180.0).contains(&self.augment_yaw_deg) {
            return Err(Error::invalid(format!("augment_yaw_deg must lie in [0, 180], got {}", self.augment_yaw_deg)));
        }
        if !(self.pos_margin >= 0.0 && self.neg_margin > self.pos_margin) {
            return Err(Error::invalid("margins need 0 <= pos_margin < neg_margin"));
        }
        let ratio = self.coarse_voxel / self.fine_voxel;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::invalid(format!(
                "coarse_voxel {} is not a multiple of fine_voxel {}",
                self.coarse_voxel, self.fine_voxel
            )));
        }
        let levels_ratio = (1usize << (LEVELS - 1)) as f64;
        if ratio.round() != levels_ratio {
            return Err(Error::invalid(format!(
                "the {LEVELS}-level encoder needs coarse_voxel = {levels_ratio} x fine_voxel"
            )));
        }
        if self.feature_dim % self.heads != 0 || (self.feature_dim / self.heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "feature_dim {} must split into {} heads of even width",
                self.feature_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Learning rate during `epoch` (from 0).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr * (1.0 - self.lr_decay).powi((epoch / self.lr_decay_epochs) as i32)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: Architecture {
                dim: self.feature_dim,
                rounds: self.layers,
                heads: self.heads,
                kind: self.embedding,
            },
            detector: DetectorConfig {
                fine_voxel: self.fine_voxel,
                voting: self.voting,
                ..DetectorConfig::default()
            },
            num_coarse: self.num_coarse,
            sinkhorn_iters: self.sinkhorn_iters,
            max_patch_points: self.max_patch_points,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            circle: CircleParams {
                pos_margin: self.pos_margin,
                neg_margin: self.neg_margin,
                gamma: self.gamma,
            },
            gap_margin: self.eta,
            match_radius: self.tau,
            max_fine_pairs: self.max_fine_pairs,
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            estimator: self.estimator,
            inlier_threshold: self.inlier_threshold,
            ransac_iters: self.ransac_iters,
            seed: self.seed,
        }
    }
}
