use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::losses::LossWeights;
use crate::model::NetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything that determines a training run, together with the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub total_iters: usize,
    /// Iterations with the spatial decoder frozen.
    pub stage1_iters: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning-rate multiplier for the spatial decoder.
    #[serde(default = "one_f")]
    pub spatial_lr_scale: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_gamma")]
    pub gamma_range: [f64; 2],
    /// Low-resolution crop extent `[h, w]`; `None` trains on full fields.
    #[serde(default)]
    pub crop: Option<[usize; 2]>,
    pub seed: u64,
    /// Drop the sr term entirely during stage 1 instead of only stopping its
    /// gradient at the frozen decoder.
    #[serde(default)]
    pub zero_sr_in_stage1: bool,
    /// Start from the shift-only flow (zeroed flow head). A zeroed head
    /// also blocks every gradient into the angular decoder until its
    /// weights move, which slows early training considerably.
    #[serde(default)]
    pub zero_flow_head: bool,
    /// Start from plain bilinear upsampling (zeroed residual heads).
    #[serde(default = "yes")]
    pub zero_residual_heads: bool,
    /// Trailing corpus scenes held out from training.
    #[serde(default)]
    pub holdout: usize,
    /// Write `ckpt_NNNNNN.lfck` every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_lr() -> f64 {
    1e-4
}

fn default_gamma() -> [f64; 2] {
    [0.4, 1.0]
}

impl TrainConfig {
    /// Desk schedule: 300 frozen-spatial iterations of 1200 on 32x32 crops
    /// of a 64x64 corpus, with the spatial decoder stepping at a tenth of
    /// the base rate.
    pub fn desk() -> Self {
        Self {
            net: NetConfig::desk(),
            total_iters: 1200,
            stage1_iters: 300,
            batch_size: 1,
            adam: AdamConfig::default(),
            lr: 1e-3,
            spatial_lr_scale: 0.1,
            weights: LossWeights::default(),
            gamma_range: default_gamma(),
            crop: Some([32, 32]),
            seed: 0,
            zero_sr_in_stage1: false,
            zero_flow_head: false,
            zero_residual_heads: true,
            holdout: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.net.validate()?;
        self.weights.validate()?;
        if self.stage1_iters > self.total_iters {
            return bad(format!(
                "stage1_iters {} exceeds total_iters {}",
                self.stage1_iters, self.total_iters
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let [lo, hi] = self.gamma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "gamma_range [{lo}, {hi}] must satisfy 0 < low <= high < inf"
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.spatial_lr_scale.is_finite() && self.spatial_lr_scale >= 0.0) {
            return bad(format!(
                "spatial_lr_scale must be finite and >= 0, got {}",
                self.spatial_lr_scale
            ));
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!(
                "adam needs beta1, beta2 in [0, 1) and eps > 0, got {} {} {}",
                a.beta1, a.beta2, a.eps
            ));
        }
        if let Some([h, w]) = self.crop {
            self.net.check_extent(h, w)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_str(&text).map_err(json_err(path))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
