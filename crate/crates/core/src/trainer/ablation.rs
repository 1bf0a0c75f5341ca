use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, fit, TrainConfig};
use crate::error::{io_err, json_err, Result};
use crate::model::ResidualOrder;
use crate::synthgen::DatasetManifest;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub residual_order: ResidualOrder,
    pub parameters: usize,
    pub iterations: usize,
    /// Mean total loss over the last tenth of the run.
    pub final_loss: f64,
    pub lr_psnr_db: f64,
    pub hr_psnr_db: f64,
    pub hr_ssim: f64,
    pub upsampled_hr_psnr_db: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub eval_scenes: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

/// Trains `base` once per residual order, each run in its own
/// subdirectory of `out_dir`, scores every run on `eval_scenes` and writes
/// `ablation.json`.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Path,
    out_dir: &Path,
    eval_scenes: &[usize],
) -> Result<AblationTable> {
    let manifest = DatasetManifest::load(corpus)?;
    let mut rows = Vec::new();
    for order in ResidualOrder::ALL {
        let mut cfg = base.clone();
        cfg.net.residual_order = order;
        let start = Instant::now();
        let outcome = fit(&cfg, corpus, &out_dir.join(order.name()))?;
        let seconds = start.elapsed().as_secs_f64();
        let summary = evaluate(&outcome.state.params, &manifest, corpus, eval_scenes)?;
        let hist = &outcome.state.history;
        let tail = &hist[hist.len() - (hist.len() / 10).max(1).min(hist.len())..];
        rows.push(AblationRow {
            residual_order: order,
            parameters: outcome.state.params.parameter_count(),
            iterations: outcome.state.iteration,
            final_loss: tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64,
            lr_psnr_db: summary.median_model_lr_psnr,
            hr_psnr_db: summary.median_model_hr_psnr,
            hr_ssim: summary.mean_model_hr_ssim,
            upsampled_hr_psnr_db: summary.median_upsampled_hr_psnr,
            seconds,
        });
    }
    let table = AblationTable {
        eval_scenes: eval_scenes.to_vec(),
        rows,
    };
    let path = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(&table).map_err(json_err(&path))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(table)
}
