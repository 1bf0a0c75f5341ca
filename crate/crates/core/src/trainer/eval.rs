use std::path::Path;

use diffcore::Tape;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lfops::{shift_stack, AppearanceFlowField};
use crate::lightfield::{luminance, LightField, Metrics};
use crate::model::ModelParams;
use crate::synthgen::{DatasetManifest, Scene};

/// Pixels closer than this to the frame edge are not scored for flow sign.
const SIGN_BORDER: usize = 4;
/// Minimum central-difference horizontal gradient of a scored pixel.
const SIGN_MIN_GRADIENT: f64 = 2e-3;
/// Minimum magnitude of the true horizontal flow of a scored pixel.
const SIGN_MIN_FLOW: f64 = 0.25;

/// Scores of one held-out scene. Field metrics exclude the center view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    pub model_lr: Metrics,
    /// The shifted input alone, i.e. a zero flow.
    pub shift_lr: Metrics,
    pub model_hr: Metrics,
    /// Bilinear 2x upsampling of the model's own low-resolution field.
    pub upsampled_hr: Metrics,
    pub sign_agree: usize,
    pub sign_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub scenes: Vec<SceneScore>,
    pub median_model_lr_psnr: f64,
    pub median_shift_lr_psnr: f64,
    pub median_model_hr_psnr: f64,
    pub median_upsampled_hr_psnr: f64,
    pub mean_model_hr_ssim: f64,
    /// Pooled over all scored pixels of all scenes.
    pub sign_agreement: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Counts scored pixels of the outermost view columns (`u = 0` and
/// `u = U - 1`) whose predicted horizontal flow has the sign of the true
/// flow. A pixel is scored when it is not occluded, lies at least four
/// pixels inside the frame, has visible horizontal texture in the true view
/// and a true horizontal flow of at least a quarter pixel.
pub fn flow_sign_agreement(
    pred: &AppearanceFlowField,
    truth: &AppearanceFlowField,
    occlusion: &[f64],
    lf: &LightField,
) -> (usize, usize) {
    let (u, h, w) = (lf.views(), lf.height(), lf.width());
    let (mut agree, mut total) = (0, 0);
    for v in 0..u {
        for col in [0, u - 1] {
            let s = v * u + col;
            let img = lf.view_slice(v, col);
            let c = lf.channels();
            for y in SIGN_BORDER..h.saturating_sub(SIGN_BORDER) {
                for x in SIGN_BORDER..w.saturating_sub(SIGN_BORDER) {
                    let i = y * w + x;
                    if occlusion[s * h * w + i] != 0.0 {
                        continue;
                    }
                    let grad = 0.5 * (img[(i + 1) * c] - img[(i - 1) * c]);
                    let t = truth.data()[(s * h * w + i) * 2];
                    if grad.abs() < SIGN_MIN_GRADIENT || t.abs() < SIGN_MIN_FLOW {
                        continue;
                    }
                    total += 1;
                    if pred.data()[(s * h * w + i) * 2] * t > 0.0 {
                        agree += 1;
                    }
                }
            }
        }
    }
    (agree, total)
}

fn resize2(lf: &LightField) -> Result<LightField> {
    let mut tape = Tape::new();
    let x = tape.constant(lf.to_stack())?;
    let y = tape.bilinear_resize(x, 2)?;
    LightField::from_stack_clamped(tape.value(y))
}

fn to_luminance(lf: &LightField) -> Result<LightField> {
    if lf.channels() == 1 {
        return Ok(lf.clone());
    }
    let mut data = Vec::with_capacity(lf.view_count() * lf.height() * lf.width());
    for v in 0..lf.views() {
        for u in 0..lf.views() {
            data.extend_from_slice(luminance(&lf.view(v, u)?)?.data());
        }
    }
    LightField::new(lf.views(), lf.height(), lf.width(), 1, data)
}

pub fn evaluate_scene(params: &ModelParams, scene: &Scene, name: &str) -> Result<SceneScore> {
    let cfg = params.config();
    let center = scene.lr.center_view();
    let inf = params.infer(&center)?;
    let shifted = LightField::from_stack_clamped(&shift_stack(&center, cfg.views, cfg.eta)?)?;
    let model_hr = to_luminance(&inf.lf_hr)?;
    let upsampled = resize2(&inf.lf_lr)?;
    let truth = scene.ideal_flow(cfg.eta)?;
    let (sign_agree, sign_total) =
        flow_sign_agreement(&inf.flow, &truth, &scene.occlusion.data, &scene.lr);
    Ok(SceneScore {
        scene: name.to_string(),
        model_lr: Metrics::fields(&inf.lf_lr, &scene.lr)?,
        shift_lr: Metrics::fields(&shifted, &scene.lr)?,
        model_hr: Metrics::fields(&model_hr, &scene.hr)?,
        upsampled_hr: Metrics::fields(&upsampled, &scene.hr)?,
        sign_agree,
        sign_total,
    })
}

/// Scores `params` on the corpus scenes listed in `indices`.
pub fn evaluate(
    params: &ModelParams,
    manifest: &DatasetManifest,
    corpus_dir: &Path,
    indices: &[usize],
) -> Result<EvalSummary> {
    let scenes = indices
        .iter()
        .map(|&i| {
            evaluate_scene(
                params,
                &manifest.load_scene(corpus_dir, i)?,
                &manifest.scenes[i].name,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&SceneScore) -> f64| median(&scenes.iter().map(f).collect::<Vec<_>>());
    let (agree, total) = scenes
        .iter()
        .fold((0, 0), |(a, t), s| (a + s.sign_agree, t + s.sign_total));
    Ok(EvalSummary {
        median_model_lr_psnr: pick(|s| s.model_lr.psnr_db),
        median_shift_lr_psnr: pick(|s| s.shift_lr.psnr_db),
        median_model_hr_psnr: pick(|s| s.model_hr.psnr_db),
        median_upsampled_hr_psnr: pick(|s| s.upsampled_hr.psnr_db),
        mean_model_hr_ssim: scenes.iter().map(|s| s.model_hr.ssim).sum::<f64>()
            / scenes.len().max(1) as f64,
        sign_agreement: if total == 0 {
            f64::NAN
        } else {
            agree as f64 / total as f64
        },
        scenes,
    })
}
