//! Two-stage optimization: the angular path alone with the spatial decoder
//! frozen, then both decoders jointly. Adam updates, gamma and crop
//! augmentation, JSON-lines logging and resumable checkpoints.

mod ablation;
mod config;
mod eval;
mod fit;

pub use ablation::{run_ablation, AblationRow, AblationTable};
pub use config::{AdamConfig, TrainConfig};
pub use eval::{evaluate, evaluate_scene, flow_sign_agreement, median, EvalSummary, SceneScore};
pub use fit::{fit, load_state, read_log, save_state, FitOutcome, LogRecord, Trainer, LOG_NAME};

use diffcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lightfield::LightField;
use crate::losses::{objective, LossReport, ObjectiveInputs};
use crate::model::{Group, ModelParams};
use crate::synthgen::Scene;

/// One supervised example: the low-resolution field (whose center view is
/// the network input) and the high-resolution field.
#[derive(Clone, Debug)]
pub struct Sample {
    pub lr: LightField,
    pub hr: LightField,
}

impl Sample {
    pub fn new(lr: LightField, hr: LightField) -> Result<Self> {
        if lr.views() != hr.views()
            || hr.height() != 2 * lr.height()
            || hr.width() != 2 * lr.width()
        {
            return Err(Error::Shape(format!(
                "HR field {}x{}x{}x{} is not a 2x version of LR field {}x{}x{}x{}",
                hr.views(),
                hr.views(),
                hr.height(),
                hr.width(),
                lr.views(),
                lr.views(),
                lr.height(),
                lr.width()
            )));
        }
        Ok(Self { lr, hr })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::new(scene.lr.clone(), scene.hr.clone())
    }

    pub fn center(&self) -> Tensor {
        self.lr.center_view()
    }
}

/// Gamma exponent and low-resolution crop window `[y0, x0, h, w]` drawn for
/// one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub gamma: f64,
    pub window: [usize; 4],
}

impl Augmentation {
    pub fn identity(sample: &Sample) -> Self {
        Self {
            gamma: 1.0,
            window: [0, 0, sample.lr.height(), sample.lr.width()],
        }
    }

    /// Applies the same gamma and window to both fields; the HR window is
    /// the LR window doubled.
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let [y0, x0, h, w] = self.window;
        let g = self.gamma;
        let lr = sample.lr.crop(y0, x0, h, w)?;
        let hr = sample.hr.crop(2 * y0, 2 * x0, 2 * h, 2 * w)?;
        if g == 1.0 {
            return Sample::new(lr, hr);
        }
        Sample::new(
            lr.map(|v| v.max(0.0).powf(g))?,
            hr.map(|v| v.max(0.0).powf(g))?,
        )
    }
}

/// Draws an augmentation: `gamma` uniform in `gamma_range` and, when `crop`
/// is set, a window displaced from the center by a uniform offset within
/// ±12.5% of each extent.
pub fn draw_augmentation(
    sample: &Sample,
    gamma_range: [f64; 2],
    crop: Option<[usize; 2]>,
    rng: &mut impl Rng,
) -> Result<Augmentation> {
    let (h, w) = (sample.lr.height(), sample.lr.width());
    let [lo, hi] = gamma_range;
    let gamma = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let window = match crop {
        None => [0, 0, h, w],
        Some([ch, cw]) => {
            if ch > h || cw > w {
                return Err(Error::Config(format!(
                    "crop {ch}x{cw} exceeds field extent {h}x{w}"
                )));
            }
            let place = |rng: &mut dyn rand::RngCore, full: usize, size: usize| -> usize {
                let jitter = (full as f64 * 0.125).round() as i64;
                let base = ((full - size) / 2) as i64;
                let off = rng.gen_range(-jitter..=jitter);
                (base + off).clamp(0, (full - size) as i64) as usize
            };
            let y0 = place(rng, h, ch);
            let x0 = place(rng, w, cw);
            [y0, x0, ch, cw]
        }
    };
    Ok(Augmentation { gamma, window })
}

/// Draws and applies an augmentation.
pub fn augment(
    sample: &Sample,
    gamma_range: [f64; 2],
    crop: Option<[usize; 2]>,
    rng: &mut impl Rng,
) -> Result<(Sample, Augmentation)> {
    let a = draw_augmentation(sample, gamma_range, crop, rng)?;
    Ok((a.apply(sample)?, a))
}

/// Generator for iteration `iteration` of a run seeded with `seed`.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::synthgen::scene_seed(
        seed ^ 0x5452_4149_4e45_5221,
        iteration,
    ))
}

/// Adam first and second moments of one parameter tensor and the number of
/// updates it has received.
#[derive(Clone, Debug, PartialEq)]
pub struct Moment {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed iterations.
    pub iteration: usize,
    pub params: ModelParams,
    pub moments: Vec<Moment>,
    pub history: Vec<LossReport>,
}

impl TrainState {
    /// Fresh parameters seeded from `config.seed`, with the configured
    /// output heads zeroed.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ModelParams::build(&config.net, config.seed)?;
        if config.zero_flow_head {
            params.zero_flow_head()?;
        }
        if config.zero_residual_heads {
            params.zero_residual_heads()?;
        }
        Ok(Self::from_params(params))
    }

    pub fn from_params(params: ModelParams) -> Self {
        let moments = params
            .tensors()
            .iter()
            .map(|t| Moment {
                m: Tensor::zeros(t.shape()),
                v: Tensor::zeros(t.shape()),
                step: 0,
            })
            .collect();
        Self {
            iteration: 0,
            params,
            moments,
            history: Vec::new(),
        }
    }

    /// Stage of the next iteration: 1 while the spatial decoder is frozen.
    pub fn stage(&self, config: &TrainConfig) -> u8 {
        if self.iteration < config.stage1_iters {
            1
        } else {
            2
        }
    }
}

/// One optimization step on `batch` (gradients averaged over it).
///
/// During stage 1 the spatial decoder is bound as constants, so its
/// parameters and their Adam moments stay untouched bit for bit.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &[Sample],
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let iteration = state.iteration + 1;
    let stage = state.stage(config);
    state.params.set_frozen(Group::Spatial, stage == 1);
    let mut weights = config.weights;
    if stage == 1 && config.zero_sr_in_stage1 {
        weights.lambda_sr = 0.0;
    }
    let out_c = config.net.out_channels;

    let n = state.params.tensors().len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    let mut sum = LossReport::default();
    for sample in batch {
        let mut tape = Tape::new();
        let net_report;
        {
            let mut net = state
                .params
                .bind(&mut tape)
                .map_err(non_finite(iteration, "network"))?;
            let x = tape.constant(sample.center())?;
            let (a, s) = net
                .forward(&mut tape, x)
                .map_err(non_finite(iteration, "network"))?;
            let truth_lr = tape.constant(sample.lr.to_stack())?;
            let truth_hr = tape.constant(widen(&sample.hr, out_c)?)?;
            let (total, report) = objective(
                &mut tape,
                ObjectiveInputs {
                    pred_lr: a.lf_lr,
                    truth_lr,
                    pred_hr: s.lf_hr,
                    truth_hr,
                    flow: a.flow,
                },
                &weights,
            )
            .map_err(non_finite(iteration, "network"))?;
            if let Some(term) = report.non_finite_term() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    term: term.to_string(),
                });
            }
            let vars = net.vars().to_vec();
            let mut g = tape
                .backward(total)
                .map_err(non_finite(iteration, "gradient"))?;
            for (slot, v) in grads.iter_mut().zip(vars) {
                if let Some(t) = g.take(v) {
                    match slot {
                        None => *slot = Some(t),
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, b)| *a += b),
                    }
                }
            }
            net_report = report;
        }
        sum.global += net_report.global;
        sum.local += net_report.local;
        sum.tv += net_report.tv;
        sum.sr += net_report.sr;
        sum.pixel += net_report.pixel;
        sum.total += net_report.total;
    }
    let k = batch.len() as f64;
    let report = LossReport {
        global: sum.global / k,
        local: sum.local / k,
        tv: sum.tv / k,
        sr: sum.sr / k,
        pixel: sum.pixel / k,
        total: sum.total / k,
    };

    let adam = config.adam;
    for (i, g) in grads.into_iter().enumerate() {
        let Some(mut g) = g else { continue };
        if batch.len() > 1 {
            g.data_mut().iter_mut().for_each(|v| *v /= k);
        }
        let lr = if state.params.group_of(i) == Group::Spatial {
            config.lr * config.spatial_lr_scale
        } else {
            config.lr
        };
        let mom = &mut state.moments[i];
        mom.step += 1;
        let t = mom.step as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        let p = &mut state.params.tensors_mut()[i];
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (j, p) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + adam.eps);
            *p -= update;
        }
    }
    state.params.set_frozen(Group::Spatial, false);
    state.iteration = iteration;
    state.history.push(report);
    Ok(report)
}

/// Turns a non-finite value anywhere in a step into [`Error::NonFiniteLoss`],
/// naming the loss term, or `stage` with the operation when the value arose
/// outside the objective.
fn non_finite<E: Into<Error>>(iteration: usize, stage: &'static str) -> impl Fn(E) -> Error {
    move |e| match e.into() {
        Error::NonFiniteTerm { term, .. } => Error::NonFiniteLoss {
            iteration,
            term: term.to_string(),
        },
        Error::Numeric(diffcore::Error::NonFinite { op, .. }) => Error::NonFiniteLoss {
            iteration,
            term: format!("{stage} ({op})"),
        },
        e => e,
    }
}

/// The view stack of `lf`, with a single channel replicated to `c` channels.
fn widen(lf: &LightField, c: usize) -> Result<Tensor> {
    let stack = lf.to_stack();
    if lf.channels() == c {
        return Ok(stack);
    }
    if lf.channels() != 1 {
        return Err(Error::Shape(format!(
            "HR truth has {} channels, the network produces {c}",
            lf.channels()
        )));
    }
    let mut shape = stack.shape().to_vec();
    shape[3] = c;
    let data = stack
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, c))
        .collect();
    Ok(Tensor::new(shape, data)?)
}
