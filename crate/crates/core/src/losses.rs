//! Training objective: global and local mean/variance light-field losses,
//! total-variation regularization of the appearance flow, and the spatial
//! super-resolution L1 term.
//!
//! Every term has a graph form over view stacks (`[U*U, H, W, C]`) for
//! training and a value form over [`LightField`]s for evaluation. Both share
//! the same code path.

use diffcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfops::graph::square_root;
use crate::lfops::AppearanceFlowField;
use crate::lightfield::LightField;

/// What the total-variation term is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvTarget {
    /// The estimated appearance flow.
    #[default]
    Flow,
    /// The synthesized low-resolution light field.
    Field,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_l: f64,
    pub lambda_tv: f64,
    pub lambda_sr: f64,
    /// Optional pixel-wise L1 on the low-resolution field, off by default.
    #[serde(default)]
    pub lambda_pixel: f64,
    #[serde(default)]
    pub tv_target: TvTarget,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 10.0,
            lambda_l: 1.0,
            lambda_tv: 1e-4,
            lambda_sr: 10.0,
            lambda_pixel: 0.0,
            tv_target: TvTarget::Flow,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_g: 0.0,
            lambda_l: 0.0,
            lambda_tv: 0.0,
            lambda_sr: 0.0,
            lambda_pixel: 0.0,
            tv_target: TvTarget::Flow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_l", self.lambda_l),
            ("lambda_tv", self.lambda_tv),
            ("lambda_sr", self.lambda_sr),
            ("lambda_pixel", self.lambda_pixel),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw loss terms of one evaluation and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub global: f64,
    pub local: f64,
    pub tv: f64,
    pub sr: f64,
    pub pixel: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum in the order the graph evaluates it.
    pub fn weighted(
        global: f64,
        local: f64,
        tv: f64,
        sr: f64,
        pixel: f64,
        w: &LossWeights,
    ) -> Self {
        let total = w.lambda_g * global
            + w.lambda_l * local
            + w.lambda_tv * tv
            + w.lambda_sr * sr
            + w.lambda_pixel * pixel;
        Self {
            global,
            local,
            tv,
            sr,
            pixel,
            total,
        }
    }

    /// First term, in reporting order, that is not finite.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("global", self.global),
            ("local", self.local),
            ("tv", self.tv),
            ("sr", self.sr),
            ("pixel", self.pixel),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs truth {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// `mean|M(p) - M(t)| + mean|V(p) - V(t)|` over the leading view axis.
fn moment_discrepancy(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let (mp, vp) = tape.reduce_mean_var(pred)?;
    let (mt, vt) = tape.reduce_mean_var(truth)?;
    let dm = tape.sub(mp, mt)?;
    let dm = tape.abs(dm)?;
    let dm = tape.mean(dm)?;
    let dv = tape.sub(vp, vt)?;
    let dv = tape.abs(dv)?;
    let dv = tape.mean(dv)?;
    Ok(tape.add(dm, dv)?)
}

/// Global light-field loss on view stacks.
pub fn global_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, pred, truth, "global loss")?;
    moment_discrepancy(tape, pred, truth)
}

fn select_views(tape: &mut Tape, stack: Var, views: &[usize]) -> Result<Var> {
    let shape = tape.shape(stack).to_vec();
    let m: usize = shape[1..].iter().product();
    let index = views.iter().flat_map(|&s| s * m..(s + 1) * m).collect();
    let mut out = shape;
    out[0] = views.len();
    Ok(tape.gather(stack, index, &out)?)
}

/// Local light-field loss: the moment discrepancy of every angular row and
/// every angular column, summed over the `2U` groups.
pub fn local_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, pred, truth, "local loss")?;
    let n = tape.shape(pred).first().copied().unwrap_or(0);
    let u = square_root(n)?;
    if u < 2 {
        return Err(Error::Numeric(diffcore::Error::Degenerate {
            op: "local_loss",
            detail: format!("angular extent {u}, need at least 2"),
        }));
    }
    let mut groups: Vec<Vec<usize>> = (0..u)
        .map(|m| (0..u).map(|k| m * u + k).collect())
        .collect();
    groups.extend((0..u).map(|k| (0..u).map(|m| m * u + k).collect::<Vec<_>>()));
    let mut total: Option<Var> = None;
    for g in groups {
        let p = select_views(tape, pred, &g)?;
        let t = select_views(tape, truth, &g)?;
        let d = moment_discrepancy(tape, p, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, d)?,
            None => d,
        });
    }
    Ok(total.expect("at least two groups"))
}

fn shifted_index(
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    dy: usize,
    dx: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut ahead = Vec::new();
    let mut here = Vec::new();
    for s in 0..n {
        for y in 0..h - dy {
            for x in 0..w - dx {
                for c in 0..k {
                    here.push(((s * h + y) * w + x) * k + c);
                    ahead.push(((s * h + y + dy) * w + x + dx) * k + c);
                }
            }
        }
    }
    (ahead, here)
}

/// Mean squared forward difference along one spatial axis, or `None` when the
/// axis has a single sample.
fn squared_difference(tape: &mut Tape, x: Var, dy: usize, dx: usize) -> Result<Option<Var>> {
    let (n, h, w, k) = match *tape.shape(x) {
        [n, h, w, k] => (n, h, w, k),
        ref s => {
            return Err(Error::Shape(format!(
                "TV input must be [N, H, W, K], got {s:?}"
            )))
        }
    };
    if h <= dy || w <= dx || n * k == 0 {
        return Ok(None);
    }
    let (ahead, here) = shifted_index(n, h, w, k, dy, dx);
    let len = here.len();
    let a = tape.gather(x, ahead, &[len])?;
    let b = tape.gather(x, here, &[len])?;
    let d = tape.sub(a, b)?;
    let d = tape.square(d)?;
    Ok(Some(tape.mean(d)?))
}

/// Total variation `(mean_h + mean_v) / 2` of squared forward differences
/// over a `[N, H, W, K]` stack. Axes of length one contribute zero.
pub fn tv_loss(tape: &mut Tape, x: Var) -> Result<Var> {
    let h = squared_difference(tape, x, 0, 1)?;
    let v = squared_difference(tape, x, 1, 0)?;
    let sum = match (h, v) {
        (Some(h), Some(v)) => tape.add(h, v)?,
        (Some(t), None) | (None, Some(t)) => t,
        (None, None) => {
            let zero = tape.constant(Tensor::scalar(0.0))?;
            return Ok(zero);
        }
    };
    Ok(tape.scale(sum, 0.5)?)
}

/// Mean absolute error.
pub fn l1_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, pred, truth, "L1 loss")?;
    let d = tape.sub(pred, truth)?;
    let d = tape.abs(d)?;
    Ok(tape.mean(d)?)
}

/// Graph inputs of [`objective`]: view stacks for the fields and the flow.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs {
    pub pred_lr: Var,
    pub truth_lr: Var,
    pub pred_hr: Var,
    pub truth_hr: Var,
    pub flow: Var,
}

/// Records the weighted objective; returns the scalar total and the report
/// of its raw terms.
pub fn objective(
    tape: &mut Tape,
    x: ObjectiveInputs,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let g = global_loss(tape, x.pred_lr, x.truth_lr).map_err(tag("global"))?;
    let l = local_loss(tape, x.pred_lr, x.truth_lr).map_err(tag("local"))?;
    let tv = match w.tv_target {
        TvTarget::Flow => tv_loss(tape, x.flow),
        TvTarget::Field => tv_loss(tape, x.pred_lr),
    }
    .map_err(tag("tv"))?;
    let sr = l1_loss(tape, x.pred_hr, x.truth_hr).map_err(tag("sr"))?;
    let px = l1_loss(tape, x.pred_lr, x.truth_lr).map_err(tag("pixel"))?;
    let mut total = tape.scale(g, w.lambda_g).map_err(tag("total"))?;
    for (term, lambda) in [
        (l, w.lambda_l),
        (tv, w.lambda_tv),
        (sr, w.lambda_sr),
        (px, w.lambda_pixel),
    ] {
        let t = tape.scale(term, lambda).map_err(tag("total"))?;
        total = tape.add(total, t).map_err(tag("total"))?;
    }
    let item = |v: Var| tape.value(v).data()[0];
    let report = LossReport {
        global: item(g),
        local: item(l),
        tv: item(tv),
        sr: item(sr),
        pixel: item(px),
        total: item(total),
    };
    Ok((total, report))
}

/// Names the loss term in which a value stopped being finite.
fn tag<E: Into<Error>>(term: &'static str) -> impl Fn(E) -> Error {
    move |e| match e.into() {
        Error::Numeric(source @ diffcore::Error::NonFinite { .. }) => {
            Error::NonFiniteTerm { term, source }
        }
        e => e,
    }
}

fn eval2(a: Tensor, b: Tensor, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(a)?;
    let b = tape.constant(b)?;
    let out = f(&mut tape, a, b)?;
    Ok(tape.value(out).data()[0])
}

fn check_fields(a: &LightField, b: &LightField) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "light fields differ: {:?} vs {:?}",
            a.to_stack().shape(),
            b.to_stack().shape()
        )));
    }
    Ok(())
}

pub fn global_lf_loss(pred: &LightField, truth: &LightField) -> Result<f64> {
    check_fields(pred, truth)?;
    eval2(pred.to_stack(), truth.to_stack(), global_loss)
}

pub fn local_lf_loss(pred: &LightField, truth: &LightField) -> Result<f64> {
    check_fields(pred, truth)?;
    eval2(pred.to_stack(), truth.to_stack(), local_loss)
}

pub fn tv_regularizer(flow: &AppearanceFlowField) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(flow.to_stack())?;
    let out = tv_loss(&mut tape, f)?;
    Ok(tape.value(out).data()[0])
}

/// Total variation of a light field, for the alternative TV target.
pub fn tv_field(lf: &LightField) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(lf.to_stack())?;
    let out = tv_loss(&mut tape, f)?;
    Ok(tape.value(out).data()[0])
}

pub fn sr_loss(pred_hr: &LightField, truth_hr: &LightField) -> Result<f64> {
    check_fields(pred_hr, truth_hr)?;
    eval2(pred_hr.to_stack(), truth_hr.to_stack(), l1_loss)
}

pub fn total_objective(
    pred_lr: &LightField,
    truth_lr: &LightField,
    pred_hr: &LightField,
    truth_hr: &LightField,
    flow: &AppearanceFlowField,
    weights: &LossWeights,
) -> Result<LossReport> {
    check_fields(pred_lr, truth_lr)?;
    check_fields(pred_hr, truth_hr)?;
    let mut tape = Tape::new();
    let x = ObjectiveInputs {
        pred_lr: tape.constant(pred_lr.to_stack())?,
        truth_lr: tape.constant(truth_lr.to_stack())?,
        pred_hr: tape.constant(pred_hr.to_stack())?,
        truth_hr: tape.constant(truth_hr.to_stack())?,
        flow: tape.constant(flow.to_stack())?,
    };
    Ok(objective(&mut tape, x, weights)?.1)
}
