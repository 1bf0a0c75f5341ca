//! The encoder / angular-decoder / spatial-decoder network.
//!
//! The encoder has `depth` levels of two convolutions and a stride-2
//! convolution, with `base * 2^(k-1)` filters at level `k`, followed by a
//! two-convolution bottleneck. The angular decoder mirrors it with transpose
//! convolutions and encoder skips and ends in a linear layer emitting `2U²`
//! flow channels. The spatial decoder shares a trunk from the bottleneck and
//! splits into one or two residual branches; each concatenates its prior at
//! native and at doubled resolution before producing `U² C_out` residual
//! channels.

mod checkpoint;
mod config;
mod net;
mod params;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{NetConfig, Prior, ResidualOrder};
pub use net::{
    field_shapes, shape_plan, trace_shapes, AngularOutput, Net, ShapeTrace, SpatialOutput,
};
pub use params::{branch_name, layer_plan, Group, LayerKind, LayerSpec, ModelParams};

use diffcore::{Tape, Tensor};

use crate::error::Result;
use crate::lfops::AppearanceFlowField;
use crate::lightfield::LightField;

/// Result of a full forward pass on one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub flow: AppearanceFlowField,
    pub lf_lr: LightField,
    /// Upsampled field plus residuals, clamped to `[0, 1]`.
    pub lf_hr: LightField,
    /// Residual stacks `[U², 2H, 2W, C_out]` per branch.
    pub residuals: Vec<(Prior, Tensor)>,
    /// Unclamped high-resolution stack.
    pub hr_stack: Tensor,
}

impl ModelParams {
    /// Flow and warped field for one input image.
    pub fn forward_angular(&self, center: &Tensor) -> Result<(AppearanceFlowField, LightField)> {
        let mut tape = Tape::new();
        let mut net = self.bind_constant(&mut tape)?;
        let x = tape.constant(center.clone())?;
        let a = net.forward_angular(&mut tape, x)?;
        let flow = AppearanceFlowField::from_stack(tape.value(a.flow))?;
        let lf = LightField::from_stack_clamped(tape.value(a.lf_lr))?;
        Ok((flow, lf))
    }

    /// Full forward pass; the high-resolution field is clamped here and
    /// only here.
    pub fn infer(&self, center: &Tensor) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut net = self.bind_constant(&mut tape)?;
        let x = tape.constant(center.clone())?;
        let (a, s) = net.forward(&mut tape, x)?;
        let hr_stack = tape.value(s.lf_hr).clone();
        Ok(Inference {
            flow: AppearanceFlowField::from_stack(tape.value(a.flow))?,
            lf_lr: LightField::from_stack_clamped(tape.value(a.lf_lr))?,
            lf_hr: LightField::from_stack_clamped(&hr_stack)?,
            residuals: s
                .residuals
                .iter()
                .map(|&(p, v)| (p, tape.value(v).clone()))
                .collect(),
            hr_stack,
        })
    }

    /// Four-times spatial super-resolution by running the network twice.
    ///
    /// The first pass produces the 2x field. Each of its views is then fed
    /// back as the input image; only the residuals predicted for the center
    /// slot are kept and added to the bilinear 2x upsample of that view.
    pub fn synth_hr_x4(&self, center: &Tensor) -> Result<LightField> {
        let first = self.infer(center)?;
        self.second_pass(&first.lf_hr)
    }

    /// Second 2x pass over every view of `hr`.
    pub fn second_pass(&self, hr: &LightField) -> Result<LightField> {
        let (cv, cu) = hr.center_index();
        let slot = cv * hr.views() + cu;
        let mut data = Vec::new();
        for v in 0..hr.views() {
            for u in 0..hr.views() {
                let view = hr.view(v, u)?;
                let lum = crate::lightfield::luminance(&view)?;
                let mut tape = Tape::new();
                let mut net = self.bind_constant(&mut tape)?;
                let x = tape.constant(lum)?;
                let (_, s) = net.forward(&mut tape, x)?;
                let src = tape.constant(view)?;
                let mut out = tape.bilinear_resize(src, 2)?;
                for &(_, r) in &s.residuals {
                    let stack = tape.value(r);
                    let m: usize = stack.shape()[1..].iter().product();
                    let shape = stack.shape()[1..].to_vec();
                    let res = Tensor::new(shape, stack.data()[slot * m..(slot + 1) * m].to_vec())?;
                    let res = tape.constant(res)?;
                    out = tape.add(out, res)?;
                }
                data.extend(tape.value(out).data().iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        LightField::new(
            hr.views(),
            2 * hr.height(),
            2 * hr.width(),
            hr.channels(),
            data,
        )
    }
}
