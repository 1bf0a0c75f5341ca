//! Forward passes of the encoder, the angular decoder and the spatial
//! decoder, recorded on a [`Tape`].

use diffcore::{Tape, Tensor, Var};

use super::config::Prior;
use super::params::{LayerKind, LayerSpec, ModelParams};
use crate::error::{Error, Result};
use crate::lfops::graph as ops;

/// Activation shapes in evaluation order, labelled by layer name.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Outputs of the angular path, all as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AngularOutput {
    /// Input image `[H, W, C]`.
    pub center: Var,
    /// Raw network flow `[H, W, 2U²]` in column-major view order.
    pub raw_flow: Var,
    /// Decoded flow stack `[U², H, W, 2]`.
    pub flow: Var,
    /// Shifted field `[U², H, W, C]`.
    pub shifted: Var,
    /// Warped low-resolution field `[U², H, W, C]`.
    pub lf_lr: Var,
    /// Bottleneck activation shared with the spatial decoder.
    pub bottleneck: Var,
}

/// Outputs of the spatial path.
#[derive(Clone, Debug)]
pub struct SpatialOutput {
    /// `bilinear_resize(lf_lr, 2)`, widened to the output channel count.
    pub upsampled: Var,
    /// One `[U², 2H, 2W, C_out]` residual stack per branch.
    pub residuals: Vec<(Prior, Var)>,
    /// Unclamped sum of the upsampled field and all residuals.
    pub lf_hr: Var,
}

/// Parameters bound onto a tape.
pub struct Net<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
    trace: Option<ShapeTrace>,
}

impl ModelParams {
    /// Binds parameters as tape leaves. Frozen groups become constants, so no
    /// gradient reaches them.
    pub fn bind(&self, tape: &mut Tape) -> Result<Net<'_>> {
        let mut vars = Vec::with_capacity(self.tensors().len());
        for (i, t) in self.tensors().iter().enumerate() {
            let trainable = !self.is_frozen(self.group_of(i));
            vars.push(tape.leaf(t.clone(), trainable)?);
        }
        Ok(Net {
            params: self,
            vars,
            trace: None,
        })
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Result<Net<'_>> {
        let vars = self
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Net {
            params: self,
            vars,
            trace: None,
        })
    }
}

impl<'p> Net<'p> {
    /// Parameter variables in plan order (kernel, bias per layer).
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Starts recording activation shapes.
    pub fn record_shapes(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> ShapeTrace {
        self.trace.take().unwrap_or_default()
    }

    fn note(&mut self, tape: &Tape, label: impl Into<String>, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((label.into(), tape.shape(v).to_vec()));
        }
    }

    fn layer(&mut self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let i = self
            .params
            .layer_index(name)
            .ok_or_else(|| Error::Argument(format!("no layer named {name}")))?;
        let spec: &LayerSpec = &self.params.layers()[i];
        let (w, b) = (self.vars[2 * i], self.vars[2 * i + 1]);
        let slope = self.params.config().leaky_slope;
        let y = match spec.kind {
            LayerKind::Conv { stride } => {
                let y = tape.conv2d(x, w, b, stride)?;
                tape.leaky_relu(y, slope)?
            }
            LayerKind::ConvT => {
                let y = tape.conv2d_transpose(x, w, b, 2)?;
                tape.leaky_relu(y, slope)?
            }
            LayerKind::Linear => tape.conv2d(x, w, b, 1)?,
        };
        self.note(tape, name, y);
        Ok(y)
    }

    fn concat(&mut self, tape: &mut Tape, label: &str, a: Var, b: Var) -> Result<Var> {
        let y = tape.concat_channels(a, b)?;
        self.note(tape, format!("{label}.concat"), y);
        Ok(y)
    }

    fn check_input(&self, tape: &Tape, center: Var) -> Result<()> {
        let c = self.params.config();
        match *tape.shape(center) {
            [h, w, ch] if ch == c.channels => c.check_extent(h, w),
            ref s => Err(Error::Shape(format!(
                "network input must be [H, W, {}], got {s:?}",
                c.channels
            ))),
        }
    }

    /// Encoder, angular decoder, flow decoding, shifting and warping.
    pub fn forward_angular(&mut self, tape: &mut Tape, center: Var) -> Result<AngularOutput> {
        self.check_input(tape, center)?;
        let cfg = self.params.config().clone();
        let mut skips = Vec::with_capacity(cfg.depth);
        let mut x = center;
        for k in 1..=cfg.depth {
            x = self.layer(tape, &format!("enc{k}.conv1"), x)?;
            x = self.layer(tape, &format!("enc{k}.conv2"), x)?;
            skips.push(x);
            x = self.layer(tape, &format!("enc{k}.down"), x)?;
        }
        x = self.layer(tape, "bottleneck.conv1", x)?;
        let bottleneck = self.layer(tape, "bottleneck.conv2", x)?;

        let mut x = bottleneck;
        for k in (1..=cfg.depth).rev() {
            let up = self.layer(tape, &format!("ang{k}.up"), x)?;
            let cat = self.concat(tape, &format!("ang{k}"), up, skips[k - 1])?;
            x = self.layer(tape, &format!("ang{k}.conv1"), cat)?;
            x = self.layer(tape, &format!("ang{k}.conv2"), x)?;
        }
        x = self.layer(tape, "ang.head1", x)?;
        x = self.layer(tape, "ang.head2", x)?;
        let raw_flow = self.layer(tape, "ang.out", x)?;

        let flow = ops::decode_flow(tape, raw_flow, cfg.views)?;
        let shifted = ops::shift(tape, center, cfg.views, cfg.eta)?;
        let lf_lr = ops::warp(tape, shifted, flow)?;
        self.note(tape, "lf_lr", lf_lr);
        Ok(AngularOutput {
            center,
            raw_flow,
            flow,
            shifted,
            lf_lr,
            bottleneck,
        })
    }

    /// Shared trunk from the bottleneck, the residual branches, and the sum
    /// with the upsampled low-resolution field.
    pub fn forward_spatial(
        &mut self,
        tape: &mut Tape,
        ang: &AngularOutput,
    ) -> Result<SpatialOutput> {
        let cfg = self.params.config().clone();
        let mut x = ang.bottleneck;
        for k in (2..=cfg.depth).rev() {
            x = self.layer(tape, &format!("sp{k}.up"), x)?;
            if k > 2 {
                x = self.layer(tape, &format!("sp{k}.conv1"), x)?;
                x = self.layer(tape, &format!("sp{k}.conv2"), x)?;
            }
        }
        let trunk = x;

        let lf_channels = ops::views_to_channels(tape, ang.lf_lr)?;
        let mut priors: Vec<(Prior, Var, Var)> = Vec::new();
        let mut residuals = Vec::new();
        for (name, prior) in self.params.branches() {
            let (native, doubled) = match priors.iter().find(|p| p.0 == prior) {
                Some(&(_, n, d)) => (n, d),
                None => {
                    let (n, d) = match prior {
                        Prior::Flow => {
                            let d = ops::upsample_flow(tape, ang.raw_flow, cfg.sr_factor)?;
                            (ang.raw_flow, d)
                        }
                        Prior::Intensity => {
                            let d = tape.bilinear_resize(lf_channels, cfg.sr_factor)?;
                            (lf_channels, d)
                        }
                    };
                    priors.push((prior, n, d));
                    (n, d)
                }
            };
            let up = self.layer(tape, &format!("{name}.up1"), trunk)?;
            let cat = self.concat(tape, &format!("{name}.up1"), up, native)?;
            let mut y = self.layer(tape, &format!("{name}.conv1"), cat)?;
            y = self.layer(tape, &format!("{name}.conv2"), y)?;
            let up = self.layer(tape, &format!("{name}.up2"), y)?;
            let cat = self.concat(tape, &format!("{name}.up2"), up, doubled)?;
            y = self.layer(tape, &format!("{name}.conv3"), cat)?;
            let out = self.layer(tape, &format!("{name}.out"), y)?;
            residuals.push((prior, ops::channels_to_views(tape, out, cfg.views)?));
        }

        let mut upsampled = tape.bilinear_resize(ang.lf_lr, cfg.sr_factor)?;
        if cfg.out_channels != cfg.channels {
            upsampled = widen_channels(tape, upsampled, cfg.out_channels)?;
        }
        let mut lf_hr = upsampled;
        for &(_, r) in &residuals {
            lf_hr = tape.add(lf_hr, r)?;
        }
        self.note(tape, "lf_hr", lf_hr);
        Ok(SpatialOutput {
            upsampled,
            residuals,
            lf_hr,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        center: Var,
    ) -> Result<(AngularOutput, SpatialOutput)> {
        let a = self.forward_angular(tape, center)?;
        let s = self.forward_spatial(tape, &a)?;
        Ok((a, s))
    }
}

/// Repeats the single channel of a `[.., 1]` tensor `c` times.
fn widen_channels(tape: &mut Tape, x: Var, c: usize) -> Result<Var> {
    let mut shape = tape.shape(x).to_vec();
    if shape.last() != Some(&1) {
        return Err(Error::Shape(format!(
            "cannot widen {shape:?} to {c} channels"
        )));
    }
    let n: usize = shape.iter().product();
    let index = (0..n).flat_map(|i| std::iter::repeat_n(i, c)).collect();
    *shape.last_mut().unwrap() = c;
    Ok(tape.gather(x, index, &shape)?)
}

/// Activation shapes the network produces for an `h x w` input, derived
/// from the layer plan alone.
pub fn shape_plan(params: &ModelParams, h: usize, w: usize) -> Result<ShapeTrace> {
    let c = params.config();
    c.check_extent(h, w)?;
    let mut out = ShapeTrace::new();
    let mut push =
        |name: String, hh: usize, ww: usize, ch: usize| out.push((name, vec![hh, ww, ch]));
    for l in params.layers() {
        let level = |prefix: &str| -> usize {
            l.name[prefix.len()..]
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(1)
        };
        let (hh, ww) = if let Some(rest) = l.name.strip_prefix("enc") {
            let k = level("enc");
            let down = if rest.ends_with("down") { k } else { k - 1 };
            (h >> down, w >> down)
        } else if l.name.starts_with("bottleneck") {
            (h >> c.depth, w >> c.depth)
        } else if l.name.starts_with("ang.") {
            (h, w)
        } else if l.name.starts_with("ang") {
            let k = level("ang");
            (h >> (k - 1), w >> (k - 1))
        } else if l.name.starts_with("sp") {
            let k = level("sp");
            (h >> (k - 1), w >> (k - 1))
        } else if l.name.ends_with("up1") || l.name.ends_with("conv1") || l.name.ends_with("conv2")
        {
            (h, w)
        } else {
            (2 * h, 2 * w)
        };
        push(l.name.clone(), hh, ww, l.cout);
        if l.name.ends_with(".up") && l.name.starts_with("ang") {
            let k = level("ang");
            push(format!("ang{k}.concat"), hh, ww, l.cout + c.enc_filters(k));
        }
        if l.name.starts_with("res_") && (l.name.ends_with("up1") || l.name.ends_with("up2")) {
            let prefix = &l.name[..l.name.len() - 4];
            let prior = params
                .branches()
                .into_iter()
                .find(|b| b.0 == prefix)
                .map(|b| b.1)
                .expect("branch exists");
            push(
                format!("{}.concat", l.name),
                hh,
                ww,
                l.cout + c.prior_channels(prior),
            );
        }
    }
    Ok(out)
}

/// Symbolic shapes of the final fields `(flow, lf_lr, lf_hr)` for an
/// `h x w` input, as view stacks.
pub fn field_shapes(params: &ModelParams, h: usize, w: usize) -> [Vec<usize>; 3] {
    let c = params.config();
    let n = c.view_count();
    [
        vec![n, h, w, 2],
        vec![n, h, w, c.channels],
        vec![n, 2 * h, 2 * w, c.out_channels],
    ]
}

/// Evaluates the network on a constant input and returns the recorded
/// activation shapes.
pub fn trace_shapes(params: &ModelParams, center: &Tensor, spatial: bool) -> Result<ShapeTrace> {
    let mut tape = Tape::new();
    let mut net = params.bind_constant(&mut tape)?;
    net.record_shapes();
    let x = tape.constant(center.clone())?;
    let a = net.forward_angular(&mut tape, x)?;
    if spatial {
        net.forward_spatial(&mut tape, &a)?;
    }
    Ok(net.take_trace())
}
