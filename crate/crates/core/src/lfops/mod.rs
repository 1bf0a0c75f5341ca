//! Geometric light-field operators: view shifting, flow decoding and
//! flow-based warping.
//!
//! Sign convention: a scene point with disparity `d` appears in view `Δu` at
//! `center(x - d * Δu)`. Shifting by `eta` therefore leaves a residual flow of
//! `(eta - d) * Δu` for the warp to recover.

pub mod graph;
mod vis;

pub use graph::shift_grid;
pub use vis::{flow_color, flow_mosaic};

use diffcore::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::lightfield::{
    center_index, image_dims, stack_dims, LightField, PackedField, ViewOffset,
};

/// Pixels of shift per unit of angular distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftScale(f64);

impl ShiftScale {
    pub fn new(eta: f64) -> Result<Self> {
        if !eta.is_finite() {
            return Err(Error::Argument(format!("shift scale {eta} is not finite")));
        }
        Ok(Self(eta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Per-view sampling offsets `(dx, dy)` in pixels, stored `[U*U, H, W, 2]` in
/// row-major view order.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceFlowField {
    views: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AppearanceFlowField {
    pub fn new(views: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let n = views * views * height * width * 2;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "flow {views}x{views}x{height}x{width}x2 needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("flow contains non-finite values".into()));
        }
        Ok(Self {
            views,
            height,
            width,
            data,
        })
    }

    pub fn zeros(views: usize, height: usize, width: usize) -> Self {
        Self {
            views,
            height,
            width,
            data: vec![0.0; views * views * height * width * 2],
        }
    }

    /// Flow whose value at view offset `Δu` and pixel `(y, x)` is `f(Δu, y, x)`.
    pub fn from_fn(
        views: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(ViewOffset, usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(views * views * height * width * 2);
        for o in ViewOffset::grid(views, center_index(views)) {
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = f(o, y, x);
                    data.push(dx);
                    data.push(dy);
                }
            }
        }
        Self::new(views, height, width, data)
    }

    /// Same vector `(dx, dy)` everywhere.
    pub fn constant(views: usize, height: usize, width: usize, dx: f64, dy: f64) -> Result<Self> {
        Self::from_fn(views, height, width, |_, _, _| (dx, dy))
    }

    pub fn from_stack(stack: &Tensor) -> Result<Self> {
        let (views, h, w, c) = stack_dims(stack)?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "flow stack needs 2 components, got {c}"
            )));
        }
        Self::new(views, h, w, stack.data().to_vec())
    }

    pub fn to_stack(&self) -> Tensor {
        Tensor::new(
            vec![self.views * self.views, self.height, self.width, 2],
            self.data.clone(),
        )
        .expect("flow extents are consistent")
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `[H, W, 2]` flow of view `(v, u)`.
    pub fn view(&self, v: usize, u: usize) -> Result<Tensor> {
        if v >= self.views || u >= self.views {
            return Err(Error::Argument(format!(
                "view ({v}, {u}) outside a {0}x{0} grid",
                self.views
            )));
        }
        let m = self.height * self.width * 2;
        let s = v * self.views + u;
        Ok(Tensor::new(
            vec![self.height, self.width, 2],
            self.data[s * m..(s + 1) * m].to_vec(),
        )?)
    }

    pub fn to_packed(&self) -> PackedField {
        PackedField::new(
            self.views,
            self.views,
            self.height,
            self.width,
            2,
            self.data.clone(),
        )
        .expect("flow extents are consistent")
    }

    pub fn from_packed(p: PackedField) -> Result<Self> {
        if p.views_v != p.views_h || p.channels != 2 {
            return Err(Error::Shape(format!(
                "flow files need a square grid and 2 channels, got {}x{} with {}",
                p.views_v, p.views_h, p.channels
            )));
        }
        Self::new(p.views_v, p.height, p.width, p.data)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.views,
            self.height,
            self.width,
            self.data.iter().map(|v| v * k).collect(),
        )
    }
}

fn eval<F>(inputs: Vec<Tensor>, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &[diffcore::Var]) -> Result<diffcore::Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .into_iter()
        .map(|t| tape.constant(t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Shifted light field: view `Δu` is `center` translated by `-eta * Δu`,
/// bilinear with edge clamping. `views` must be odd so a true center exists.
pub fn shift_views(center: &Tensor, views: usize, eta: ShiftScale) -> Result<LightField> {
    if views % 2 == 0 {
        return Err(Error::Argument(format!(
            "shift_views needs an odd angular extent, got {views}"
        )));
    }
    LightField::from_stack(&shift_stack(center, views, eta.value())?)
}

/// Shifted view stack for any angular extent, centered at [`center_index`].
/// Samples are not range-checked.
pub fn shift_stack(center: &Tensor, views: usize, eta: f64) -> Result<Tensor> {
    image_dims(center)?;
    eval(vec![center.clone()], |t, v| {
        graph::shift(t, v[0], views, eta)
    })
}

/// Splits raw `[H, W, 2U²]` network output into per-view flows.
pub fn decode_flow(raw: &Tensor, views: usize) -> Result<AppearanceFlowField> {
    let stack = eval(vec![raw.clone()], |t, v| graph::decode_flow(t, v[0], views))?;
    AppearanceFlowField::from_stack(&stack)
}

/// Packs a flow field into `[H, W, 2U²]` network channels.
pub fn encode_flow(flow: &AppearanceFlowField) -> Tensor {
    let (u, h, w) = (flow.views, flow.height, flow.width);
    let inverse = graph::to_channels_index(u, h, w, 2);
    let data = inverse.iter().map(|&i| flow.data[i]).collect();
    Tensor::new(vec![h, w, 2 * u * u], data).expect("flow extents are consistent")
}

/// Warps every view of `shifted` by its flow.
pub fn warp(shifted: &LightField, flow: &AppearanceFlowField) -> Result<LightField> {
    let stack = warp_stack(&shifted.to_stack(), flow)?;
    LightField::from_stack_clamped(&stack)
}

/// Warp on a raw `[U², H, W, C]` stack.
pub fn warp_stack(shifted: &Tensor, flow: &AppearanceFlowField) -> Result<Tensor> {
    eval(vec![shifted.clone(), flow.to_stack()], |t, v| {
        graph::warp(t, v[0], v[1])
    })
}

/// Resizes the flow by `factor` and scales its vectors to match.
pub fn upsample_flow(flow: &AppearanceFlowField, factor: usize) -> Result<AppearanceFlowField> {
    let stack = eval(vec![flow.to_stack()], |t, v| {
        graph::upsample_flow(t, v[0], factor)
    })?;
    AppearanceFlowField::from_stack(&stack)
}

/// `[U², H, W, C]` stack to `[H, W, U² C]` network channels.
pub fn views_to_channels(stack: &Tensor) -> Result<Tensor> {
    eval(vec![stack.clone()], |t, v| {
        graph::views_to_channels(t, v[0])
    })
}

/// `[H, W, U² C]` network channels to a `[U², H, W, C]` stack.
pub fn channels_to_views(chans: &Tensor, views: usize) -> Result<Tensor> {
    eval(vec![chans.clone()], |t, v| {
        graph::channels_to_views(t, v[0], views)
    })
}
