//! The 4D light field `L(x, u)` on a square angular grid.
//!
//! Views are stored `[v, u, y, x, c]` row-major: `v` indexes angular rows
//! (vertical), `u` angular columns (horizontal). The same ordering, flattened
//! to `s = v * U + u`, is the "view stack" layout `[U*U, H, W, C]` used by the
//! differentiable operators.

mod io;
mod metrics;

pub use io::{
    load, luminance, quantize, read_png, save, view_file_name, write_png, DType, Format,
    PackedField,
};
pub use metrics::{psnr, psnr_field, ssim, ssim_field, Metrics, PSNR_CAP_DB};

use diffcore::{Tape, Tensor};

use crate::error::{Error, Result};

/// Signed angular distance `(dv, dh)` of a view from the center view.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ViewOffset {
    pub dv: i32,
    pub dh: i32,
}

impl ViewOffset {
    /// Offsets for every view of a `views x views` grid about `center`, in
    /// view-stack order.
    pub fn grid(views: usize, center: (usize, usize)) -> Vec<ViewOffset> {
        let mut out = Vec::with_capacity(views * views);
        for v in 0..views {
            for u in 0..views {
                out.push(ViewOffset {
                    dv: v as i32 - center.0 as i32,
                    dh: u as i32 - center.1 as i32,
                });
            }
        }
        out
    }
}

/// Index of the center view: `(ceil(U/2) - 1, ceil(U/2) - 1)`.
pub fn center_index(views: usize) -> (usize, usize) {
    let c = views.div_ceil(2).saturating_sub(1);
    (c, c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    views: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LightField {
    pub fn new(
        views: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if views == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "light field extents must be positive, got U={views} H={height} W={width} C={channels}"
            )));
        }
        let n = views * views * height * width * channels;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "light field {views}x{views}x{height}x{width}x{channels} needs {n} samples, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!(
                "light field samples must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self {
            views,
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a field from a `[U*U, H, W, C]` view stack.
    pub fn from_stack(stack: &Tensor) -> Result<Self> {
        let (views, h, w, c) = stack_dims(stack)?;
        Self::new(views, h, w, c, stack.data().to_vec())
    }

    /// Like [`from_stack`](Self::from_stack), clamping samples into `[0, 1]`.
    pub fn from_stack_clamped(stack: &Tensor) -> Result<Self> {
        let (views, h, w, c) = stack_dims(stack)?;
        let data = stack.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(views, h, w, c, data)
    }

    /// Field whose views are all `image` (`[H, W, C]`).
    pub fn constant_views(views: usize, image: &Tensor) -> Result<Self> {
        let s = image_dims(image)?;
        Self::new(views, s.0, s.1, s.2, image.data().repeat(views * views))
    }

    pub fn to_stack(&self) -> Tensor {
        Tensor::new(
            vec![self.view_count(), self.height, self.width, self.channels],
            self.data.clone(),
        )
        .expect("light field extents are consistent")
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn view_count(&self) -> usize {
        self.views * self.views
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn center_index(&self) -> (usize, usize) {
        center_index(self.views)
    }

    pub fn offsets(&self) -> Vec<ViewOffset> {
        ViewOffset::grid(self.views, self.center_index())
    }

    fn view_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn view_slice(&self, v: usize, u: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[(v * self.views + u) * n..][..n]
    }

    /// View `(v, u)` as an `[H, W, C]` image.
    pub fn view(&self, v: usize, u: usize) -> Result<Tensor> {
        if v >= self.views || u >= self.views {
            return Err(Error::Argument(format!(
                "view ({v}, {u}) outside a {0}x{0} grid",
                self.views
            )));
        }
        Ok(Tensor::new(
            vec![self.height, self.width, self.channels],
            self.view_slice(v, u).to_vec(),
        )?)
    }

    pub fn center_view(&self) -> Tensor {
        let (c, _) = self.center_index();
        self.view(c, c).expect("center index is in range")
    }

    pub fn same_shape(&self, other: &LightField) -> bool {
        (self.views, self.height, self.width, self.channels)
            == (other.views, other.height, other.width, other.channels)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.views,
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Spatial crop `[y0, y0 + h) x [x0, x0 + w)` of every view.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Argument(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(self.view_count() * h * w * c);
        for s in 0..self.view_count() {
            let view = &self.data[s * self.view_len()..][..self.view_len()];
            for y in y0..y0 + h {
                let row = (y * self.width + x0) * c;
                data.extend_from_slice(&view[row..row + w * c]);
            }
        }
        Self::new(self.views, h, w, c, data)
    }

    /// Horizontal epipolar-plane image: row `row` of views `(fixed_v, 0..U)`,
    /// stacked into a `[U, W, C]` image.
    pub fn epi(&self, row: usize, fixed_v: usize) -> Result<Tensor> {
        if row >= self.height || fixed_v >= self.views {
            return Err(Error::Argument(format!(
                "EPI row {row} / view row {fixed_v} outside {}x{} field with {} rows",
                self.views, self.views, self.height
            )));
        }
        let wc = self.width * self.channels;
        let mut data = Vec::with_capacity(self.views * wc);
        for u in 0..self.views {
            data.extend_from_slice(&self.view_slice(fixed_v, u)[row * wc..][..wc]);
        }
        Ok(Tensor::new(
            vec![self.views, self.width, self.channels],
            data,
        )?)
    }

    /// Per-pixel mean over all views.
    pub fn mean_view(&self) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(self.to_stack()).expect("finite samples");
        let m = tape.view_mean(x).expect("at least one view");
        tape.value(m).clone()
    }

    /// Shift-and-average refocusing: view `Δu` is sampled at
    /// `x + slope * Δu` (bilinear, edge-clamped) and all views are averaged.
    /// `slope = 0` is the plain view mean.
    pub fn refocus(&self, slope: f64) -> Result<Tensor> {
        if !slope.is_finite() {
            return Err(Error::Argument(format!(
                "refocus slope {slope} is not finite"
            )));
        }
        let mut tape = Tape::new();
        let x = tape.constant(self.to_stack())?;
        let coords = crate::lfops::shift_grid(
            self.views,
            self.center_index(),
            self.height,
            self.width,
            -slope,
        );
        let c = tape.constant(coords)?;
        let shifted = tape.grid_sample(x, c)?;
        let m = tape.view_mean(shifted)?;
        Ok(tape.value(m).clone())
    }
}

pub(crate) fn stack_dims(stack: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = stack.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "expected a [U*U, H, W, C] stack, got {s:?}"
        )));
    }
    let views = (s[0] as f64).sqrt().round() as usize;
    if views * views != s[0] {
        return Err(Error::Shape(format!(
            "{} views do not form a square grid",
            s[0]
        )));
    }
    Ok((views, s[1], s[2], s[3]))
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!(
            "expected an [H, W, C] image, got {s:?}"
        ))),
    }
}
