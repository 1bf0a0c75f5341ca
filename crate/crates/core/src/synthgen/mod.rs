//! Layered synthetic scenes with known disparity.
//!
//! A scene is a front-to-back list of planar layers, each with an analytic
//! coverage mask, a band-limited procedural texture and a constant disparity
//! `d`. View `Δu` sees layer content at `p - d * Δu`, so every sample is an
//! exact evaluation of the scene and no resampling error enters the ground
//! truth.

mod dataset;

pub use dataset::{
    make_dataset, make_dataset_in_range, manifest_path, scene_seed, DatasetManifest, Scene,
    SceneEntry, DISPARITY_RANGE, MANIFEST_NAME,
};

use std::f64::consts::TAU;

use diffcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lfops::AppearanceFlowField;
use crate::lightfield::{center_index, LightField, ViewOffset};

/// One additive texture component, in scene (low-resolution pixel)
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Sinusoid {
        wavelength: f64,
        angle: f64,
        phase: f64,
        amplitude: f64,
    },
    /// Smooth checkerboard `a * sin(2πs/P) * sin(2πt/P)` on rotated axes.
    Checker {
        period: f64,
        angle: f64,
        amplitude: f64,
    },
    Blob {
        cx: f64,
        cy: f64,
        sigma: f64,
        amplitude: f64,
    },
    Gradient {
        gx: f64,
        gy: f64,
    },
}

impl Texture {
    fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Texture::Sinusoid {
                wavelength,
                angle,
                phase,
                amplitude,
            } => {
                let s = x * angle.cos() + y * angle.sin();
                amplitude * (TAU * s / wavelength + phase).sin()
            }
            Texture::Checker {
                period,
                angle,
                amplitude,
            } => {
                let s = x * angle.cos() + y * angle.sin();
                let t = -x * angle.sin() + y * angle.cos();
                amplitude * (TAU * s / period).sin() * (TAU * t / period).sin()
            }
            Texture::Blob {
                cx,
                cy,
                sigma,
                amplitude,
            } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                amplitude * (-r2 / (2.0 * sigma * sigma)).exp()
            }
            Texture::Gradient { gx, gy } => gx * x + gy * y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub base: f64,
    pub components: Vec<Texture>,
}

impl TextureSpec {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.base + self.components.iter().map(|c| c.eval(x, y)).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mask {
    Full,
    Disk { cx: f64, cy: f64, radius: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Mask {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Mask::Full => true,
            Mask::Disk { cx, cy, radius } => (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius,
            Mask::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Pixels of displacement per unit angular distance.
    pub disparity: f64,
    pub mask: Mask,
    pub texture: TextureSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Front layer first; the last layer must cover the whole frame.
    pub layers: Vec<Layer>,
    pub hw: [usize; 2],
    pub views: usize,
    pub seed: u64,
}

/// Rendered field with per-view ground truth.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub lf: LightField,
    /// Disparity of the visible surface, `[U², H, W]` in view-stack order.
    pub disparity: Vec<f64>,
    /// Visible layer index, `[U², H, W]`.
    pub layer_ids: Vec<u8>,
    /// Pixels whose surface point is seen, away from any layer edge, in both
    /// the view and the center view; `[U², H, W]`.
    pub valid: Vec<bool>,
}

/// Layer-edge margin, in pixels, used for the validity mask.
const EDGE_MARGIN: isize = 2;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.hw;
        if h == 0 || w == 0 || self.views == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        match self.layers.last() {
            None => return Err(Error::Config("a scene needs at least one layer".into())),
            Some(l) if l.mask != Mask::Full => {
                return Err(Error::Config(
                    "the back layer must cover the whole frame".into(),
                ))
            }
            _ => {}
        }
        let reach = (self.views / 2) as f64;
        let limit = h.min(w) as f64 / 4.0;
        for (i, l) in self.layers.iter().enumerate() {
            if !l.disparity.is_finite() || l.disparity.abs() * reach > limit {
                return Err(Error::Config(format!(
                    "layer {i}: |d| * floor(U/2) = {} exceeds {limit}",
                    l.disparity.abs() * reach
                )));
            }
        }
        if self.layers.len() > u8::MAX as usize {
            return Err(Error::Config("too many layers".into()));
        }
        Ok(())
    }

    /// Visible layer and its value at scene position `(x, y)` in view `o`.
    fn sample(&self, o: ViewOffset, x: f64, y: f64) -> (usize, f64) {
        for (i, l) in self.layers.iter().enumerate() {
            let px = x - l.disparity * o.dh as f64;
            let py = y - l.disparity * o.dv as f64;
            if l.mask.contains(px, py) {
                return (i, l.texture.eval(px, py));
            }
        }
        unreachable!("back layer covers every position")
    }

    /// Renders every view on a grid of `scale` pixels per scene pixel; pixel
    /// `X` samples scene coordinate `(X + 0.5) / scale - 0.5`.
    pub fn render(&self, scale: usize) -> Result<(LightField, Vec<u8>)> {
        self.validate()?;
        let [h, w] = self.hw;
        let (hh, ww) = (h * scale, w * scale);
        let s = scale as f64;
        let offsets = ViewOffset::grid(self.views, center_index(self.views));
        let mut data = Vec::with_capacity(offsets.len() * hh * ww);
        let mut ids = Vec::with_capacity(offsets.len() * hh * ww);
        for &o in &offsets {
            for y in 0..hh {
                let sy = (y as f64 + 0.5) / s - 0.5;
                for x in 0..ww {
                    let sx = (x as f64 + 0.5) / s - 0.5;
                    let (id, v) = self.sample(o, sx, sy);
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Config(format!(
                            "layer {id} texture reaches {v} outside [0, 1]"
                        )));
                    }
                    data.push(v);
                    ids.push(id as u8);
                }
            }
        }
        Ok((LightField::new(self.views, hh, ww, 1, data)?, ids))
    }
}

/// Renders a scene at its native resolution with ground truth.
pub fn generate(spec: &SceneSpec) -> Result<GroundTruth> {
    let (lf, ids) = spec.render(1)?;
    let [h, w] = spec.hw;
    let u = spec.views;
    let offsets = ViewOffset::grid(u, center_index(u));
    let (cv, cu) = center_index(u);
    let center = cv * u + cu;
    let plane = h * w;
    let disparity: Vec<f64> = ids
        .iter()
        .map(|&i| spec.layers[i as usize].disparity)
        .collect();
    let id_at = |s: usize, y: isize, x: isize| -> Option<u8> {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            None
        } else {
            Some(ids[s * plane + y as usize * w + x as usize])
        }
    };
    let uniform = |s: usize, y: isize, x: isize, id: u8| -> bool {
        (-EDGE_MARGIN..=EDGE_MARGIN).all(|dy| {
            (-EDGE_MARGIN..=EDGE_MARGIN).all(|dx| id_at(s, y + dy, x + dx).is_none_or(|v| v == id))
        })
    };
    let mut valid = vec![false; ids.len()];
    for (s, o) in offsets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let i = s * plane + y * w + x;
                let id = ids[i];
                let d = spec.layers[id as usize].disparity;
                let cx = (x as f64 - d * o.dh as f64).round() as isize;
                let cy = (y as f64 - d * o.dv as f64).round() as isize;
                valid[i] = uniform(s, y as isize, x as isize, id)
                    && id_at(center, cy, cx) == Some(id)
                    && uniform(center, cy, cx, id);
            }
        }
    }
    Ok(GroundTruth {
        lf,
        disparity,
        layer_ids: ids,
        valid,
    })
}

impl GroundTruth {
    /// Disparity of the visible surface in the center view, `[H, W]`.
    pub fn disparity_map(&self) -> Tensor {
        let (h, w) = (self.lf.height(), self.lf.width());
        let (cv, cu) = self.lf.center_index();
        let s = cv * self.lf.views() + cu;
        Tensor::new(
            vec![h, w],
            self.disparity[s * h * w..(s + 1) * h * w].to_vec(),
        )
        .expect("extents are consistent")
    }

    /// Flow `(eta - d) * Δu` that warps `shift_views(center, U, eta)` onto
    /// this field, with `d` the visible disparity at each output pixel.
    pub fn ideal_flow(&self, eta: f64) -> AppearanceFlowField {
        let (u, h, w) = (self.lf.views(), self.lf.height(), self.lf.width());
        let (cv, cu) = self.lf.center_index();
        AppearanceFlowField::from_fn(u, h, w, |o, y, x| {
            let s = (o.dv + cv as i32) as usize * u + (o.dh + cu as i32) as usize;
            let d = self.disparity[(s * h + y) * w + x];
            ((eta - d) * o.dh as f64, (eta - d) * o.dv as f64)
        })
        .expect("finite flow")
    }

    pub fn valid_view(&self, v: usize, u: usize) -> &[bool] {
        let n = self.lf.height() * self.lf.width();
        let s = v * self.lf.views() + u;
        &self.valid[s * n..(s + 1) * n]
    }
}

/// Draws a random layered scene: a dark full-frame back layer and one or two
/// brighter foreground shapes. Foreground disparity comes from the upper
/// quarter of `range` and background disparity from the lower quarter, so
/// brightness and depth are correlated the way a single-image model can
/// exploit.
pub fn random_scene(hw: [usize; 2], views: usize, seed: u64, range: (f64, f64)) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = range;
    let span = hi - lo;
    let [h, w] = hw;
    let (hf, wf) = (h as f64, w as f64);
    let front_lo = lo + 0.75 * span;
    let back_hi = lo + 0.25 * span;

    let texture = |rng: &mut ChaCha8Rng, base: f64| -> TextureSpec {
        let mut components = Vec::new();
        let n = rng.gen_range(2..=3);
        for _ in 0..n {
            let amplitude = rng.gen_range(0.03..0.05);
            components.push(if rng.gen_bool(0.7) {
                Texture::Sinusoid {
                    wavelength: rng.gen_range(16.0..32.0),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    phase: rng.gen_range(0.0..TAU),
                    amplitude,
                }
            } else {
                Texture::Checker {
                    period: rng.gen_range(24.0..40.0),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    amplitude,
                }
            });
        }
        components.push(Texture::Blob {
            cx: rng.gen_range(0.0..wf),
            cy: rng.gen_range(0.0..hf),
            sigma: rng.gen_range(5.0..10.0),
            amplitude: rng.gen_range(-0.04..0.04),
        });
        TextureSpec { base, components }
    };

    let n_front = rng.gen_range(1..=2);
    let mut fronts: Vec<Layer> = (0..n_front)
        .map(|_| {
            let disparity = rng.gen_range(front_lo..=hi);
            let mask = if rng.gen_bool(0.5) {
                Mask::Disk {
                    cx: rng.gen_range(0.3 * wf..0.7 * wf),
                    cy: rng.gen_range(0.3 * hf..0.7 * hf),
                    radius: rng.gen_range(0.12 * hf..0.25 * hf),
                }
            } else {
                let (cw, ch) = (
                    rng.gen_range(0.2 * wf..0.45 * wf),
                    rng.gen_range(0.2 * hf..0.45 * hf),
                );
                let x0 = rng.gen_range(0.1 * wf..0.9 * wf - cw);
                let y0 = rng.gen_range(0.1 * hf..0.9 * hf - ch);
                Mask::Rect {
                    x0,
                    y0,
                    x1: x0 + cw,
                    y1: y0 + ch,
                }
            };
            let base = rng.gen_range(0.65..0.75);
            Layer {
                disparity,
                mask,
                texture: texture(&mut rng, base),
            }
        })
        .collect();
    fronts.sort_by(|a, b| b.disparity.total_cmp(&a.disparity));
    let back_base = rng.gen_range(0.2..0.3);
    let back = Layer {
        disparity: rng.gen_range(lo..=back_hi),
        mask: Mask::Full,
        texture: texture(&mut rng, back_base),
    };
    fronts.push(back);
    SceneSpec {
        layers: fronts,
        hw,
        views,
        seed,
    }
}

/// 2x2 box filter of every view.
pub fn box_downsample(lf: &LightField) -> Result<LightField> {
    let (h, w, c) = (lf.height() / 2, lf.width() / 2, lf.channels());
    if lf.height() % 2 != 0 || lf.width() % 2 != 0 {
        return Err(Error::Shape("box filter needs even extents".into()));
    }
    let src_w = lf.width();
    let mut data = Vec::with_capacity(lf.view_count() * h * w * c);
    for v in 0..lf.views() {
        for u in 0..lf.views() {
            let s = lf.view_slice(v, u);
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        let at = |yy: usize, xx: usize| s[(yy * src_w + xx) * c + k];
                        let sum = at(2 * y, 2 * x)
                            + at(2 * y, 2 * x + 1)
                            + at(2 * y + 1, 2 * x)
                            + at(2 * y + 1, 2 * x + 1);
                        data.push(sum / 4.0);
                    }
                }
            }
        }
    }
    LightField::new(lf.views(), h, w, c, data)
}
