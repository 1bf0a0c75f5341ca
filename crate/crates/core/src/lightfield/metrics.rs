//! PSNR and SSIM for images and light fields.
//!
//! Field-level scores average per-view scores over every view except the
//! center one, which is the network input and would inflate the numbers.

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::LightField;
use crate::error::{Error, Result};

/// Reported PSNR when the mean squared error is below `1e-10`.
pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn images(a: &Tensor, b: &Tensor) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }

    pub fn fields(pred: &LightField, truth: &LightField) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr_field(pred, truth)?,
            ssim: ssim_field(pred, truth)?,
        })
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::Argument("metric inputs are empty".into()));
    }
    Ok(())
}

fn psnr_slices(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio for unit peak, in dB.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    Ok(psnr_slices(a.data(), b.data()))
}

fn check_fields(a: &LightField, b: &LightField) -> Result<Vec<(usize, usize)>> {
    if !a.same_shape(b) {
        return Err(Error::Argument(format!(
            "light fields differ in shape: {}x{}x{}x{}x{} vs {}x{}x{}x{}x{}",
            a.views(),
            a.views(),
            a.height(),
            a.width(),
            a.channels(),
            b.views(),
            b.views(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    let center = a.center_index();
    let views: Vec<_> = (0..a.views())
        .flat_map(|v| (0..a.views()).map(move |u| (v, u)))
        .filter(|&vu| vu != center)
        .collect();
    if views.is_empty() {
        return Err(Error::Argument(
            "a single-view field has no non-center views to score".into(),
        ));
    }
    Ok(views)
}

/// Mean per-view PSNR over the non-center views.
pub fn psnr_field(a: &LightField, b: &LightField) -> Result<f64> {
    let views = check_fields(a, b)?;
    let total: f64 = views
        .iter()
        .map(|&(v, u)| psnr_slices(a.view_slice(v, u), b.view_slice(v, u)))
        .sum();
    Ok(total / views.len() as f64)
}

/// Mean per-view SSIM over the non-center views.
pub fn ssim_field(a: &LightField, b: &LightField) -> Result<f64> {
    let views = check_fields(a, b)?;
    let mut total = 0.0;
    for &(v, u) in &views {
        total += ssim(&a.view(v, u)?, &b.view(v, u)?)?;
    }
    Ok(total / views.len() as f64)
}

fn gaussian_window(taps: usize) -> Vec<f64> {
    let mid = (taps / 2) as f64;
    let w: Vec<f64> = (0..taps)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| win[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| win[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM with an 11-tap Gaussian window (sigma 1.5), unit
/// dynamic range and `K1 = 0.01`, `K2 = 0.03`, averaged over channels.
///
/// Images smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, c) = super::image_dims(a)?;
    let mut taps = SSIM_TAPS.min(h).min(w);
    if taps % 2 == 0 {
        taps -= 1;
    }
    let win = gaussian_window(taps);
    let plane = |t: &Tensor, ch: usize| -> Vec<f64> {
        t.data().iter().skip(ch).step_by(c).copied().collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let x = plane(a, ch);
        let y = plane(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &win);
        let (my, ..) = filter_valid(&y, h, w, &win);
        let (sxx, ..) = filter_valid(&xx, h, w, &win);
        let (syy, ..) = filter_valid(&yy, h, w, &win);
        let (sxy, ..) = filter_valid(&xy, h, w, &win);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cxy = sxy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
            acc += num / den;
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}
