//! Color-wheel rendering of flow fields: hue encodes direction, saturation
//! encodes magnitude, and zero flow is white.

use diffcore::Tensor;

use super::AppearanceFlowField;
use crate::error::{Error, Result};

fn hsv_to_rgb(hue_deg: f64, sat: f64) -> [f64; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = sat;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    [r + m, g + m, b + m]
}

/// Renders an `[H, W, 2]` flow as an `[H, W, 3]` RGB image. Magnitudes at or
/// above `max_mag` are fully saturated.
pub fn flow_color(flow: &Tensor, max_mag: f64) -> Result<Tensor> {
    let (h, w) = match *flow.shape() {
        [h, w, 2] => (h, w),
        ref s => {
            return Err(Error::Shape(format!(
                "flow image must be [H, W, 2], got {s:?}"
            )))
        }
    };
    let scale = if max_mag > 0.0 { max_mag } else { 1.0 };
    let mut data = Vec::with_capacity(h * w * 3);
    for p in flow.data().chunks_exact(2) {
        let (dx, dy) = (p[0], p[1]);
        let sat = ((dx * dx + dy * dy).sqrt() / scale).min(1.0);
        let hue = dy.atan2(dx).to_degrees();
        data.extend_from_slice(&hsv_to_rgb(hue, sat));
    }
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

/// All views laid out on their angular grid as one `[U*H, U*W, 3]` image,
/// sharing one magnitude scale (the largest vector unless `max_mag` is set).
pub fn flow_mosaic(flow: &AppearanceFlowField, max_mag: Option<f64>) -> Result<Tensor> {
    let (u, h, w) = (flow.views(), flow.height(), flow.width());
    let peak = max_mag.unwrap_or_else(|| {
        flow.data()
            .chunks_exact(2)
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max)
    });
    let (mh, mw) = (u * h, u * w);
    let mut out = vec![0.0; mh * mw * 3];
    for v in 0..u {
        for uu in 0..u {
            let img = flow_color(&flow.view(v, uu)?, peak)?;
            for y in 0..h {
                let dst = ((v * h + y) * mw + uu * w) * 3;
                out[dst..dst + w * 3].copy_from_slice(&img.data()[y * w * 3..(y + 1) * w * 3]);
            }
        }
    }
    Ok(Tensor::new(vec![mh, mw, 3], out)?)
}
