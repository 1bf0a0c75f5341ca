//! Differentiable versions of the geometric operators, recorded on a
//! [`Tape`]. All light fields here are view stacks `[U*U, H, W, C]` in
//! row-major view order; flows are stacks `[U*U, H, W, 2]` of `(dx, dy)`.

use diffcore::{Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::lightfield::{center_index, ViewOffset};

/// Absolute sampling positions that translate view `Δu` by `-eta * Δu`:
/// position `(x - eta * dh, y - eta * dv)` for every pixel of every view.
pub fn shift_grid(views: usize, center: (usize, usize), h: usize, w: usize, eta: f64) -> Tensor {
    let offsets = ViewOffset::grid(views, center);
    let mut data = Vec::with_capacity(offsets.len() * h * w * 2);
    for o in &offsets {
        let (sx, sy) = (eta * o.dh as f64, eta * o.dv as f64);
        for y in 0..h {
            for x in 0..w {
                data.push(x as f64 - sx);
                data.push(y as f64 - sy);
            }
        }
    }
    Tensor::new(vec![offsets.len(), h, w, 2], data).expect("grid extents are consistent")
}

/// The identity sampling grid `[n, h, w, 2]`.
pub fn identity_grid(n: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for y in 0..h {
            for x in 0..w {
                data.push(x as f64);
                data.push(y as f64);
            }
        }
    }
    Tensor::new(vec![n, h, w, 2], data).expect("grid extents are consistent")
}

fn image_shape(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(v) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what} must be [H, W, C], got {s:?}"))),
    }
}

fn stack_shape(tape: &Tape, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(v) {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::Shape(format!(
            "{what} must be [N, H, W, C], got {s:?}"
        ))),
    }
}

/// Repeats an `[H, W, C]` image into an `[n, H, W, C]` stack.
pub fn broadcast_views(tape: &mut Tape, image: Var, n: usize) -> Result<Var> {
    let (h, w, c) = image_shape(tape, image, "broadcast source")?;
    let m = h * w * c;
    let index = (0..n).flat_map(|_| 0..m).collect();
    Ok(tape.gather(image, index, &[n, h, w, c])?)
}

/// Shifted light field `L_s(x, u) = center(x - eta * Δu)` on a `views x
/// views` grid around [`center_index`]. Any `views >= 1` is accepted here;
/// the odd-grid requirement lives in the value-level wrapper.
pub fn shift(tape: &mut Tape, center: Var, views: usize, eta: f64) -> Result<Var> {
    if !eta.is_finite() {
        return Err(Error::Argument(format!("shift scale {eta} is not finite")));
    }
    let (h, w, _) = image_shape(tape, center, "shift input")?;
    let stack = broadcast_views(tape, center, views * views)?;
    let grid = tape.constant(shift_grid(views, center_index(views), h, w, eta))?;
    Ok(tape.grid_sample(stack, grid)?)
}

/// Flat gather index taking `[H, W, 2U²]` network channels to a `[U², H, W, 2]`
/// flow stack. View `(v, u)` reads channels `2s` and `2s + 1` with the
/// column-major index `s = v + u * U`.
pub fn decode_index(views: usize, h: usize, w: usize) -> Vec<usize> {
    let ch = 2 * views * views;
    let mut index = Vec::with_capacity(views * views * h * w * 2);
    for v in 0..views {
        for u in 0..views {
            let s = v + u * views;
            for p in 0..h * w {
                index.push(p * ch + 2 * s);
                index.push(p * ch + 2 * s + 1);
            }
        }
    }
    index
}

/// Flat gather index taking a `[U², H, W, C]` stack to `[H, W, U² C]` network
/// channels in column-major view order.
pub fn to_channels_index(views: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let n = views * views;
    let mut index = Vec::with_capacity(n * h * w * c);
    for p in 0..h * w {
        for s_col in 0..n {
            let (v, u) = (s_col % views, s_col / views);
            let s = v * views + u;
            for k in 0..c {
                index.push((s * h * w + p) * c + k);
            }
        }
    }
    index
}

/// Inverse of [`to_channels_index`].
pub fn from_channels_index(views: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    let n = views * views;
    let mut index = Vec::with_capacity(n * h * w * c);
    for v in 0..views {
        for u in 0..views {
            let s_col = v + u * views;
            for p in 0..h * w {
                for k in 0..c {
                    index.push((p * n + s_col) * c + k);
                }
            }
        }
    }
    index
}

/// Raw `[H, W, 2U²]` network output to a `[U², H, W, 2]` flow stack.
pub fn decode_flow(tape: &mut Tape, raw: Var, views: usize) -> Result<Var> {
    let (h, w, ch) = image_shape(tape, raw, "raw flow")?;
    if ch != 2 * views * views {
        return Err(Error::Shape(format!(
            "raw flow has {ch} channels, a {views}x{views} grid needs {}",
            2 * views * views
        )));
    }
    Ok(tape.gather(raw, decode_index(views, h, w), &[views * views, h, w, 2])?)
}

/// `[U², H, W, C]` stack to `[H, W, U² C]` network channels.
pub fn views_to_channels(tape: &mut Tape, stack: Var) -> Result<Var> {
    let (n, h, w, c) = stack_shape(tape, stack, "view stack")?;
    let views = square_root(n)?;
    Ok(tape.gather(stack, to_channels_index(views, h, w, c), &[h, w, n * c])?)
}

/// `[H, W, U² C]` network channels to a `[U², H, W, C]` stack.
pub fn channels_to_views(tape: &mut Tape, chans: Var, views: usize) -> Result<Var> {
    let (h, w, ch) = image_shape(tape, chans, "channel tensor")?;
    let n = views * views;
    if ch % n != 0 {
        return Err(Error::Shape(format!(
            "{ch} channels do not split into {n} views"
        )));
    }
    let c = ch / n;
    Ok(tape.gather(chans, from_channels_index(views, h, w, c), &[n, h, w, c])?)
}

/// Backward warp: each output pixel samples its view at `x + flow(x)`.
pub fn warp(tape: &mut Tape, shifted: Var, flow: Var) -> Result<Var> {
    let (n, h, w, _) = stack_shape(tape, shifted, "warp source")?;
    let fs = stack_shape(tape, flow, "flow")?;
    if fs != (n, h, w, 2) {
        return Err(Error::Shape(format!(
            "flow {:?} does not match source [{n}, {h}, {w}, _]",
            tape.shape(flow)
        )));
    }
    let id = tape.constant(identity_grid(n, h, w))?;
    let coords = tape.add(id, flow)?;
    Ok(tape.grid_sample(shifted, coords)?)
}

/// Bilinear (align-corners) resize of a flow tensor with vectors rescaled
/// into pixels of the new grid.
pub fn upsample_flow(tape: &mut Tape, flow: Var, factor: usize) -> Result<Var> {
    if factor < 1 {
        return Err(Error::Argument("upsample factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(flow);
    }
    let up = tape.bilinear_resize(flow, factor)?;
    Ok(tape.scale(up, factor as f64)?)
}

pub(crate) fn square_root(n: usize) -> Result<usize> {
    let r = (n as f64).sqrt().round() as usize;
    if r * r != n || n == 0 {
        return Err(Error::Shape(format!("{n} views do not form a square grid")));
    }
    Ok(r)
}
