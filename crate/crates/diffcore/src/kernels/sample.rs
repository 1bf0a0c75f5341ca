//! Bilinear sampling kernels over `[n, h, w, c]` image stacks.

/// One bilinear lookup: four source pixels, fractional weights, and whether
/// the position derivative passes through the edge clamp on each axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    pass_x: bool,
    pass_y: bool,
}

#[inline]
fn axis(p: f64, extent: usize) -> (usize, usize, f64, bool) {
    let hi = (extent - 1) as f64;
    let pass = (0.0..=hi).contains(&p);
    let pc = p.clamp(0.0, hi);
    let i0 = (pc.floor() as usize).min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, pc - i0 as f64, pass)
}

#[inline]
fn tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let (x0, x1, fx, pass_x) = axis(x, w);
    let (y0, y1, fy, pass_y) = axis(y, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        pass_x,
        pass_y,
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GridDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Clamp-to-edge bilinear sampling at absolute pixel positions `(x, y)`.
pub(crate) fn grid_sample(input: &[f64], coords: &[f64], d: GridDims) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.oh * d.ow * d.c];
    let img = d.h * d.w * d.c;
    for b in 0..d.n {
        let src = &input[b * img..][..img];
        for p in 0..d.oh * d.ow {
            let q = b * d.oh * d.ow + p;
            let t = tap(coords[2 * q], coords[2 * q + 1], d.h, d.w);
            let o = &mut out[q * d.c..][..d.c];
            let i00 = (t.y0 * d.w + t.x0) * d.c;
            let i01 = (t.y0 * d.w + t.x1) * d.c;
            let i10 = (t.y1 * d.w + t.x0) * d.c;
            let i11 = (t.y1 * d.w + t.x1) * d.c;
            for ch in 0..d.c {
                let top = (1.0 - t.fx) * src[i00 + ch] + t.fx * src[i01 + ch];
                let bot = (1.0 - t.fx) * src[i10 + ch] + t.fx * src[i11 + ch];
                o[ch] = (1.0 - t.fy) * top + t.fy * bot;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`grid_sample`]; returns `(d_input, d_coords)`.
pub(crate) fn grid_sample_backward(
    input: &[f64],
    coords: &[f64],
    grad: &[f64],
    d: GridDims,
) -> (Vec<f64>, Vec<f64>) {
    let img = d.h * d.w * d.c;
    let mut gin = vec![0.0; input.len()];
    let mut gco = vec![0.0; coords.len()];
    for b in 0..d.n {
        let src = &input[b * img..][..img];
        let gsrc = &mut gin[b * img..][..img];
        for p in 0..d.oh * d.ow {
            let q = b * d.oh * d.ow + p;
            let t = tap(coords[2 * q], coords[2 * q + 1], d.h, d.w);
            let g = &grad[q * d.c..][..d.c];
            let i00 = (t.y0 * d.w + t.x0) * d.c;
            let i01 = (t.y0 * d.w + t.x1) * d.c;
            let i10 = (t.y1 * d.w + t.x0) * d.c;
            let i11 = (t.y1 * d.w + t.x1) * d.c;
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..d.c {
                let go = g[ch];
                gsrc[i00 + ch] += go * (1.0 - t.fx) * (1.0 - t.fy);
                gsrc[i01 + ch] += go * t.fx * (1.0 - t.fy);
                gsrc[i10 + ch] += go * (1.0 - t.fx) * t.fy;
                gsrc[i11 + ch] += go * t.fx * t.fy;
                let (v00, v01, v10, v11) =
                    (src[i00 + ch], src[i01 + ch], src[i10 + ch], src[i11 + ch]);
                gx += go * ((1.0 - t.fy) * (v01 - v00) + t.fy * (v11 - v10));
                gy += go * ((1.0 - t.fx) * (v10 - v00) + t.fx * (v11 - v01));
            }
            if t.pass_x {
                gco[2 * q] = gx;
            }
            if t.pass_y {
                gco[2 * q + 1] = gy;
            }
        }
    }
    (gin, gco)
}

/// Align-corners source position table for resizing `src` samples to `dst`.
pub(crate) fn resize_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let p = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let (i0, i1, t, _) = axis(p, src);
            (i0, i1, t)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ResizeDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn resize(input: &[f64], d: ResizeDims) -> Vec<f64> {
    let ty = resize_table(d.h, d.oh);
    let tx = resize_table(d.w, d.ow);
    let mut out = vec![0.0; d.n * d.oh * d.ow * d.c];
    let img = d.h * d.w * d.c;
    for b in 0..d.n {
        let src = &input[b * img..][..img];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((b * d.oh + oy) * d.ow + ox) * d.c;
                for ch in 0..d.c {
                    let v = |y: usize, x: usize| src[(y * d.w + x) * d.c + ch];
                    let top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x1);
                    let bot = (1.0 - fx) * v(y1, x0) + fx * v(y1, x1);
                    out[o + ch] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

pub(crate) fn resize_backward(grad: &[f64], d: ResizeDims) -> Vec<f64> {
    let ty = resize_table(d.h, d.oh);
    let tx = resize_table(d.w, d.ow);
    let img = d.h * d.w * d.c;
    let mut gin = vec![0.0; d.n * img];
    for b in 0..d.n {
        let gs = &mut gin[b * img..][..img];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let o = ((b * d.oh + oy) * d.ow + ox) * d.c;
                for ch in 0..d.c {
                    let g = grad[o + ch];
                    gs[(y0 * d.w + x0) * d.c + ch] += g * (1.0 - fx) * (1.0 - fy);
                    gs[(y0 * d.w + x1) * d.c + ch] += g * fx * (1.0 - fy);
                    gs[(y1 * d.w + x0) * d.c + ch] += g * (1.0 - fx) * fy;
                    gs[(y1 * d.w + x1) * d.c + ch] += g * fx * fy;
                }
            }
        }
    }
    gin
}
