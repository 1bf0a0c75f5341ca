//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! needs for the backward rule. Nodes are only ever appended, so the node list
//! is already in topological order and `backward` walks it in reverse.

use crate::error::{arg_err, shape_err, Error, Pass, Result};
use crate::kernels::conv::{col2im, gemm, im2col, row_tiles, ConvGeom};
use crate::kernels::sample::{self, GridDims, ResizeDims};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Abs(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    GridSample {
        input: Var,
        coords: Var,
        dims: GridDims,
    },
    Resize {
        input: Var,
        dims: ResizeDims,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    ViewMean(Var),
    ViewVar(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv2d_transpose",
            Op::GridSample { .. } => "grid_sample",
            Op::Resize { .. } => "bilinear_resize",
            Op::Concat { .. } => "concat_channels",
            Op::ViewMean(..) => "view_mean",
            Op::ViewVar(..) => "view_var",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not require gradients or is
    /// unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                pass: Pass::Forward,
                node: id,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Offset(a), a, |x| x + c)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs(a), a, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope.is_finite()) {
            return arg_err("leaky_relu", format!("slope must be positive, got {slope}"));
        }
        self.unary(Op::LeakyRelu(a, slope), a, |x| {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Degenerate {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = self.value(a).sum() / n as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Same-padded cross-correlation of an `[H, W, Cin]` image with a
    /// `[kh, kw, Cin, Cout]` kernel. Output is `[ceil(H/s), ceil(W/s), Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return arg_err(OP, "stride must be positive");
        }
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return shape_err(
                OP,
                format!("ranks: input {xs:?}, kernel {ks:?}, bias {bs:?}"),
            );
        }
        if ks[2] != xs[2] {
            return shape_err(
                OP,
                format!("input has {} channels, kernel expects {}", xs[2], ks[2]),
            );
        }
        if bs[0] != ks[3] {
            return shape_err(
                OP,
                format!("bias has {} entries for {} outputs", bs[0], ks[3]),
            );
        }
        let cout = ks[3];
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[0], ks[1], stride);
        let mut out = vec![0.0; geom.patches() * cout];
        let (x, k) = (self.value(input).data(), self.value(kernel).data());
        for rows in row_tiles(&geom) {
            let cols = im2col(x, &geom, rows.clone());
            let p = rows.len() * geom.ow;
            let dst = &mut out[rows.start * geom.ow * cout..][..p * cout];
            gemm(
                p,
                geom.patch_len(),
                cout,
                &cols,
                false,
                k,
                false,
                dst,
                false,
            );
        }
        add_bias(&mut out, self.value(bias).data());
        let t = Tensor::new(vec![geom.oh, geom.ow, cout], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Transpose convolution: the adjoint of a same-padded strided
    /// [`conv2d`](Self::conv2d) on an `[s*H, s*W, Cout]` image.
    ///
    /// `kernel` is `[kh, kw, Cout, Cin]`, i.e. the kernel of that forward
    /// convolution, so `<conv2d(x, K), y> == <x, conv2d_transpose(y, K)>`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d_transpose";
        if stride == 0 {
            return arg_err(OP, "stride must be positive");
        }
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
            return shape_err(
                OP,
                format!("ranks: input {xs:?}, kernel {ks:?}, bias {bs:?}"),
            );
        }
        if ks[3] != xs[2] {
            return shape_err(
                OP,
                format!("input has {} channels, kernel expects {}", xs[2], ks[3]),
            );
        }
        if bs[0] != ks[2] {
            return shape_err(
                OP,
                format!("bias has {} entries for {} outputs", bs[0], ks[2]),
            );
        }
        let (h, w, cin, cout) = (xs[0], xs[1], xs[2], ks[2]);
        let geom = ConvGeom::new(h * stride, w * stride, cout, ks[0], ks[1], stride);
        debug_assert_eq!((geom.oh, geom.ow), (h, w));
        let mut out = vec![0.0; geom.h * geom.w * cout];
        let (y, k) = (self.value(input).data(), self.value(kernel).data());
        for rows in row_tiles(&geom) {
            let p = rows.len() * geom.ow;
            let src = &y[rows.start * geom.ow * cin..][..p * cin];
            let mut cols = vec![0.0; p * geom.patch_len()];
            gemm(
                p,
                cin,
                geom.patch_len(),
                src,
                false,
                k,
                true,
                &mut cols,
                false,
            );
            col2im(&cols, &geom, rows, &mut out);
        }
        add_bias(&mut out, self.value(bias).data());
        let t = Tensor::new(vec![geom.h, geom.w, cout], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            t,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        )
    }

    /// Bilinear sampling of `input` at absolute pixel positions `(x, y)`
    /// stored in the last axis of `coords`. Positions outside the image are
    /// clamped to the border.
    ///
    /// Accepts `[H, W, C]` with `[H', W', 2]` coordinates, or a batch
    /// `[N, H, W, C]` with `[N, H', W', 2]`.
    pub fn grid_sample(&mut self, input: Var, coords: Var) -> Result<Var> {
        const OP: &str = "grid_sample";
        let (xs, cs) = (self.shape(input).to_vec(), self.shape(coords).to_vec());
        let (n, h, w, c, oh, ow) = match (xs.len(), cs.len()) {
            (3, 3) => (1, xs[0], xs[1], xs[2], cs[0], cs[1]),
            (4, 4) if xs[0] == cs[0] => (xs[0], xs[1], xs[2], xs[3], cs[1], cs[2]),
            _ => return shape_err(OP, format!("input {xs:?} with coords {cs:?}")),
        };
        if *cs.last().unwrap() != 2 {
            return shape_err(OP, format!("coords last axis must be 2, got {cs:?}"));
        }
        if h == 0 || w == 0 {
            return shape_err(OP, "empty source image");
        }
        let dims = GridDims { n, h, w, c, oh, ow };
        let out = sample::grid_sample(self.value(input).data(), self.value(coords).data(), dims);
        let mut shape = cs.clone();
        *shape.last_mut().unwrap() = c;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[input, coords]);
        self.push(
            t,
            Op::GridSample {
                input,
                coords,
                dims,
            },
            rg,
        )
    }

    /// Align-corners bilinear upsampling by an integer factor over the
    /// `[.., H, W, C]` trailing axes.
    pub fn bilinear_resize(&mut self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "bilinear_resize";
        if factor < 1 {
            return arg_err(OP, "factor must be at least 1");
        }
        let xs = self.shape(input).to_vec();
        if xs.len() < 3 {
            return shape_err(OP, format!("expected [.., H, W, C], got {xs:?}"));
        }
        let r = xs.len();
        let n = xs[..r - 3].iter().product();
        let (h, w, c) = (xs[r - 3], xs[r - 2], xs[r - 1]);
        let dims = ResizeDims {
            n,
            h,
            w,
            c,
            oh: h * factor,
            ow: w * factor,
        };
        let out = sample::resize(self.value(input).data(), dims);
        let mut shape = xs.clone();
        shape[r - 3] = dims.oh;
        shape[r - 2] = dims.ow;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[input]);
        self.push(t, Op::Resize { input, dims }, rg)
    }

    /// Stacks `b` after `a` along the last axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err(OP, format!("{sa:?} vs {sb:?}"));
        }
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Concat { a, b, ca, cb }, rg)
    }

    /// Mean over the leading (view) axis.
    pub fn view_mean(&mut self, input: Var) -> Result<Var> {
        let (n, rest) = self.split_views("view_mean", input, 1)?;
        let m: usize = rest.iter().product();
        let out = column_mean(self.value(input).data(), n, m);
        let t = Tensor::new(rest, out)?;
        let rg = self.rg(&[input]);
        self.push(t, Op::ViewMean(input), rg)
    }

    /// Unbiased (`N - 1`) variance over the leading (view) axis.
    pub fn view_var(&mut self, input: Var) -> Result<Var> {
        let (n, rest) = self.split_views("view_var", input, 2)?;
        let x = self.value(input).data();
        let m: usize = rest.iter().product();
        // deviations from the first view keep identical views exactly zero
        let mut sum = vec![0.0; m];
        let mut sq = vec![0.0; m];
        for s in 1..n {
            for j in 0..m {
                let d = x[s * m + j] - x[j];
                sum[j] += d;
                sq[j] += d * d;
            }
        }
        let mut out: Vec<f64> = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| (q - s * s / n as f64).max(0.0))
            .collect();
        out.iter_mut().for_each(|o| *o /= (n - 1) as f64);
        let t = Tensor::new(rest, out)?;
        let rg = self.rg(&[input]);
        self.push(t, Op::ViewVar(input), rg)
    }

    /// Per-element mean and unbiased variance over the leading axis.
    pub fn reduce_mean_var(&mut self, input: Var) -> Result<(Var, Var)> {
        self.split_views("reduce_mean_var", input, 2)?;
        Ok((self.view_mean(input)?, self.view_var(input)?))
    }

    fn split_views(&self, op: &'static str, v: Var, min: usize) -> Result<(usize, Vec<usize>)> {
        let s = self.shape(v);
        if s.is_empty() {
            return shape_err(op, "expected a leading view axis");
        }
        if s[0] < min {
            return Err(Error::Degenerate {
                op,
                detail: format!("{} views, need at least {min}", s[0]),
            });
        }
        Ok((s[0], s[1..].to_vec()))
    }

    /// `out[i] = input[index[i]]` over flat data, reshaped to `shape`.
    ///
    /// Covers permutations, slicing, and broadcasting by repetition.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(input).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return arg_err(
                "gather",
                format!("index {bad} out of range for {} values", x.len()),
            );
        }
        let data = index.iter().map(|&i| x[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[input]);
        self.push(t, Op::Gather { input, index }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        self.push(t, Op::Reshape(input), rg)
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).len() != 1 {
            return arg_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let contribs = self.vjp(id, &g)?;
            for (v, cg) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if cg.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                        pass: Pass::Backward,
                        node: id,
                    });
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(cg),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn vjp(&self, id: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let node = &self.nodes[id];
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Offset(a) => vec![(*a, g.to_vec())],
            Op::Abs(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            )],
            Op::Square(a) => vec![(
                *a,
                g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect(),
            )],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x >= 0.0 { *g } else { slope * g })
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let cout = self.shape(*kernel)[3];
                let r = geom.patch_len();
                let (x, k) = (val(*input), val(*kernel));
                let (want_k, want_x) = (wants(*kernel), wants(*input));
                let mut gk = vec![0.0; if want_k { r * cout } else { 0 }];
                let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
                for rows in row_tiles(geom) {
                    let p = rows.len() * geom.ow;
                    let gt = &g[rows.start * geom.ow * cout..][..p * cout];
                    if want_k {
                        let cols = im2col(x, geom, rows.clone());
                        gemm(r, p, cout, &cols, true, gt, false, &mut gk, true);
                    }
                    if want_x {
                        let mut gcols = vec![0.0; p * r];
                        gemm(p, cout, r, gt, false, k, true, &mut gcols, false);
                        col2im(&gcols, geom, rows, &mut gx);
                    }
                }
                let mut res = Vec::with_capacity(3);
                if want_k {
                    res.push((*kernel, gk));
                }
                if wants(*bias) {
                    res.push((*bias, channel_sums(g, cout)));
                }
                if want_x {
                    res.push((*input, gx));
                }
                res
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let cin = self.shape(*kernel)[3];
                let cout = geom.cin;
                let r = geom.patch_len();
                let (y, k) = (val(*input), val(*kernel));
                let (want_k, want_y) = (wants(*kernel), wants(*input));
                let mut gk = vec![0.0; if want_k { r * cin } else { 0 }];
                let mut gy = vec![0.0; if want_y { y.len() } else { 0 }];
                for rows in row_tiles(geom) {
                    let p = rows.len() * geom.ow;
                    let off = rows.start * geom.ow * cin;
                    let gcols = im2col(g, geom, rows);
                    if want_k {
                        gemm(
                            r,
                            p,
                            cin,
                            &gcols,
                            true,
                            &y[off..off + p * cin],
                            false,
                            &mut gk,
                            true,
                        );
                    }
                    if want_y {
                        gemm(
                            p,
                            r,
                            cin,
                            &gcols,
                            false,
                            k,
                            false,
                            &mut gy[off..off + p * cin],
                            false,
                        );
                    }
                }
                let mut res = Vec::with_capacity(3);
                if want_k {
                    res.push((*kernel, gk));
                }
                if wants(*bias) {
                    res.push((*bias, channel_sums(g, cout)));
                }
                if want_y {
                    res.push((*input, gy));
                }
                res
            }
            Op::GridSample {
                input,
                coords,
                dims,
            } => {
                let (gi, gc) = sample::grid_sample_backward(val(*input), val(*coords), g, *dims);
                vec![(*input, gi), (*coords, gc)]
            }
            Op::Resize { input, dims } => vec![(*input, sample::resize_backward(g, *dims))],
            Op::Concat { a, b, ca, cb } => {
                let rows = g.len() / (ca + cb).max(1);
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..*ca]);
                    gb.extend_from_slice(&row[*ca..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::ViewMean(a) => {
                let n = self.shape(*a)[0];
                let gi = (0..n)
                    .flat_map(|_| g.iter().map(|x| x / n as f64))
                    .collect();
                vec![(*a, gi)]
            }
            Op::ViewVar(a) => {
                let x = val(*a);
                let n = self.shape(*a)[0];
                let m = g.len();
                let mean = column_mean(x, n, m);
                let k = 2.0 / (n - 1) as f64;
                let mut gi = vec![0.0; x.len()];
                for s in 0..n {
                    for j in 0..m {
                        gi[s * m + j] = k * (x[s * m + j] - mean[j]) * g[j];
                    }
                }
                vec![(*a, gi)]
            }
            Op::Gather { input, index } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (&i, gv) in index.iter().zip(g) {
                    gi[i] += gv;
                }
                vec![(*input, gi)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
        })
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    let c = bias.len();
    if c == 0 {
        return;
    }
    for row in out.chunks_exact_mut(c) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    if c == 0 {
        return s;
    }
    for row in g.chunks_exact(c) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

/// Per-column mean of `n` stacked rows of length `m`, accumulated as
/// offsets from the first row so identical rows reproduce it exactly.
fn column_mean(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut acc = vec![0.0; m];
    for s in 1..n {
        for j in 0..m {
            acc[j] += x[s * m + j] - x[j];
        }
    }
    (0..m).map(|j| x[j] + acc[j] / n as f64).collect()
}
