use diffcore::gradcheck::check_gradients;
use diffcore::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct nested-loop same-padded convolution, independent of im2col.
fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let oh = h.div_ceil(stride);
    let ow = w.div_ceil(stride);
    let pt = (((oh - 1) * stride + kh).saturating_sub(h) / 2) as isize;
    let pl = (((ow - 1) * stride + kw).saturating_sub(w) / 2) as isize;
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let y = (oy * stride + ky) as isize - pt;
                        let xx = (ox * stride + kx) as isize - pl;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[((y as usize) * w + xx as usize) * cin + ci]
                                * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out.data_mut()[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    out
}

fn run_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let mut t = Tape::new();
    let (x, k, b) = (
        t.constant(x.clone()).unwrap(),
        t.constant(k.clone()).unwrap(),
        t.constant(b.clone()).unwrap(),
    );
    let y = t.conv2d(x, k, b, stride).unwrap();
    t.value(y).clone()
}

fn run_conv_t(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let mut t = Tape::new();
    let (x, k, b) = (
        t.constant(x.clone()).unwrap(),
        t.constant(k.clone()).unwrap(),
        t.constant(b.clone()).unwrap(),
    );
    let y = t.conv2d_transpose(x, k, b, stride).unwrap();
    t.value(y).clone()
}

/// Weighted sum with fixed pseudo-random weights, so gradient checks see a
/// non-trivial upstream gradient.
fn probe(t: &mut Tape, y: Var) -> diffcore::Result<Var> {
    let n = t.value(y).len();
    let w = Tensor::from_fn(t.shape(y), |i| ((i * 7919 + 13) % 17) as f64 / 8.0 - 1.0);
    assert_eq!(w.len(), n);
    let w = t.constant(w)?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

#[test]
fn conv_scalar_product() {
    let y = run_conv(
        &Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap(),
        &Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap(),
        &Tensor::zeros(&[1]),
        1,
    );
    assert_eq!(y.data(), &[6.0]);
}

#[test]
fn conv_all_ones_center_and_corner() {
    let y = run_conv(
        &Tensor::full(&[3, 3, 1], 1.0),
        &Tensor::full(&[3, 3, 1, 1], 1.0),
        &Tensor::zeros(&[1]),
        1,
    );
    let oracle = conv_oracle(
        &Tensor::full(&[3, 3, 1], 1.0),
        &Tensor::full(&[3, 3, 1, 1], 1.0),
        &[0.0],
        1,
    );
    assert_eq!(y, oracle);
    assert_eq!(y.data()[4], 9.0);
    assert_eq!(y.data()[0], 4.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(h, w, cin, cout, k, s) in &[
        (5, 5, 2, 3, 3, 1),
        (6, 4, 3, 2, 3, 2),
        (7, 5, 1, 4, 5, 2),
        (8, 8, 4, 4, 1, 1),
    ] {
        let x = random(&[h, w, cin], &mut rng);
        let kk = random(&[k, k, cin, cout], &mut rng);
        let b = random(&[cout], &mut rng);
        let y = run_conv(&x, &kk, &b, s);
        let o = conv_oracle(&x, &kk, b.data(), s);
        assert!(y.max_abs_diff(&o).unwrap() < 1e-12);
    }
}

#[test]
fn conv_input_gradient_vs_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[5, 5, 2], &mut rng);
    let k = random(&[3, 3, 2, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let r = check_gradients(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1)?;
            probe(t, y)
        },
        &[x, k, b],
        1e-5,
        None,
    )
    .unwrap();
    assert!(r.rel_errors[0] <= 1e-6, "{:?}", r.rel_errors);
    assert!(r.max_rel_error() <= 1e-6, "{:?}", r.rel_errors);
}

#[test]
fn conv_errors() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[4, 4, 2])).unwrap();
    let k = t.constant(Tensor::zeros(&[3, 3, 3, 1])).unwrap();
    let b = t.constant(Tensor::zeros(&[1])).unwrap();
    assert!(matches!(t.conv2d(x, k, b, 1), Err(Error::Shape { .. })));
    let k = t.constant(Tensor::zeros(&[3, 3, 2, 1])).unwrap();
    assert!(matches!(t.conv2d(x, k, b, 0), Err(Error::Argument { .. })));
}

#[test]
fn conv_transpose_single_pixel_covers_two_by_two() {
    let y = run_conv_t(
        &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(),
        &Tensor::full(&[3, 3, 1, 1], 1.0),
        &Tensor::zeros(&[1]),
        2,
    );
    assert_eq!(y.shape(), &[2, 2, 1]);
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn conv_transpose_zero_input_gives_bias() {
    let y = run_conv_t(
        &Tensor::zeros(&[3, 2, 2]),
        &Tensor::full(&[3, 3, 3, 2], 0.7),
        &Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
        2,
    );
    assert_eq!(y.shape(), &[6, 4, 3]);
    for px in y.data().chunks(3) {
        assert_eq!(px, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(h, w, cin, cout) in &[(4, 4, 1, 1), (6, 8, 3, 2), (10, 6, 2, 5)] {
        let x = random(&[h, w, cin], &mut rng);
        let k = random(&[3, 3, cin, cout], &mut rng);
        let y = random(&[h / 2, w / 2, cout], &mut rng);
        let cx = run_conv(&x, &k, &Tensor::zeros(&[cout]), 2);
        let ty = run_conv_t(&y, &k, &Tensor::zeros(&[cin]), 2);
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(h, w, cin, cout) in &[(2, 2, 1, 1), (3, 2, 2, 3), (4, 3, 3, 2)] {
        let x = random(&[h, w, cin], &mut rng);
        let k = random(&[3, 3, cout, cin], &mut rng);
        let b = random(&[cout], &mut rng);
        let r = check_gradients(
            |t, v| {
                let y = t.conv2d_transpose(v[0], v[1], v[2], 2)?;
                probe(t, y)
            },
            &[x, k, b],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-6, "{:?}", r.rel_errors);
    }
}

#[test]
fn conv_gradients_three_shapes_each_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for stride in [1, 2] {
        for &(h, w, cin, cout) in &[(3, 3, 1, 2), (4, 5, 2, 2), (6, 6, 3, 1)] {
            let x = random(&[h, w, cin], &mut rng);
            let k = random(&[3, 3, cin, cout], &mut rng);
            let b = random(&[cout], &mut rng);
            let r = check_gradients(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], v[2], stride)?;
                    probe(t, y)
                },
                &[x, k, b],
                1e-5,
                None,
            )
            .unwrap();
            assert!(r.max_rel_error() <= 1e-4, "{:?}", r.rel_errors);
        }
    }
}

fn leaky(x: f64, slope: f64) -> (f64, f64) {
    let mut t = Tape::new();
    let v = t.param(Tensor::scalar(x)).unwrap();
    let y = t.leaky_relu(v, slope).unwrap();
    let out = t.value(y).item().unwrap();
    let g = t.backward(y).unwrap();
    (out, g.get(v).unwrap().item().unwrap())
}

#[test]
fn leaky_relu_cases() {
    assert_eq!(leaky(2.0, 0.2).0, 2.0);
    assert_eq!(leaky(-1.0, 0.2).0, -0.2);
    assert_eq!(leaky(-3.0, 0.2).1, 0.2);
    // kink takes the positive branch
    assert_eq!(leaky(0.0, 0.2).1, 1.0);
    let mut t = Tape::new();
    let v = t.param(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(t.leaky_relu(v, 0.0), Err(Error::Argument { .. })));
}

#[test]
fn leaky_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for shape in [&[7][..], &[3, 4][..], &[2, 3, 4][..]] {
        // keep entries away from the kink
        let x = Tensor::from_fn(shape, |_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let r = check_gradients(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2)?;
                probe(t, y)
            },
            &[x],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4);
    }
}

fn sample_row(row: &[f64], x: f64) -> f64 {
    let mut t = Tape::new();
    let img = t
        .constant(Tensor::new(vec![1, row.len(), 1], row.to_vec()).unwrap())
        .unwrap();
    let c = t
        .constant(Tensor::new(vec![1, 1, 2], vec![x, 0.0]).unwrap())
        .unwrap();
    let y = t.grid_sample(img, c).unwrap();
    t.value(y).item().unwrap()
}

#[test]
fn grid_sample_closed_form_and_clamp() {
    assert_eq!(sample_row(&[0.0, 1.0], 0.5), 0.5);
    assert_eq!(sample_row(&[0.0, 1.0], -3.0), 0.0);
    assert_eq!(sample_row(&[0.0, 1.0], 7.5), 1.0);
}

fn identity_grid(n: Option<usize>, h: usize, w: usize) -> Tensor {
    let per: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).flat_map(move |x| [x as f64, y as f64]))
        .collect();
    match n {
        None => Tensor::new(vec![h, w, 2], per).unwrap(),
        Some(n) => Tensor::new(vec![n, h, w, 2], per.repeat(n)).unwrap(),
    }
}

#[test]
fn grid_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(n, h, w, c) in &[(1, 3, 3, 1), (2, 4, 5, 2), (3, 5, 4, 3)] {
        let img = random(&[n, h, w, c], &mut rng);
        // off-grid positions, inside the image so no clamp kinks
        let coords = Tensor::from_fn(&[n, h, w, 2], |i| {
            let ext = if i % 2 == 0 { w } else { h } as f64;
            rng.gen_range(0.1..ext - 1.1).floor() + rng.gen_range(0.1..0.9)
        });
        let r = check_gradients(
            |t, v| {
                let y = t.grid_sample(v[0], v[1])?;
                probe(t, y)
            },
            &[img, coords],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4, "{:?}", r.rel_errors);
    }
}

fn resize(x: Tensor, f: usize) -> diffcore::Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(x)?;
    let y = t.bilinear_resize(v, f)?;
    Ok(t.value(y).clone())
}

#[test]
fn bilinear_resize_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[4, 3, 2], &mut rng);
    assert_eq!(resize(x.clone(), 1).unwrap(), x);
    let c = resize(Tensor::full(&[3, 5, 2], 0.25), 2).unwrap();
    assert_eq!(c.shape(), &[6, 10, 2]);
    assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let r = resize(Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap(), 2).unwrap();
    let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (a, b) in r.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(matches!(resize(x, 0), Err(Error::Argument { .. })));
}

#[test]
fn bilinear_resize_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (shape, f) in [
        (&[2, 2, 1][..], 2),
        (&[3, 4, 2][..], 3),
        (&[2, 3, 3, 2][..], 2),
    ] {
        let x = random(shape, &mut rng);
        let r = check_gradients(
            |t, v| {
                let y = t.bilinear_resize(v[0], f)?;
                probe(t, y)
            },
            &[x],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4);
    }
}

#[test]
fn reduce_mean_var_cases() {
    let mut t = Tape::new();
    let x = t
        .constant(Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap())
        .unwrap();
    let (m, v) = t.reduce_mean_var(x).unwrap();
    assert_eq!(t.value(m).data(), &[1.0]);
    assert_eq!(t.value(v).data(), &[2.0]);

    let same = t
        .constant(Tensor::new(vec![4, 2], [0.3, 0.7].repeat(4)).unwrap())
        .unwrap();
    let (m, v) = t.reduce_mean_var(same).unwrap();
    assert_eq!(t.value(v).data(), &[0.0, 0.0]);
    assert_eq!(t.value(m).data(), &[0.3, 0.7]);

    let one = t.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(matches!(
        t.reduce_mean_var(one),
        Err(Error::Degenerate { .. })
    ));
    assert!(t.view_mean(one).is_ok());
}

#[test]
fn reduce_mean_var_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for shape in [&[2, 3][..], &[4, 2, 2][..], &[9, 3, 2, 1][..]] {
        let x = random(shape, &mut rng);
        let r = check_gradients(
            |t, v| {
                let (m, s) = t.reduce_mean_var(v[0])?;
                let a = probe(t, m)?;
                let b = probe(t, s)?;
                t.add(a, b)
            },
            &[x],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4);
    }
}

#[test]
fn backward_square_and_product() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(3.0)).unwrap();
    let y = t.square(x).unwrap();
    assert_eq!(t.backward(y).unwrap().get(x).unwrap().item().unwrap(), 6.0);

    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(2.0)).unwrap();
    let y = t.param(Tensor::scalar(5.0)).unwrap();
    let z = t.mul(x, y).unwrap();
    let g = t.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 5.0);
    assert_eq!(g.get(y).unwrap().item().unwrap(), 2.0);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.param(Tensor::zeros(&[2])).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Argument { .. })));
    let s = t.sum(x).unwrap();
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::BackwardConsumed)));
}

#[test]
fn non_finite_values_are_errors() {
    let mut t = Tape::new();
    assert!(matches!(
        t.constant(Tensor::scalar(f64::NAN)),
        Err(Error::NonFinite { .. })
    ));
    let x = t.param(Tensor::scalar(1e200)).unwrap();
    let err = t.square(x).unwrap_err();
    assert!(
        matches!(err, Error::NonFinite { op: "square", .. }),
        "{err}"
    );
}

#[test]
fn non_finite_gradient_names_operation() {
    let mut t = Tape::new();
    let a = t.param(Tensor::scalar(1e200)).unwrap();
    let b = t.param(Tensor::scalar(1e-200)).unwrap();
    let w = t.mul(a, b).unwrap();
    let v = t.scale(w, 1e300).unwrap();
    // forward stays finite; d v / d b = 1e300 * 1e200 overflows in the mul rule
    match t.backward(v) {
        Err(Error::NonFinite { op, pass, .. }) => {
            assert_eq!(op, "mul");
            assert_eq!(pass, diffcore::Pass::Backward);
        }
        other => panic!("expected non-finite gradient, got {other:?}"),
    }
}

#[test]
fn concat_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = Tape::new();
    let a = t.param(random(&[4, 4, 2], &mut rng)).unwrap();
    let e = t.constant(Tensor::zeros(&[4, 4, 0])).unwrap();
    let ae = t.concat_channels(a, e).unwrap();
    assert_eq!(t.value(ae), t.value(a));
    let b = t.param(random(&[4, 4, 3], &mut rng)).unwrap();
    let ab = t.concat_channels(a, b).unwrap();
    assert_eq!(t.shape(ab), &[4, 4, 5]);
    let s = t.sum(ab).unwrap();
    let g = t.backward(s).unwrap();
    assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));

    let mut t = Tape::new();
    let a = t.param(Tensor::zeros(&[4, 4, 2])).unwrap();
    let b = t.param(Tensor::zeros(&[4, 3, 2])).unwrap();
    assert!(matches!(t.concat_channels(a, b), Err(Error::Shape { .. })));
}

#[test]
fn concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for &(h, w, ca, cb) in &[(1, 1, 1, 1), (2, 3, 2, 1), (3, 3, 1, 4)] {
        let a = random(&[h, w, ca], &mut rng);
        let b = random(&[h, w, cb], &mut rng);
        let r = check_gradients(
            |t, v| {
                let y = t.concat_channels(v[0], v[1])?;
                probe(t, y)
            },
            &[a, b],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4);
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for shape in [&[5][..], &[2, 3][..], &[2, 2, 3][..]] {
        let a = Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.0));
        let b = random(shape, &mut rng);
        let r = check_gradients(
            |t, v| {
                let s = t.sub(v[0], v[1])?;
                let p = t.mul(s, v[0])?;
                let q = t.abs(p)?;
                let r = t.square(v[1])?;
                let u = t.add(q, r)?;
                let u = t.scale(u, 0.5)?;
                let u = t.offset(u, 2.0)?;
                let idx: Vec<usize> = (0..t.value(u).len()).rev().collect();
                let n = idx.len();
                let u = t.gather(u, idx, &[n])?;
                let m = t.mean(u)?;
                let pr = probe(t, u)?;
                t.add(m, pr)
            },
            &[a, b],
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error() <= 1e-4);
    }
}

fn conv_net_grads(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tape::new();
    let x = t.param(random(&[6, 6, 2], &mut rng)).unwrap();
    let k1 = t.param(random(&[3, 3, 2, 4], &mut rng)).unwrap();
    let b1 = t.param(random(&[4], &mut rng)).unwrap();
    let k2 = t.param(random(&[3, 3, 2, 4], &mut rng)).unwrap();
    let b2 = t.param(random(&[2], &mut rng)).unwrap();
    let h = t.conv2d(x, k1, b1, 2).unwrap();
    let h = t.leaky_relu(h, 0.2).unwrap();
    let y = t.conv2d_transpose(h, k2, b2, 2).unwrap();
    let y = t.square(y).unwrap();
    let l = t.mean(y).unwrap();
    let g = t.backward(l).unwrap();
    [x, k1, b1, k2, b2]
        .iter()
        .map(|v| g.get(*v).unwrap().data().to_vec())
        .collect()
}

#[test]
fn replay_is_bit_deterministic() {
    let a = conv_net_grads(99);
    let b = conv_net_grads(99);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn unreachable_and_constant_leaves_have_no_gradient() {
    let mut t = Tape::new();
    let x = t.param(Tensor::scalar(1.0)).unwrap();
    let unused = t.param(Tensor::scalar(1.0)).unwrap();
    let c = t.constant(Tensor::scalar(2.0)).unwrap();
    let y = t.mul(x, c).unwrap();
    let g = t.backward(y).unwrap();
    assert!(g.get(x).is_some());
    assert!(g.get(unused).is_none());
    assert!(g.get(c).is_none());
}

proptest! {
    #[test]
    fn identity_grid_is_exact(h in 1usize..6, w in 1usize..6, c in 1usize..3, n in 1usize..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random(&[n, h, w, c], &mut rng);
        let mut t = Tape::new();
        let x = t.constant(img.clone()).unwrap();
        let g = t.constant(identity_grid(Some(n), h, w)).unwrap();
        let y = t.grid_sample(x, g).unwrap();
        prop_assert_eq!(t.value(y), &img);

        let single = random(&[h, w, c], &mut rng);
        let x = t.constant(single.clone()).unwrap();
        let g = t.constant(identity_grid(None, h, w)).unwrap();
        let y = t.grid_sample(x, g).unwrap();
        prop_assert_eq!(t.value(y), &single);
    }

    #[test]
    fn identical_views_have_zero_variance(k in 2usize..6, m in 1usize..8, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let view: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![k, m], view.repeat(k)).unwrap()).unwrap();
        let (mean, var) = t.reduce_mean_var(x).unwrap();
        prop_assert!(t.value(var).data().iter().all(|&v| v == 0.0));
        for (a, b) in t.value(mean).data().iter().zip(&view) {
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn tiled_convolutions_match_oracle_and_adjoint() {
    // 160 * 9 * 32 patch entries per output row forces several row tiles
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[160, 160, 32], &mut rng);
    let k = random(&[3, 3, 32, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let y = run_conv(&x, &k, &b, 1);
    assert!(y.max_abs_diff(&conv_oracle(&x, &k, b.data(), 1)).unwrap() < 1e-10);

    let x2 = random(&[320, 320, 32], &mut rng);
    let y2 = random(&[160, 160, 3], &mut rng);
    let lhs = run_conv(&x2, &k, &Tensor::zeros(&[3]), 2).dot(&y2).unwrap();
    let rhs = x2
        .dot(&run_conv_t(&y2, &k, &Tensor::zeros(&[32]), 2))
        .unwrap();
    assert!(
        (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0),
        "{lhs} vs {rhs}"
    );

    // backward through tiles: <dL/dx, dx> against a directional difference
    let mut t = Tape::new();
    let xv = t.param(x.clone()).unwrap();
    let kv = t.param(k.clone()).unwrap();
    let bv = t.constant(b.clone()).unwrap();
    let out = t.conv2d(xv, kv, bv, 1).unwrap();
    let l = probe(&mut t, out).unwrap();
    let g = t.backward(l).unwrap();
    let dir = random(&[160, 160, 32], &mut rng);
    let eval = |xx: &Tensor| {
        let mut t = Tape::new();
        let xv = t.constant(xx.clone()).unwrap();
        let kv = t.constant(k.clone()).unwrap();
        let bv = t.constant(b.clone()).unwrap();
        let out = t.conv2d(xv, kv, bv, 1).unwrap();
        let l = probe(&mut t, out).unwrap();
        t.value(l).item().unwrap()
    };
    let eps = 1e-4;
    let shifted = |s: f64| {
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(dir.data())
                .map(|(a, d)| a + s * d)
                .collect(),
        )
        .unwrap()
    };
    // the probe is linear in x, so the central difference is exact up to rounding
    let numeric = (eval(&shifted(eps)) - eval(&shifted(-eps))) / (2.0 * eps);
    let analytic = g.get(xv).unwrap().dot(&dir).unwrap();
    assert!((numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0));
}
