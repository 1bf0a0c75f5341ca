use diffcore::gradcheck::check_gradients;
use diffcore::Tensor;
use lfsr::lfops::{
    decode_flow, encode_flow, graph, shift_views, upsample_flow, warp, AppearanceFlowField,
    ShiftScale,
};
use lfsr::lightfield::{psnr, LightField};
use lfsr::synthgen::{Layer, Mask, SceneSpec, Texture, TextureSpec};
use lfsr::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eta(v: f64) -> ShiftScale {
    ShiftScale::new(v).unwrap()
}

fn smooth_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, p): (f64, f64, f64) = (rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5), rng.gen());
    Tensor::from_fn(&[h, w, 1], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        0.5 + 0.2 * (a * x + p).sin() * (b * y).cos()
    })
}

fn random_flow(views: usize, h: usize, w: usize, seed: u64) -> AppearanceFlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = views * views * h * w * 2;
    AppearanceFlowField::new(
        views,
        h,
        w,
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

#[test]
fn center_view_of_a_shift_is_the_input() {
    let img = smooth_image(8, 9, 1);
    let lf = shift_views(&img, 5, eta(0.8)).unwrap();
    assert_eq!(lf.center_view(), img);
}

#[test]
fn unit_shift_moves_rows_by_one_pixel() {
    let img = smooth_image(6, 10, 2);
    let lf = shift_views(&img, 3, eta(1.0)).unwrap();
    let view = lf.view(1, 2).unwrap();
    for y in 0..6 {
        for x in 1..10 {
            assert_eq!(view.data()[y * 10 + x], img.data()[y * 10 + x - 1]);
        }
        assert_eq!(view.data()[y * 10], img.data()[y * 10]);
    }
    let up = lf.view(0, 1).unwrap();
    // one view up (dv = -1): content moves down by one pixel
    for y in 0..5 {
        for x in 0..10 {
            assert_eq!(up.data()[y * 10 + x], img.data()[(y + 1) * 10 + x]);
        }
    }
}

#[test]
fn half_pixel_shift_of_a_ramp_interpolates() {
    let ramp: Vec<f64> = (0..4).map(|i| i as f64 / 10.0).collect();
    let img = Tensor::new(vec![1, 4, 1], ramp.clone()).unwrap();
    let lf = shift_views(&img, 3, eta(0.5)).unwrap();
    let right = lf.view(1, 2).unwrap();
    for x in 1..4 {
        assert!((right.data()[x] - (x as f64 - 0.5) / 10.0).abs() <= 1e-15);
    }
    let left = lf.view(1, 0).unwrap();
    for x in 0..3 {
        assert!((left.data()[x] - (x as f64 + 0.5) / 10.0).abs() <= 1e-15);
    }
}

#[test]
fn zero_shift_copies_the_center_everywhere() {
    let img = smooth_image(5, 7, 3);
    let lf = shift_views(&img, 5, eta(0.0)).unwrap();
    for v in 0..5 {
        for u in 0..5 {
            assert_eq!(lf.view(v, u).unwrap(), img);
        }
    }
}

#[test]
fn even_grids_and_bad_scales_are_rejected() {
    let img = smooth_image(4, 4, 4);
    assert!(matches!(
        shift_views(&img, 4, eta(0.8)),
        Err(Error::Argument(_))
    ));
    assert!(ShiftScale::new(f64::INFINITY).is_err());
}

#[test]
fn decode_uses_column_major_view_order() {
    let (h, w) = (2, 3);
    let raw = Tensor::from_fn(&[h, w, 8], |i| (i % 8) as f64);
    let flow = decode_flow(&raw, 2).unwrap();
    let v11 = flow.view(1, 1).unwrap();
    assert!(v11.data().chunks(2).all(|p| p == [6.0, 7.0]));
    let v10 = flow.view(1, 0).unwrap();
    assert!(v10.data().chunks(2).all(|p| p == [2.0, 3.0]));
    let v01 = flow.view(0, 1).unwrap();
    assert!(v01.data().chunks(2).all(|p| p == [4.0, 5.0]));

    for u in [3usize, 5] {
        let n = 2 * u * u;
        let raw = Tensor::from_fn(&[1, 1, n], |i| i as f64);
        let flow = decode_flow(&raw, u).unwrap();
        for v in 0..u {
            for uu in 0..u {
                let s = v + uu * u;
                assert_eq!(
                    flow.view(v, uu).unwrap().data(),
                    &[2.0 * s as f64, 2.0 * s as f64 + 1.0]
                );
            }
        }
    }
}

#[test]
fn eight_by_eight_grid_needs_128_channels() {
    let ok = Tensor::zeros(&[2, 2, 128]);
    let flow = decode_flow(&ok, 8).unwrap();
    assert_eq!((flow.views(), flow.height(), flow.width()), (8, 2, 2));
    assert!(flow.data().iter().all(|&v| v == 0.0));
    let bad = Tensor::zeros(&[2, 2, 126]);
    assert!(matches!(decode_flow(&bad, 8), Err(Error::Shape(_))));
}

#[test]
fn zero_flow_warp_is_identity() {
    let img = smooth_image(9, 8, 5);
    let shifted = shift_views(&img, 5, eta(0.8)).unwrap();
    let out = warp(&shifted, &AppearanceFlowField::zeros(5, 9, 8)).unwrap();
    for (a, b) in out.data().iter().zip(shifted.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn unit_horizontal_flow_shifts_by_one_pixel() {
    let data: Vec<f64> = (0..9 * 6 * 7)
        .map(|i| ((i * 37) % 11) as f64 / 10.0)
        .collect();
    let lf = LightField::new(3, 6, 7, 1, data).unwrap();
    let out = warp(
        &lf,
        &AppearanceFlowField::constant(3, 6, 7, 1.0, 0.0).unwrap(),
    )
    .unwrap();
    for s in 0..9 {
        for y in 0..6 {
            for x in 0..6 {
                let i = s * 42 + y * 7 + x;
                assert_eq!(out.data()[i], lf.data()[i + 1]);
            }
        }
    }
    assert!(matches!(
        warp(&lf, &AppearanceFlowField::zeros(3, 6, 6)),
        Err(Error::Numeric(_) | Error::Shape(_))
    ));
}

fn plane(d: f64) -> SceneSpec {
    SceneSpec {
        layers: vec![Layer {
            disparity: d,
            mask: Mask::Full,
            texture: TextureSpec {
                base: 0.5,
                components: vec![
                    Texture::Sinusoid {
                        wavelength: 29.0,
                        angle: 0.5,
                        phase: 0.2,
                        amplitude: 0.1,
                    },
                    Texture::Gradient {
                        gx: 0.003,
                        gy: 0.002,
                    },
                ],
            },
        }],
        hw: [40, 40],
        views: 5,
        seed: 0,
    }
}

#[test]
fn ideal_flow_reconstructs_constant_disparity_scenes() {
    let e = 0.8;
    for d in [-1.2, -0.4, 0.5, 1.3] {
        let (lf, _) = plane(d).render(1).unwrap();
        let shifted = shift_views(&lf.center_view(), 5, eta(e)).unwrap();
        let flow = AppearanceFlowField::from_fn(5, 40, 40, |o, _, _| {
            ((e - d) * o.dh as f64, (e - d) * o.dv as f64)
        })
        .unwrap();
        let out = warp(&shifted, &flow).unwrap();
        let b = 2 * ((e.abs() + d.abs()) * 2.0).ceil() as usize;
        let inner = |l: &LightField| l.crop(b, b, 40 - 2 * b, 40 - 2 * b).unwrap();
        let (a, t) = (inner(&out), inner(&lf));
        for v in 0..5 {
            for u in 0..5 {
                let p = psnr(&a.view(v, u).unwrap(), &t.view(v, u).unwrap()).unwrap();
                assert!(p >= 50.0, "d={d} view ({v},{u}): {p} dB");
            }
        }
    }
}

#[test]
fn upsampling_by_one_is_identity() {
    let f = random_flow(3, 4, 5, 6);
    assert_eq!(upsample_flow(&f, 1).unwrap(), f);
    assert!(matches!(
        upsample_flow(&f, 0),
        Err(Error::Argument(_) | Error::Numeric(_))
    ));
}

#[test]
fn constant_flow_doubles_in_magnitude() {
    let f = AppearanceFlowField::constant(3, 4, 4, 1.0, 0.0).unwrap();
    let g = upsample_flow(&f, 2).unwrap();
    assert_eq!((g.views(), g.height(), g.width()), (3, 8, 8));
    assert!(g.data().chunks(2).all(|p| p == [2.0, 0.0]));
}

#[test]
fn ramp_flow_matches_align_corners_interpolation() {
    let (h, w) = (3, 5);
    let f = AppearanceFlowField::from_fn(1, h, w, |_, y, x| {
        (x as f64, 0.5 * y as f64 + 0.25 * x as f64)
    })
    .unwrap();
    let g = upsample_flow(&f, 2).unwrap();
    let (oh, ow) = (2 * h, 2 * w);
    for y in 0..oh {
        for x in 0..ow {
            let sy = y as f64 * (h - 1) as f64 / (oh - 1) as f64;
            let sx = x as f64 * (w - 1) as f64 / (ow - 1) as f64;
            let i = (y * ow + x) * 2;
            assert!((g.data()[i] - 2.0 * sx).abs() <= 1e-12);
            assert!((g.data()[i + 1] - 2.0 * (0.5 * sy + 0.25 * sx)).abs() <= 1e-12);
        }
    }
}

fn wrap(e: Error) -> diffcore::Error {
    diffcore::Error::Argument {
        op: "lfops",
        detail: e.to_string(),
    }
}

#[test]
fn warp_gradients_match_finite_differences() {
    for (k, &(u, h, w)) in [(3usize, 5usize, 6usize), (1, 4, 4), (5, 3, 7)]
        .iter()
        .enumerate()
    {
        let img = smooth_image(h, w, 10 + k as u64);
        let shifted = shift_views(&img, u, eta(0.0)).unwrap().to_stack();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        // fractional offsets keep every sample away from the bilinear kinks
        let flow = Tensor::from_fn(&[u * u, h, w, 2], |_| {
            let base: f64 = rng.gen_range(-1.0..1.0f64).round();
            base + rng.gen_range(0.25..0.75)
        });
        let weights = Tensor::from_fn(&[u * u, h, w, 1], |i| ((i * 7) % 5) as f64 - 2.0);
        let check = check_gradients(
            |t, v| {
                let out = graph::warp(t, v[0], v[1]).map_err(wrap)?;
                let wv = t.constant(weights.clone())?;
                let p = t.mul(out, wv)?;
                Ok(t.sum(p)?)
            },
            &[shifted.clone(), flow],
            1e-6,
            Some(60),
        )
        .unwrap();
        assert!(check.max_rel_error() <= 1e-4, "{:?}", check.rel_errors);
    }
}

#[test]
fn shift_gradient_matches_finite_differences() {
    let img = smooth_image(6, 6, 20);
    let weights = Tensor::from_fn(&[9, 6, 6, 1], |i| ((i * 3) % 7) as f64 - 3.0);
    let check = check_gradients(
        |t, v| {
            let s = graph::shift(t, v[0], 3, 0.7).map_err(wrap)?;
            let wv = t.constant(weights.clone())?;
            let p = t.mul(s, wv)?;
            Ok(t.sum(p)?)
        },
        &[img],
        1e-6,
        None,
    )
    .unwrap();
    assert!(check.max_rel_error() <= 1e-4, "{:?}", check.rel_errors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decode_inverts_encode(u in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let f = random_flow(u, h, w, seed);
        let raw = encode_flow(&f);
        prop_assert_eq!(raw.shape(), &[h, w, 2 * u * u]);
        prop_assert_eq!(decode_flow(&raw, u).unwrap(), f);
    }

    #[test]
    fn warping_a_shift_by_zero_flow_changes_nothing(
        half in 0usize..3, e in -1.5f64..1.5, seed in any::<u64>()
    ) {
        let u = 2 * half + 1;
        let img = smooth_image(6, 7, seed);
        let shifted = shift_views(&img, u, eta(e)).unwrap();
        let out = warp(&shifted, &AppearanceFlowField::zeros(u, 6, 7)).unwrap();
        for (a, b) in out.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
