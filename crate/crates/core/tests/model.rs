use diffcore::{Tape, Tensor};
use lfsr::lfops::{shift_stack, shift_views, ShiftScale};
use lfsr::lightfield::DType;
use lfsr::losses::{objective, LossWeights, ObjectiveInputs};
use lfsr::model::{
    field_shapes, load_checkpoint, load_checkpoint_for, save_checkpoint, shape_plan, trace_shapes,
    Group, ModelParams, NetConfig, Prior, ResidualOrder,
};
use lfsr::synthgen::{box_downsample, random_scene, DISPARITY_RANGE};
use lfsr::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk network that accepts 16x16 inputs.
fn small_desk() -> NetConfig {
    NetConfig {
        input_hw: [16, 16],
        ..NetConfig::desk()
    }
}

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, 1], |_| rng.gen_range(0.05..0.95))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

// Output Size column, typed row by row. Rows listing "Conv + Conv" map to
// the second convolution of the pair.
const TABLE_4: &[(&str, [usize; 3])] = &[
    ("enc1.conv2", [128, 128, 16]),
    ("enc1.down", [64, 64, 16]),
    ("enc2.conv2", [64, 64, 32]),
    ("enc2.down", [32, 32, 32]),
    ("enc3.conv2", [32, 32, 64]),
    ("enc3.down", [16, 16, 64]),
    ("enc4.conv2", [16, 16, 128]),
    ("enc4.down", [8, 8, 128]),
    ("enc5.conv2", [8, 8, 256]),
    ("enc5.down", [4, 4, 256]),
    ("bottleneck.conv2", [4, 4, 512]),
    ("ang5.up", [8, 8, 256]),
    ("ang5.conv2", [8, 8, 256]),
    ("ang4.up", [16, 16, 128]),
    ("ang4.conv2", [16, 16, 128]),
    ("ang3.up", [32, 32, 64]),
    ("ang3.conv2", [32, 32, 64]),
    ("ang2.up", [64, 64, 64]),
    ("ang2.conv2", [64, 64, 64]),
    ("ang1.up", [128, 128, 64]),
    ("ang1.conv2", [128, 128, 64]),
    ("ang.head2", [128, 128, 64]),
    ("ang.out", [128, 128, 128]),
];

const TABLE_5: &[(&str, [usize; 3])] = &[
    ("sp5.up", [8, 8, 256]),
    ("sp5.conv2", [8, 8, 256]),
    ("sp4.up", [16, 16, 128]),
    ("sp4.conv2", [16, 16, 128]),
    ("sp3.up", [32, 32, 64]),
    ("sp3.conv2", [32, 32, 64]),
    ("sp2.up", [64, 64, 64]),
    ("res_a.up1", [128, 128, 64]),
    ("res_a.conv2", [128, 128, 64]),
    ("res_a.up2", [256, 256, 192]),
    ("res_a.out", [256, 256, 192]),
    ("res_b.up1", [128, 128, 64]),
    ("res_b.conv2", [128, 128, 64]),
    ("res_b.up2", [256, 256, 192]),
    ("res_b.out", [256, 256, 192]),
];

/// Parameter count walked from the table rows: encoder levels of three
/// convolutions, the bottleneck pair, decoder levels whose first convolution
/// also sees the encoder skip, a two-convolution head and the linear flow
/// layer, the spatial trunk, and two branches that see 128 flow channels
/// and 64 intensity channels respectively.
fn table_parameter_count() -> usize {
    let p = |cin: usize, cout: usize| 9 * cin * cout + cout;
    let mut n = 0;
    let mut prev = 1;
    for f in [16, 32, 64, 128, 256] {
        n += p(prev, f) + 2 * p(f, f);
        prev = f;
    }
    n += p(256, 512) + p(512, 512);
    prev = 512;
    for (g, skip) in [(256, 256), (128, 128), (64, 64), (64, 32), (64, 16)] {
        n += p(prev, g) + p(g + skip, g) + p(g, g);
        prev = g;
    }
    n += 2 * p(64, 64) + p(64, 128);
    prev = 512;
    for (g, pairs) in [(256, 1), (128, 1), (64, 1), (64, 0)] {
        n += p(prev, g) + pairs * 2 * p(g, g);
        prev = g;
    }
    for prior in [128, 64] {
        n += p(64, 64)
            + p(64 + prior, 64)
            + p(64, 64)
            + p(64, 192)
            + p(192 + prior, 192)
            + p(192, 192);
    }
    n
}

#[test]
fn table_parameter_count_matches_the_table_walk() {
    assert_eq!(table_parameter_count(), 15_121_824);
    let params = ModelParams::build(&NetConfig::table(), 0).unwrap();
    assert_eq!(params.parameter_count(), 15_121_824);
    let groups: usize = Group::ALL
        .iter()
        .map(|&g| params.group_parameter_count(g))
        .sum();
    assert_eq!(groups, 15_121_824);
}

#[test]
fn table_activations_match_the_output_size_column() {
    let params = ModelParams::build(&NetConfig::table(), 3).unwrap();
    let trace = trace_shapes(&params, &image(128, 128, 1), true).unwrap();
    let find = |name: &str| {
        trace
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s.clone())
            .unwrap_or_else(|| panic!("{name} missing from trace"))
    };
    for (name, shape) in TABLE_4.iter().chain(TABLE_5) {
        assert_eq!(find(name), shape.to_vec(), "{name}");
    }
    assert_eq!(find("lf_lr"), vec![64, 128, 128, 1]);
    assert_eq!(find("lf_hr"), vec![64, 256, 256, 3]);

    let planned = shape_plan(&params, 128, 128).unwrap();
    let layers: Vec<_> = trace
        .iter()
        .filter(|(n, _)| n != "lf_lr" && n != "lf_hr")
        .cloned()
        .collect();
    assert_eq!(planned, layers);
    let [flow, lr, hr] = field_shapes(&params, 128, 128);
    assert_eq!(
        (flow, lr, hr),
        (
            vec![64, 128, 128, 2],
            vec![64, 128, 128, 1],
            vec![64, 256, 256, 3]
        )
    );
}

#[test]
fn build_shapes_for_both_presets() {
    let table = ModelParams::build(&NetConfig::table(), 0).unwrap();
    let kernel = |p: &ModelParams, layer: &str| {
        let i = p.layer_index(layer).unwrap();
        p.tensors()[2 * i].shape().to_vec()
    };
    assert_eq!(kernel(&table, "enc1.conv1"), vec![3, 3, 1, 16]);
    assert_eq!(kernel(&table, "bottleneck.conv1"), vec![3, 3, 256, 512]);
    assert_eq!(kernel(&table, "ang.out"), vec![3, 3, 64, 128]);

    let desk = ModelParams::build(&NetConfig::desk(), 0).unwrap();
    assert_eq!(kernel(&desk, "ang.out")[3], 50);
    assert_eq!(kernel(&desk, "res_a.out")[3], 25);
}

#[test]
fn biases_start_at_zero_and_weights_follow_he_scaling() {
    let params = ModelParams::build(&NetConfig::desk(), 9).unwrap();
    for (name, _, t) in params.named() {
        if name.ends_with(".b") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    let i = params.layer_index("bottleneck.conv2").unwrap();
    let w = &params.tensors()[2 * i];
    let fan_in = (9 * w.shape()[2]) as f64;
    let n = w.len() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.02 * std);
    assert!((std / (2.0 / fan_in).sqrt() - 1.0).abs() < 0.02, "{std}");
}

#[test]
fn builds_are_deterministic_in_the_seed() {
    let c = NetConfig::desk();
    let a = ModelParams::build(&c, 42).unwrap();
    let b = ModelParams::build(&c, 42).unwrap();
    let other = ModelParams::build(&c, 43).unwrap();
    assert!(a
        .tensors()
        .iter()
        .zip(b.tensors())
        .all(|(x, y)| bits(x) == bits(y)));
    assert_ne!(
        a.group_hash(Group::Encoder),
        other.group_hash(Group::Encoder)
    );
}

#[test]
fn invalid_geometry_is_a_config_error() {
    let c = NetConfig {
        input_hw: [60, 64],
        ..NetConfig::desk()
    };
    assert!(matches!(ModelParams::build(&c, 0), Err(Error::Config(_))));
    let c = NetConfig {
        views: 4,
        ..NetConfig::desk()
    };
    assert!(
        matches!(ModelParams::build(&c, 0), Err(Error::Config(m)) if m.contains("views must be odd"))
    );

    let params = ModelParams::build(&small_desk(), 0).unwrap();
    assert!(params.infer(&image(24, 16, 0)).is_err());
    assert!(matches!(
        params.infer(&Tensor::zeros(&[16, 16, 3])),
        Err(Error::Shape(_))
    ));
}

#[test]
fn zero_flow_head_reduces_the_angular_path_to_shifting() {
    let mut params = ModelParams::build(&small_desk(), 5).unwrap();
    params.zero_flow_head().unwrap();
    let x = image(16, 16, 2);
    let mut tape = Tape::new();
    let mut net = params.bind_constant(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let a = net.forward_angular(&mut tape, xv).unwrap();
    assert!(tape.value(a.flow).data().iter().all(|&v| v == 0.0));
    let shifted = shift_stack(&x, 5, 0.8).unwrap();
    assert_eq!(bits(tape.value(a.lf_lr)), bits(&shifted));

    let expect = shift_views(&x, 5, ShiftScale::new(0.8).unwrap()).unwrap();
    let (_, lf) = params.forward_angular(&x).unwrap();
    assert_eq!(lf.data(), expect.data());
    let center = lf.view(2, 2).unwrap();
    assert_eq!(bits(&center), bits(&x));
}

#[test]
fn zero_residual_heads_reduce_the_spatial_path_to_bilinear_upsampling() {
    let mut params = ModelParams::build(&small_desk(), 6).unwrap();
    params.zero_residual_heads().unwrap();
    let mut tape = Tape::new();
    let mut net = params.bind_constant(&mut tape).unwrap();
    let x = tape.constant(image(16, 16, 3)).unwrap();
    let (a, s) = net.forward(&mut tape, x).unwrap();
    let up = tape.bilinear_resize(a.lf_lr, 2).unwrap();
    assert_eq!(bits(tape.value(s.lf_hr)), bits(tape.value(up)));
    for &(_, r) in &s.residuals {
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn residual_orders_change_concat_sources_not_shapes() {
    let x = image(16, 16, 4);
    for order in ResidualOrder::ALL {
        let c = NetConfig {
            residual_order: order,
            ..small_desk()
        };
        let params = ModelParams::build(&c, 1).unwrap();
        let out = params.infer(&x).unwrap();
        assert_eq!(out.hr_stack.shape(), &[25, 32, 32, 1], "{}", order.name());
        assert_eq!(out.residuals.len(), order.branches().len());
        let priors: Vec<Prior> = out.residuals.iter().map(|r| r.0).collect();
        assert_eq!(priors, order.branches());
        for (i, &prior) in order.branches().iter().enumerate() {
            let layer = &params.layers()[params
                .layer_index(&format!("{}.conv1", lfsr::model::branch_name(i)))
                .unwrap()];
            assert_eq!(layer.cin, 32 + c.prior_channels(prior));
        }
    }
    let a = ModelParams::build(&small_desk(), 1).unwrap();
    let b = ModelParams::build(
        &NetConfig {
            residual_order: ResidualOrder::IntensityThenFlow,
            ..small_desk()
        },
        1,
    )
    .unwrap();
    let cin = |p: &ModelParams, l: &str| p.layers()[p.layer_index(l).unwrap()].cin;
    assert_eq!(cin(&a, "res_a.conv1"), 32 + 50);
    assert_eq!(cin(&b, "res_a.conv1"), 32 + 25);
    assert_eq!(cin(&b, "res_b.conv1"), 32 + 50);
}

#[test]
fn x4_synthesis_doubles_twice_and_zero_residuals_compose_to_bilinear() {
    let mut params = ModelParams::build(&small_desk(), 7).unwrap();
    let x = image(16, 16, 5);
    let out = params.synth_hr_x4(&x).unwrap();
    assert_eq!((out.views(), out.height(), out.width()), (5, 64, 64));

    params.zero_residual_heads().unwrap();
    let first = params.infer(&x).unwrap();
    let x4 = params.second_pass(&first.lf_hr).unwrap();
    for v in 0..5 {
        for u in 0..5 {
            let mut tape = Tape::new();
            let view = tape.constant(first.lf_hr.view(v, u).unwrap()).unwrap();
            let up = tape.bilinear_resize(view, 2).unwrap();
            let want: Vec<u64> = tape
                .value(up)
                .data()
                .iter()
                .map(|p| p.clamp(0.0, 1.0).to_bits())
                .collect();
            assert_eq!(bits(&x4.view(v, u).unwrap()), want);
        }
    }
}

#[test]
fn full_size_desk_input_synthesizes_256_pixel_views() {
    let params = ModelParams::build(&NetConfig::desk(), 8).unwrap();
    let out = params.synth_hr_x4(&image(64, 64, 6)).unwrap();
    assert_eq!(
        (out.views(), out.height(), out.width(), out.channels()),
        (5, 256, 256, 1)
    );
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::build(&small_desk(), 10).unwrap();
    let path = dir.path().join("m.lfck");
    save_checkpoint(&params, &path, DType::F64).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, params);
    let x = image(16, 16, 7);
    assert_eq!(
        bits(&params.infer(&x).unwrap().hr_stack),
        bits(&back.infer(&x).unwrap().hr_stack)
    );

    let f32_path = dir.path().join("m32.lfck");
    save_checkpoint(&params, &f32_path, DType::F32).unwrap();
    let narrow = load_checkpoint(&f32_path).unwrap();
    for (a, b) in narrow.tensors().iter().zip(params.tensors()) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| *x == (*y as f32) as f64));
    }
}

#[test]
fn checkpoint_with_other_views_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lfck");
    save_checkpoint(
        &ModelParams::build(&small_desk(), 0).unwrap(),
        &path,
        DType::F32,
    )
    .unwrap();
    let expected = NetConfig {
        views: 7,
        ..small_desk()
    };
    match load_checkpoint_for(&path, &expected) {
        Err(Error::Incompatible {
            field,
            expected,
            found,
        }) => {
            assert_eq!(field, "views");
            assert_eq!((expected.as_str(), found.as_str()), ("7", "5"));
        }
        other => panic!("expected an incompatibility error, got {other:?}"),
    }
    assert!(load_checkpoint_for(&path, &small_desk()).is_ok());
}

#[test]
fn trailing_bytes_are_a_length_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lfck");
    save_checkpoint(
        &ModelParams::build(&small_desk(), 0).unwrap(),
        &path,
        DType::F32,
    )
    .unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(&[0, 1, 2]);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Length { .. })));
    bytes.truncate(bytes.len() - 20);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Length { .. })));
}

/// Total objective of the desk network on one rendered scene.
fn objective_value(params: &ModelParams, center: &Tensor, lr: &Tensor, hr: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let mut net = params.bind_constant(&mut tape).unwrap();
    let x = tape.constant(center.clone()).unwrap();
    let (a, s) = net.forward(&mut tape, x).unwrap();
    let truth_lr = tape.constant(lr.clone()).unwrap();
    let truth_hr = tape.constant(hr.clone()).unwrap();
    let inputs = ObjectiveInputs {
        pred_lr: a.lf_lr,
        truth_lr,
        pred_hr: s.lf_hr,
        truth_hr,
        flow: a.flow,
    };
    let (total, _) = objective(&mut tape, inputs, &LossWeights::default()).unwrap();
    tape.value(total).data()[0]
}

#[test]
fn encoder_gradients_match_finite_differences_end_to_end() {
    let spec = random_scene([16, 16], 5, 3, DISPARITY_RANGE);
    let (hr, _) = spec.render(2).unwrap();
    let lr = box_downsample(&hr).unwrap();
    let center = lr.view(2, 2).unwrap();
    let (lr_t, hr_t) = (lr.to_stack(), hr.to_stack());

    let mut params = ModelParams::build(&small_desk(), 11).unwrap();
    // small nonzero residual heads so every path carries gradient
    for name in ["res_a.out", "res_b.out"] {
        let i = params.layer_index(name).unwrap();
        params.tensors_mut()[2 * i]
            .data_mut()
            .iter_mut()
            .for_each(|v| *v *= 0.01);
    }

    let mut tape = Tape::new();
    let mut net = params.bind(&mut tape).unwrap();
    let x = tape.constant(center.clone()).unwrap();
    let (a, s) = net.forward(&mut tape, x).unwrap();
    let truth_lr = tape.constant(lr_t.clone()).unwrap();
    let truth_hr = tape.constant(hr_t.clone()).unwrap();
    let inputs = ObjectiveInputs {
        pred_lr: a.lf_lr,
        truth_lr,
        pred_hr: s.lf_hr,
        truth_hr,
        flow: a.flow,
    };
    let (total, _) = objective(&mut tape, inputs, &LossWeights::default()).unwrap();
    let vars = net.vars().to_vec();
    let grads = tape.backward(total).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for layer in [
        "enc1.conv1",
        "enc1.conv2",
        "enc2.conv1",
        "enc2.conv2",
        "enc3.conv1",
    ] {
        let t = 2 * params.layer_index(layer).unwrap();
        let analytic = grads.get(vars[t]).unwrap().clone();
        let largest = analytic.data().iter().fold(0f64, |m, v| m.max(v.abs()));
        let mut probed = 0;
        while probed < 3 {
            let k = rng.gen_range(0..analytic.len());
            let g = analytic.data()[k];
            if g.abs() < 0.1 * largest {
                continue;
            }
            let orig = params.tensors()[t].data()[k];
            params.tensors_mut()[t].data_mut()[k] = orig + eps;
            let up = objective_value(&params, &center, &lr_t, &hr_t);
            params.tensors_mut()[t].data_mut()[k] = orig - eps;
            let down = objective_value(&params, &center, &lr_t, &hr_t);
            params.tensors_mut()[t].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (g - numeric).abs() / g.abs().max(numeric.abs());
            worst = worst.max(rel);
            probed += 1;
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}
