use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spreadnet::autodiff::{grad_check, Tape, Tensor};
use spreadnet::layers::{ConvVariant, Mode};
use spreadnet::models::{
    decode_checkpoint, encode_checkpoint, fit_linear_baseline, model_grad_check, predict_linear_baseline,
    read_checkpoint, update_running, write_checkpoint, Arch, Model, ModelSpec, TemporalMode,
};
use spreadnet::train::mse_loss;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn spec(variant: ConvVariant, base: usize, depth: usize, c_in: usize, grid: [usize; 3]) -> ModelSpec {
    ModelSpec {
        in_channels: c_in,
        base_channels: base,
        depth,
        conv_variant: variant,
        n_levels: grid[0],
        n_lat: grid[1],
        n_lon: grid[2],
        ..ModelSpec::default()
    }
}

fn train_forward(model: &Model, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let bound = model.params.bind(&tape, false);
    let out = model.forward(&bound, tape.constant(x.clone()), Mode::Train).unwrap();
    (*out.output.value()).clone()
}

/// Runs one train-mode pass so eval mode has running statistics.
fn warm_up(model: &mut Model, x: &Tensor) {
    let tape = Tape::new();
    let bound = model.params.bind(&tape, false);
    let out = model.forward(&bound, tape.constant(x.clone()), Mode::Train).unwrap();
    let stats = out.norm_stats.clone();
    drop(bound);
    update_running(&mut model.params, &stats, 0.1).unwrap();
}

#[test]
fn default_unet_shape_contract() {
    let model = Model::build(spec(ConvVariant::Standard, 32, 2, 6, [7, 20, 32])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = train_forward(&model, &random(&[6, 7, 20, 32], &mut rng));
    assert_eq!(y.shape(), &[1, 7, 20, 32]);
    assert!(y.all_finite());
}

#[test]
fn shape_contract_over_a_grid_of_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in ConvVariant::ALL {
        for depth in [1, 2] {
            for base in [2, 3] {
                let model = Model::build(spec(variant, base, depth, 2, [3, 8, 4])).unwrap();
                let y = train_forward(&model, &random(&[2, 2, 3, 8, 4], &mut rng));
                assert_eq!(y.shape(), &[2, 1, 3, 8, 4], "{variant} depth {depth} base {base}");
            }
        }
    }
}

#[test]
fn invalid_specs_and_inputs_are_rejected() {
    assert!(Model::build(spec(ConvVariant::Standard, 4, 2, 2, [3, 6, 8])).is_err());
    assert!(Model::build(spec(ConvVariant::Standard, 4, 0, 2, [3, 8, 8])).is_err());
    // Oversized topologies are refused before anything is allocated.
    for (base, depth) in [(usize::MAX / 2, 1), (1 << 15, 2), (4, 17)] {
        let s = ModelSpec {
            base_channels: base,
            depth,
            ..ModelSpec::default()
        };
        assert!(s.validate().is_err(), "base {base} depth {depth}");
    }
    let huge = ModelSpec {
        conv_variant: ConvVariant::Full,
        base_channels: 512,
        n_levels: 1 << 20,
        ..ModelSpec::default()
    };
    assert!(huge.validate().unwrap_err().to_string().contains("parameters"));
    let model = Model::build(spec(ConvVariant::Affine, 2, 1, 2, [3, 4, 4])).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind(&tape, false);
    let bad = tape.constant(Tensor::zeros(&[1, 5, 3, 4, 4]));
    let err = model.forward(&bound, bad, Mode::Train).err().unwrap().to_string();
    assert!(err.contains("expected 2") && err.contains("got 5"), "{err}");
    let wrong_levels = tape.constant(Tensor::zeros(&[1, 2, 2, 4, 4]));
    assert!(model.forward(&bound, wrong_levels, Mode::Train).is_err());
    // Eval mode needs running statistics from at least one training step.
    assert!(model.predict(&Tensor::zeros(&[2, 3, 4, 4])).is_err());
}

/// Closed-form parameter count of a U-Net, written out independently of the
/// model's own bookkeeping.
fn expected_count(variant: ConvVariant, c_in: usize, base: usize, depth: usize, p: usize) -> usize {
    let conv = |ci: usize, co: usize| -> usize {
        match variant {
            ConvVariant::Standard => 27 * ci * co + co,
            ConvVariant::Full => p * (27 * ci * co + co),
            ConvVariant::Affine => 27 * ci * co + co + 2 * co * p,
            ConvVariant::Separable => 9 * ci * co + 3 * co * co + co,
        }
    };
    let block = |ci: usize, co: usize| conv(ci, co) + conv(co, co) + 4 * co;
    let mut total = 0;
    let mut c = c_in;
    for i in 0..depth {
        total += block(c, base << i);
        c = base << i;
    }
    total += block(c, base << depth);
    for i in (0..depth).rev() {
        total += block((base << (i + 1)) + (base << i), base << i);
    }
    total + base + 1
}

#[test]
fn parameter_counts_match_closed_forms() {
    for variant in ConvVariant::ALL {
        for (c_in, base, depth) in [(6, 32, 2), (3, 8, 1), (18, 8, 2), (1, 2, 3)] {
            let s = spec(variant, base, depth, c_in, [7, 16, 16]);
            let model = Model::build(s.clone()).unwrap();
            let want = expected_count(variant, c_in, base, depth, 7);
            assert_eq!(s.param_count(), want, "{variant} {c_in} {base} {depth}");
            assert_eq!(model.params.count(), want);
        }
    }
    // Affine adds 2·C·P per convolution: two per block.
    let std = spec(ConvVariant::Standard, 32, 2, 6, [7, 20, 32]);
    let aff = ModelSpec {
        conv_variant: ConvVariant::Affine,
        ..std.clone()
    };
    let per_block: usize = std.unet_blocks().iter().map(|(_, _, co)| 2 * (2 * co * 7)).sum();
    assert_eq!(aff.param_count() - std.param_count(), per_block);
}

#[test]
fn initialization_is_deterministic_per_seed() {
    let s = spec(ConvVariant::Separable, 4, 2, 3, [7, 8, 8]);
    let a = Model::build(s.clone()).unwrap();
    assert_eq!(a, Model::build(s.clone()).unwrap());
    let b = Model::build(ModelSpec { seed: 1, ..s }).unwrap();
    assert_ne!(a.params.tensors, b.params.tensors);
    // Scales start at one, shifts and biases at zero.
    let aff = Model::build(spec(ConvVariant::Affine, 2, 1, 1, [3, 4, 4])).unwrap();
    assert!(aff
        .params
        .get("enc0.conv0.scale")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert!(aff
        .params
        .get("enc0.conv0.shift")
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
    assert!(aff.params.get("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_batches_match_single_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in ConvVariant::ALL {
        let mut model = Model::build(spec(variant, 3, 2, 2, [3, 8, 8])).unwrap();
        let batch = random(&[3, 2, 3, 8, 8], &mut rng);
        warm_up(&mut model, &batch);
        let together = model.predict(&batch).unwrap();
        for i in 0..3 {
            let alone = model.predict(&batch.index_axis0(i).unwrap()).unwrap();
            assert_eq!(alone.data(), together.index_axis0(i).unwrap().data(), "{variant}");
        }
        assert_eq!(model.predict(&batch).unwrap(), together);
    }
}

#[test]
fn zero_input_gives_finite_output() {
    let mut model = Model::build(spec(ConvVariant::Standard, 2, 1, 2, [3, 4, 4])).unwrap();
    let x = Tensor::zeros(&[1, 2, 3, 4, 4]);
    warm_up(&mut model, &x);
    let y = model.predict(&x).unwrap();
    assert!(y.all_finite());
    assert_eq!(y.shape(), &[1, 1, 3, 4, 4]);
}

#[test]
fn tiny_unet_passes_grad_check() {
    for variant in ConvVariant::ALL {
        let c = model_grad_check(&spec(variant, 2, 1, 2, [1, 4, 4]), 2, 3).unwrap();
        assert!(c.passed(), "{variant}: {c:?}");
        // Every conv bias sits in front of a batch norm.
        assert_eq!(c.zero_gradient.iter().filter(|n| n.ends_with(".bias")).count(), 6);
    }
    // Two levels exercise the per-level parameters.
    for variant in [ConvVariant::Affine, ConvVariant::Full] {
        let c = model_grad_check(&spec(variant, 2, 1, 2, [2, 4, 4]), 2, 3).unwrap();
        assert!(c.passed(), "{variant} on two levels: {c:?}");
        assert!(c.skipped.is_empty());
    }
    let full = model_grad_check(&spec(ConvVariant::Full, 2, 1, 2, [2, 4, 4]), 2, 3).unwrap();
    assert!(full.zero_gradient.is_empty());
}

#[test]
fn unet_grad_check_is_robust_across_seeds() {
    for seed in 4..8 {
        let c = model_grad_check(&spec(ConvVariant::Standard, 2, 1, 2, [1, 4, 4]), 2, seed).unwrap();
        assert!(c.passed(), "seed {seed}: {c:?}");
    }
}

#[test]
fn convlstm_model_shapes_and_gradients() {
    let s = ModelSpec {
        arch: Arch::ConvLstm,
        temporal_mode: TemporalMode::SpreadChannelsPlusIp,
        in_channels: 4,
        time_steps: 2,
        base_channels: 3,
        n_levels: 1,
        n_lat: 4,
        n_lon: 4,
        ..ModelSpec::default()
    };
    let model = Model::build(s.clone()).unwrap();
    assert!(model.spec.norm_layers().is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 4, 1, 4, 4], &mut rng);
    let y = model.predict(&x).unwrap();
    assert_eq!(y.shape(), &[2, 1, 1, 4, 4]);
    let target = random(&[2, 1, 1, 4, 4], &mut rng);
    let flat_x = x.clone();
    let err = grad_check(
        |tape, v| {
            let bound = model.params.bind(tape, false);
            let y = model.forward(&bound, v, Mode::Train)?.output;
            mse_loss(y, tape.constant(target.clone()))
        },
        &flat_x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    assert!(Model::build(ModelSpec {
        temporal_mode: TemporalMode::None,
        ..s
    })
    .is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = Model::build(spec(ConvVariant::Affine, 2, 1, 2, [3, 4, 4])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    warm_up(&mut model, &random(&[2, 2, 3, 4, 4], &mut rng));
    let (bytes, meta) = encode_checkpoint(&model).unwrap();
    let back = decode_checkpoint(&bytes, &meta).unwrap();
    assert_eq!(back.spec, model.spec);
    for (k, t) in &model.params.tensors {
        let b = back.params.get(k).unwrap();
        let rounded: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(b.data(), rounded.as_slice(), "{k}");
    }
    assert_eq!(back.params.running["enc0.bn0"].updates, 1);
    let (bytes2, meta2) = encode_checkpoint(&back).unwrap();
    assert_eq!((bytes2, meta2), (bytes.clone(), meta.clone()));

    assert!(decode_checkpoint(&bytes[..bytes.len() - 4], &meta).is_err());
    assert!(decode_checkpoint(&bytes, &meta.replace("base_channels=2", "base_channels=3")).is_err());
    assert!(decode_checkpoint(&bytes, &format!("{meta}junk=1\n")).is_err());
    let wrong = meta.replace("tensor.head.bias=1", "tensor.head.bias=2");
    assert!(decode_checkpoint(&bytes, &wrong).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&model, &path).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), back);
    assert!(read_checkpoint(&dir.path().join("none.ckpt")).is_err());
}

fn slab(values: Vec<f64>, p: usize) -> Tensor {
    let n = values.len() / p;
    Tensor::new(vec![p, 1, n], values).unwrap()
}

#[test]
fn linear_baseline_recovers_exact_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs: Vec<(Tensor, Tensor)> = (0..3)
        .map(|_| {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..2.0)).collect();
            // Level 0 follows y = 2x + 1, level 1 follows y = x.
            let y: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(i, v)| if i < 5 { 2.0 * v + 1.0 } else { *v })
                .collect();
            (slab(x, 2), slab(y, 2))
        })
        .collect();
    let fit = fit_linear_baseline(&pairs).unwrap();
    assert!(
        (fit.a[0] - 2.0).abs() < 1e-10 && (fit.b[0] - 1.0).abs() < 1e-10,
        "{fit:?}"
    );
    assert!((fit.a[1] - 1.0).abs() < 1e-10 && fit.b[1].abs() < 1e-10, "{fit:?}");
    let pred = predict_linear_baseline(&fit, &pairs[0].0).unwrap();
    assert!(pred.max_abs_diff(&pairs[0].1) < 1e-10);
}

#[test]
fn linear_baseline_degenerate_cases() {
    // Constant target with varying predictor: a = 0, b = c.
    let pairs = vec![
        (slab(vec![1.0, 2.0, 3.0], 1), slab(vec![4.0; 3], 1)),
        (slab(vec![5.0, 0.5, 1.5], 1), slab(vec![4.0; 3], 1)),
    ];
    let fit = fit_linear_baseline(&pairs).unwrap();
    assert!(fit.a[0].abs() < 1e-12 && (fit.b[0] - 4.0).abs() < 1e-12);
    // Constant predictor: documented fallback.
    let pairs = vec![
        (slab(vec![0.1; 3], 1), slab(vec![1.0, 2.0, 3.0], 1)),
        (slab(vec![0.1; 3], 1), slab(vec![4.0, 5.0, 6.0], 1)),
    ];
    let fit = fit_linear_baseline(&pairs).unwrap();
    assert_eq!(fit.a[0], 0.0);
    assert!((fit.b[0] - 3.5).abs() < 1e-12);
    assert!(fit_linear_baseline(&pairs[..1]).is_err());
}

#[test]
fn linear_residuals_are_orthogonal_to_the_predictor() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pairs: Vec<(Tensor, Tensor)> = (0..5)
        .map(|_| (random(&[3, 2, 4], &mut rng), random(&[3, 2, 4], &mut rng)))
        .collect();
    let fit = fit_linear_baseline(&pairs).unwrap();
    for l in 0..3 {
        let (mut dot, mut sum, mut norm) = (0.0, 0.0, 0.0);
        for (x, y) in &pairs {
            let p = predict_linear_baseline(&fit, x).unwrap();
            for i in l * 8..(l + 1) * 8 {
                let r = y.data()[i] - p.data()[i];
                dot += r * x.data()[i];
                sum += r;
                norm += x.data()[i].abs() * y.data()[i].abs();
            }
        }
        assert!(dot.abs() <= 1e-8 * norm, "level {l}: {dot}");
        assert!(sum.abs() < 1e-10);
    }
}
