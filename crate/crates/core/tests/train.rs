mod common;

use common::{gen_config, random, reduced, seeded, sign_test_threshold, stats_of};
use spreadnet::autodiff::{Tape, Tensor};
use spreadnet::dataio::{KeyValues, StatsFile};
use spreadnet::grids::GridSpec;
use spreadnet::layers::ConvVariant;
use spreadnet::models::{Model, ModelSpec, TemporalMode};
use spreadnet::train::{
    adam_step, batch_gradients, curve_csv, dataset_rmse, evaluate, fit_linear_on, model_input, model_target, mse,
    mse_loss, prepare, rmse_metric, train, AdamConfig, AdamState, Dataset, EvalConfig, InputConfig, ModelEstimator,
    ReducedSample, SpreadEstimator, TrainConfig,
};
use spreadnet::{Error, Result};
use std::collections::BTreeMap;

#[test]
fn loss_examples() {
    let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let b = a.map(|v| v + 2.0);
    assert_eq!(mse(&a, &b).unwrap(), 4.0);
    assert_eq!(rmse_metric(&a, &b).unwrap(), 2.0);
    assert!(mse(&a, &Tensor::zeros(&[3, 2])).is_err());
    let tape = Tape::new();
    let l = mse_loss(tape.constant(a.clone()), tape.constant(b)).unwrap();
    assert_eq!(l.value().item().unwrap(), 4.0);

    let mut rng = seeded(0);
    for _ in 0..20 {
        let (p, t) = (random(&[3, 4, 5], &mut rng), random(&[3, 4, 5], &mut rng));
        let r = rmse_metric(&p, &t).unwrap();
        assert!((r * r - mse(&p, &t).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn adam_examples() {
    let cfg = AdamConfig::default();
    let mut params = BTreeMap::from([("w".to_string(), Tensor::from_vec(vec![0.5, -2.0]))]);
    let zero = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
    let mut state = AdamState::default();
    adam_step(&mut params, &zero, &mut state, &cfg).unwrap();
    assert_eq!(params["w"].data(), &[0.5, -2.0]);
    assert!(state.m["w"].data().iter().chain(state.v["w"].data()).all(|&v| v == 0.0));

    let mut p = BTreeMap::from([("s".to_string(), Tensor::from_vec(vec![0.0]))]);
    let g = BTreeMap::from([("s".to_string(), Tensor::from_vec(vec![1.0]))]);
    adam_step(&mut p, &g, &mut AdamState::default(), &cfg).unwrap();
    let step = p["s"].data()[0];
    assert!((step - -9.99999990e-4).abs() < 1e-15, "{step:e}");

    let wrong = BTreeMap::from([("x".to_string(), Tensor::zeros(&[1]))]);
    assert!(adam_step(&mut p, &wrong, &mut AdamState::default(), &cfg).is_err());

    let run = || {
        let mut rng = seeded(1);
        let mut p = BTreeMap::from([("w".to_string(), random(&[5], &mut rng))]);
        let mut s = AdamState::default();
        for _ in 0..10 {
            let g = BTreeMap::from([("w".to_string(), random(&[5], &mut rng))]);
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}

struct Fixture {
    samples: Vec<ReducedSample>,
    stats: StatsFile,
    input: InputConfig,
    data: Dataset,
}

fn fixture(n: usize, seed: u64) -> Fixture {
    let cfg = gen_config(2, 3, 8, 8, seed);
    let (samples, full) = reduced(&cfg, n, 1);
    let stats = stats_of(&full);
    let input = InputConfig::raw(&cfg.spec, 1);
    let data = prepare(&samples, &stats, &input, false).unwrap();
    Fixture {
        samples,
        stats,
        input,
        data,
    }
}

fn small_model(f: &Fixture, base: usize, variant: ConvVariant) -> Model {
    let s = &f.samples[0].spec;
    Model::build(ModelSpec {
        in_channels: f.input.channels(s),
        base_channels: base,
        depth: 1,
        conv_variant: variant,
        n_levels: s.n_levels,
        n_lat: s.n_lat,
        n_lon: s.n_lon,
        ..ModelSpec::default()
    })
    .unwrap()
}

fn max_rel_diff(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> f64 {
    let scale = a.values().flat_map(|t| t.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().map(|(k, t)| t.max_abs_diff(&b[k]) / scale).fold(0.0, f64::max)
}

#[test]
fn worker_averaged_gradients_match_the_full_batch() {
    let f = fixture(8, 2);
    for variant in ConvVariant::ALL {
        let model = small_model(&f, 4, variant);
        let xs: Vec<&Tensor> = f.data.inputs.iter().collect();
        let ys: Vec<&Tensor> = f.data.targets.iter().collect();
        let one = batch_gradients(&model, &xs, &ys, 1).unwrap();
        for w in [2, 4] {
            let many = batch_gradients(&model, &xs, &ys, w).unwrap();
            let d = max_rel_diff(&one.grads, &many.grads);
            assert!(d < 1e-10, "{variant} with {w} workers: {d:e}");
            assert!((one.loss - many.loss).abs() < 1e-12 * one.loss.abs().max(1.0));
        }
        assert!(batch_gradients(&model, &xs, &ys, 3).is_err());
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let f = fixture(8, 3);
    for workers in [1, 2] {
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 12,
            n_workers: workers,
            checkpoint_every: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            train(
                small_model(&f, 3, ConvVariant::Standard),
                &f.data,
                Some(&f.data),
                &cfg,
                |_| {},
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |o: &spreadnet::train::TrainOutcome| {
            o.curve
                .iter()
                .map(|p| (p.train_mse.to_bits(), p.val_rmse.map(f64::to_bits)))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.model, b.model);
        assert_eq!(curve_csv(&a.curve), curve_csv(&b.curve));
        // Validation at 5, 10 and the final step.
        let validated: Vec<usize> = a
            .curve
            .iter()
            .filter(|p| p.val_rmse.is_some())
            .map(|p| p.step)
            .collect();
        assert_eq!(validated, vec![5, 10, 12]);
        let best = a.curve.iter().filter_map(|p| p.val_rmse).fold(f64::INFINITY, f64::min);
        assert_eq!(a.best_val_rmse, Some(best));
        assert_eq!(dataset_rmse(&a.best, &f.data, 4).unwrap(), best);
    }
}

#[test]
fn loss_curve_csv_format() {
    let f = fixture(4, 4);
    let cfg = TrainConfig {
        batch_size: 2,
        steps: 3,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let out = train(
        small_model(&f, 2, ConvVariant::Standard),
        &f.data,
        Some(&f.data),
        &cfg,
        |_| seen += 1,
    )
    .unwrap();
    assert_eq!(seen, 3);
    let csv = curve_csv(&out.curve);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,train_mse,val_rmse");
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(','));
    assert_eq!(lines[2].split(',').count(), 3);
    assert!(!lines[2].ends_with(','));
}

#[test]
fn baseline_unet_overfits_four_samples() {
    let mut f = fixture(4, 5);
    f.input.params = vec![f.input.target_param];
    f.data = prepare(&f.samples, &f.stats, &f.input, false).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 2000,
        checkpoint_every: 2000,
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut reached = None;
    let out = train(small_model(&f, 8, ConvVariant::Standard), &f.data, None, &cfg, |p| {
        if reached.is_none() && p.train_mse < 1e-3 {
            reached = Some(p.step);
        }
    })
    .unwrap();
    let last = out.curve.last().unwrap().train_mse;
    assert!(reached.is_some(), "final train MSE {last}");
}

#[test]
fn training_errors() {
    let f = fixture(4, 6);
    let model = small_model(&f, 2, ConvVariant::Standard);
    let cfg = TrainConfig {
        batch_size: 2,
        steps: 5,
        ..TrainConfig::default()
    };
    let empty = Dataset::default();
    assert!(matches!(
        train(model.clone(), &empty, None, &cfg, |_| {}),
        Err(Error::EmptyTrainingSet)
    ));
    let mut bad = f.data.clone();
    for t in &mut bad.targets {
        t.data_mut()[0] = f64::NAN;
    }
    let err = train(model.clone(), &bad, None, &cfg, |_| {}).err().unwrap();
    assert!(matches!(err, Error::Diverged(1)));
    assert_eq!(err.to_string(), "diverged at step 1");
    let uneven = TrainConfig {
        n_workers: 4,
        batch_size: 6,
        ..cfg.clone()
    };
    assert!(train(model.clone(), &f.data, None, &uneven, |_| {}).is_err());
    let zero_lr = TrainConfig {
        adam: AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        },
        ..cfg
    };
    assert!(train(model, &f.data, None, &zero_lr, |_| {}).is_err());
}

/// Returns the truth itself.
struct Oracle;

impl SpreadEstimator for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn estimate(&self, sample: &ReducedSample, _: &StatsFile) -> Result<Tensor> {
        Ok(sample.full_spread().clone())
    }
}

/// Sample standard deviation of members `0..m` at one point, two loops.
fn two_loop_std(values: &[f64]) -> f64 {
    let m = values.len() as f64;
    let mut mean = 0.0;
    for v in values {
        mean += v;
    }
    mean /= m;
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    (ss / (m - 1.0)).sqrt()
}

#[test]
fn evaluate_scores_oracle_ladder_and_linear_baseline() {
    let cfg = gen_config(2, 3, 4, 8, 7);
    let (samples, full) = reduced(&cfg, 6, 1);
    let stats = stats_of(&full);
    let linear = fit_linear_on(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ecfg = EvalConfig {
        heatmap_level: 1,
        heatmap_dir: Some(dir.path().join("maps")),
        heatmap_samples: 2,
    };
    let report = evaluate(&[&Oracle], Some(&linear), &samples, &stats, &ecfg).unwrap();
    assert_eq!(report.n_samples, 6);
    let oracle = report.row("oracle").unwrap();
    assert_eq!(oracle.rmse, 0.0);
    assert!(oracle.per_level.iter().all(|&v| v == 0.0));
    assert!(report.row("linear").unwrap().rmse > 0.0);
    // Two estimators, two samples, CSV plus PGM each.
    assert_eq!(report.heatmaps.len(), 8);
    assert!(report.heatmaps.iter().all(|p| p.exists()));

    // Brute-force ladder from the raw member fields.
    let spec = &cfg.spec;
    let (target, last) = (spec.param_index("t").unwrap_or(0), spec.n_times() - 1);
    for m in [1, 2, 4, 9] {
        let (mut ss, mut n) = (0.0, 0usize);
        for s in &full {
            let truth = s.spread_at(last).unwrap();
            for l in 0..spec.n_levels {
                for y in 0..spec.n_lat {
                    for x in 0..spec.n_lon {
                        let vals: Vec<f64> = (0..m).map(|k| s.members[k][last].get(target, l, y, x)).collect();
                        let est = if m == 1 { 0.0 } else { two_loop_std(&vals) };
                        let d = est - truth.get(target, l, y, x);
                        ss += d * d;
                        n += 1;
                    }
                }
            }
        }
        let want = (ss / n as f64).sqrt();
        let got = report.m_row(m).unwrap().rmse;
        assert!((got - want).abs() < 1e-12 * want.max(1e-300), "m={m}: {got} vs {want}");
    }
    assert_eq!(report.m_spread.len(), 9);

    let csv = report.to_csv();
    assert!(csv.starts_with("estimator,rmse,level0,level1,level2\n"));
    assert!(csv.contains("\noracle,0,0,0,0\n"));
    assert!(report.to_table().contains("spread m=9"));

    assert!(evaluate(&[&Oracle], None, &[], &stats, &ecfg).is_err());
    let bad_level = EvalConfig {
        heatmap_level: 3,
        ..ecfg
    };
    assert!(evaluate(&[&Oracle], None, &samples, &stats, &bad_level).is_err());
}

#[test]
fn destandardized_rmse_scales_per_level() {
    let f = fixture(6, 8);
    let mut model = small_model(&f, 3, ConvVariant::Affine);
    let cfg = TrainConfig {
        batch_size: 2,
        steps: 3,
        ..TrainConfig::default()
    };
    model = train(model, &f.data, None, &cfg, |_| {}).unwrap().model;
    let est = ModelEstimator {
        name: "unet".into(),
        model: model.clone(),
        input: f.input.clone(),
    };
    let report = evaluate(&[&est], None, &f.samples, &f.stats, &EvalConfig::default()).unwrap();
    let row = report.row("unet").unwrap();
    let spec = &f.samples[0].spec;
    let plane = spec.plane();
    let st = &f.stats.spread[spec.n_times() - 1];
    let target = f.samples[0].target_param;
    for l in 0..spec.n_levels {
        let mut ss = 0.0;
        for s in &f.samples {
            let pred = model.predict(&model_input(s, &f.stats, &f.input).unwrap()).unwrap();
            let want = model_target(s, &f.stats, &f.input).unwrap();
            let r = l * plane..(l + 1) * plane;
            ss += pred.data()[r.clone()]
                .iter()
                .zip(&want.data()[r])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let standardized = (ss / (plane * f.samples.len()) as f64).sqrt();
        let scaled = standardized * st.std_at(target, l);
        assert!(
            (scaled - row.per_level[l]).abs() < 1e-9,
            "level {l}: {scaled} vs {}",
            row.per_level[l]
        );
    }
}

#[test]
fn temporal_estimator_predicts_every_level() {
    let cfg = gen_config(2, 3, 4, 4, 9);
    let (samples, full) = reduced(&cfg, 4, 1);
    let stats = stats_of(&full);
    let input = InputConfig::temporal(&cfg.spec, TemporalMode::SpreadChannelsPlusIp, 0);
    let data = prepare(&samples, &stats, &input, true).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(data.inputs[0].shape(), &[4, 1, 4, 4]);
    let mut model = Model::build(ModelSpec {
        in_channels: input.channels(&cfg.spec),
        temporal_mode: input.temporal_mode,
        base_channels: 2,
        depth: 1,
        n_levels: 1,
        n_lat: 4,
        n_lon: 4,
        ..ModelSpec::default()
    })
    .unwrap();
    let tcfg = TrainConfig {
        batch_size: 3,
        steps: 2,
        ..TrainConfig::default()
    };
    model = train(model, &data, None, &tcfg, |_| {}).unwrap().model;
    let est = ModelEstimator {
        name: "temporal".into(),
        model,
        input,
    };
    let e = est.estimate(&samples[0], &stats).unwrap();
    assert_eq!(e.shape(), &[3, 4, 4]);
    assert!(e.all_finite());
}

#[test]
fn sample_spread_ladder_improves_with_members() {
    let cfg = gen_config(1, 2, 4, 8, 10);
    let (samples, full) = reduced(&cfg, 60, 1);
    let stats = stats_of(&full);
    let report = evaluate(&[], None, &samples, &stats, &EvalConfig::default()).unwrap();
    let need = sign_test_threshold(samples.len(), 0.05);
    for pair in [2, 3, 5, 9].windows(2) {
        let (a, b) = (report.m_row(pair[0]).unwrap(), report.m_row(pair[1]).unwrap());
        let wins = a.per_sample.iter().zip(&b.per_sample).filter(|(x, y)| y < x).count();
        assert!(
            wins >= need,
            "m={} vs m={}: {wins} of {} (need {need})",
            pair[0],
            pair[1],
            samples.len()
        );
    }
}

#[test]
fn sign_test_threshold_matches_binomial_tail() {
    // P(X ≥ 32 | n=50) ≈ 0.0325, P(X ≥ 31) ≈ 0.0595.
    assert_eq!(sign_test_threshold(50, 0.05), 32);
    assert_eq!(sign_test_threshold(10, 0.05), 9);
}

#[test]
fn input_config_text_round_trips() {
    let spec = GridSpec::desk_default();
    let mut kv = KeyValues::parse("m_trajectories=3\ninput_params=t,z\ntarget_param=r\ninput_times=0,2\n").unwrap();
    let raw = InputConfig::from_kv(&spec, &kv).unwrap();
    assert_eq!(raw.params, vec![3, 2]);
    assert_eq!((raw.m_trajectories, raw.target_param, raw.target_time), (3, 4, 2));
    assert_eq!(raw.input_times, vec![0, 2]);
    let back = InputConfig::from_kv(&spec, &KeyValues::parse(&raw.to_text()).unwrap()).unwrap();
    assert_eq!(back, raw);

    kv = KeyValues::parse("temporal_mode=spread+ip\nlevel=5\n").unwrap();
    let temporal = InputConfig::from_kv(&spec, &kv).unwrap();
    assert_eq!(
        temporal,
        InputConfig::temporal(&spec, TemporalMode::SpreadChannelsPlusIp, 5)
    );
    let back = InputConfig::from_kv(&spec, &KeyValues::parse(&temporal.to_text()).unwrap()).unwrap();
    assert_eq!(back, temporal);
    assert!(InputConfig::from_kv(&spec, &KeyValues::parse("input_params=q").unwrap()).is_err());
    assert!(InputConfig::from_kv(&spec, &KeyValues::parse("target_param=6").unwrap()).is_err());
}
