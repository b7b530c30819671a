use std::sync::Arc;

use proptest::prelude::*;
use spreadnet::grids::{
    channel_pack, compute_norm_stats, destandardize, ensemble_mean, ensemble_spread, standardize, EnsembleSample,
    Field, GridSpec, NormStats, STD_FLOOR,
};

fn spec(p: usize, l: usize, h: usize, w: usize) -> Arc<GridSpec> {
    Arc::new(GridSpec::with_shape(p, l, h, w))
}

fn field(spec: &Arc<GridSpec>, data: Vec<f64>) -> Field {
    Field::new(spec.clone(), data).unwrap()
}

fn constant(spec: &Arc<GridSpec>, v: f64) -> Field {
    field(spec, vec![v; spec.field_len()])
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn mean_and_spread_examples() {
    let s = spec(1, 1, 1, 1);
    let f = constant(&s, -2.25);
    assert_eq!(ensemble_mean(&[&f, &f, &f, &f]).unwrap(), f);
    assert_eq!(ensemble_spread(&[&f, &f, &f]).unwrap().data(), &[0.0]);

    let (a, b) = (constant(&s, 1.0), constant(&s, 3.0));
    assert_eq!(ensemble_mean(&[&a, &b]).unwrap().data(), &[2.0]);
    assert!((ensemble_spread(&[&a, &b]).unwrap().data()[0] - 1.41421356).abs() < 1e-8);

    let five: Vec<Field> = (0..5).map(|v| constant(&s, v as f64)).collect();
    let refs: Vec<&Field> = five.iter().collect();
    assert_eq!(ensemble_mean(&refs).unwrap().data(), &[2.0]);
    assert!((ensemble_spread(&refs).unwrap().data()[0] - 1.58113883).abs() < 1e-8);
}

#[test]
fn norm_stats_examples() {
    let s = spec(3, 2, 2, 3);
    let st = compute_norm_stats([&constant(&s, 5.0)]).unwrap();
    assert!(st.mean.iter().all(|&m| m == 5.0));
    assert!(st.std.iter().all(|&v| v == STD_FLOOR));
    let st = compute_norm_stats([&constant(&s, 0.0), &constant(&s, 2.0)]).unwrap();
    assert!(st.mean.iter().all(|&m| (m - 1.0).abs() < 1e-15));
    assert!(st.std.iter().all(|&v| (v - 1.0).abs() < 1e-15));
}

#[test]
fn standardize_example() {
    let s = spec(1, 1, 1, 1);
    let st = NormStats {
        n_params: 1,
        n_levels: 1,
        mean: vec![5.0],
        std: vec![2.0],
        std_floor: STD_FLOOR,
    };
    assert_eq!(standardize(&constant(&s, 7.0), &st).unwrap().data(), &[1.0]);
    let f = constant(&s, 7.0);
    assert_eq!(standardize(&f, &NormStats::identity(1, 1)).unwrap(), f);
}

fn sample_of(spec: &Arc<GridSpec>, n_members: usize, values: &[f64]) -> EnsembleSample {
    let n = spec.field_len();
    let members = (0..n_members)
        .map(|m| {
            (0..spec.n_times())
                .map(|t| {
                    let off = (m * spec.n_times() + t) * n;
                    field(spec, values[off..off + n].to_vec())
                })
                .collect()
        })
        .collect();
    EnsembleSample {
        spec: spec.clone(),
        members,
        control_index: Some(0),
        sample_id: "x".into(),
        epoch_tag: 0,
    }
}

#[test]
fn channel_pack_examples() {
    let s = spec(6, 7, 2, 2);
    let values: Vec<f64> = (0..2 * 3 * s.field_len()).map(|i| i as f64).collect();
    let smp = sample_of(&s, 2, &values);
    let all: Vec<usize> = (0..6).collect();
    assert_eq!(channel_pack(&smp, &[0], &[0], &all, &[], None).unwrap().shape()[0], 6);
    assert_eq!(
        channel_pack(&smp, &[0, 1], &[0, 1], &[3], &[], None).unwrap().shape()[0],
        4
    );
    let sp: Vec<_> = (0..2)
        .map(|t| smp.spread_at(t).unwrap().slab(3, Some(4)).unwrap())
        .collect();
    let x = channel_pack(&smp, &[0], &[0], &all, &sp, Some(4)).unwrap();
    assert_eq!(x.shape(), &[8, 1, 2, 2]);
}

/// Members, grid and values for the property tests.
fn ensemble() -> impl Strategy<Value = (usize, [usize; 4], Vec<f64>)> {
    (2usize..7, 1usize..3, 1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(m, p, l, h, w)| {
        let n = m * p * l * h * w;
        (Just(m), Just([p, l, h, w]), prop::collection::vec(-100.0f64..100.0, n))
    })
}

fn fields_of(m: usize, dims: [usize; 4], values: &[f64]) -> (Arc<GridSpec>, Vec<Field>) {
    let s = spec(dims[0], dims[1], dims[2], dims[3]);
    let n = s.field_len();
    let fields = (0..m).map(|k| field(&s, values[k * n..(k + 1) * n].to_vec())).collect();
    (s, fields)
}

proptest! {
    #[test]
    fn spread_matches_two_pass_brute_force((m, dims, values) in ensemble()) {
        let (s, fields) = fields_of(m, dims, &values);
        let refs: Vec<&Field> = fields.iter().collect();
        let spread = ensemble_spread(&refs).unwrap();
        for i in 0..s.field_len() {
            let xs: Vec<f64> = fields.iter().map(|f| f.data()[i]).collect();
            let mean = xs.iter().sum::<f64>() / m as f64;
            let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
            let want = (ss / (m - 1) as f64).sqrt();
            prop_assert!(close(spread.data()[i], want, 1e-12), "{} vs {}", spread.data()[i], want);
            prop_assert!(spread.data()[i] >= 0.0);
        }
    }

    #[test]
    fn mean_and_spread_ignore_member_order((m, dims, values) in ensemble(), rot in 0usize..7) {
        let (_, fields) = fields_of(m, dims, &values);
        let refs: Vec<&Field> = fields.iter().collect();
        let mut perm = refs.clone();
        perm.rotate_left(rot % m);
        perm.swap(0, m - 1);
        let (a, b) = (ensemble_spread(&refs).unwrap(), ensemble_spread(&perm).unwrap());
        let (c, d) = (ensemble_mean(&refs).unwrap(), ensemble_mean(&perm).unwrap());
        for i in 0..a.data().len() {
            prop_assert!((a.data()[i] - b.data()[i]).abs() <= 1e-10);
            prop_assert!((c.data()[i] - d.data()[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn shifting_members_shifts_the_mean_only((m, dims, values) in ensemble(), c in -50.0f64..50.0) {
        let (s, fields) = fields_of(m, dims, &values);
        let shifted: Vec<Field> = fields
            .iter()
            .map(|f| field(&s, f.data().iter().map(|v| v + c).collect()))
            .collect();
        let refs: Vec<&Field> = fields.iter().collect();
        let srefs: Vec<&Field> = shifted.iter().collect();
        let (a, b) = (ensemble_spread(&refs).unwrap(), ensemble_spread(&srefs).unwrap());
        let (ma, mb) = (ensemble_mean(&refs).unwrap(), ensemble_mean(&srefs).unwrap());
        // Adding c rounds each value at about 150 * 2^-52.
        for i in 0..a.data().len() {
            prop_assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
            prop_assert!((ma.data()[i] + c - mb.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_round_trips(
        (m, dims, values) in ensemble(),
        means in prop::collection::vec(-50.0f64..50.0, 9),
        stds in prop::collection::vec(0.01f64..20.0, 9),
    ) {
        let (s, fields) = fields_of(m, dims, &values);
        let k = s.n_params * s.n_levels;
        let st = NormStats {
            n_params: s.n_params,
            n_levels: s.n_levels,
            mean: means[..k].to_vec(),
            std: stds[..k].to_vec(),
            std_floor: STD_FLOOR,
        };
        for f in &fields {
            let there = destandardize(&standardize(f, &st).unwrap(), &st).unwrap();
            let back = standardize(&destandardize(f, &st).unwrap(), &st).unwrap();
            for ((x, y), z) in f.data().iter().zip(there.data()).zip(back.data()) {
                prop_assert!(close(*x, *y, 1e-12) || (x - y).abs() < 1e-12);
                prop_assert!(close(*x, *z, 1e-12) || (x - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standardized_stream_has_zero_mean_unit_std((m, dims, values) in ensemble()) {
        let (_, fields) = fields_of(m, dims, &values);
        let st = compute_norm_stats(fields.iter()).unwrap();
        let z: Vec<Field> = fields.iter().map(|f| standardize(f, &st).unwrap()).collect();
        let again = compute_norm_stats(z.iter()).unwrap();
        for (i, sd) in st.std.iter().enumerate() {
            prop_assert!(again.mean[i].abs() < 1e-9);
            if *sd > STD_FLOOR {
                prop_assert!((again.std[i] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn channel_pack_slots_match_their_sources(
        members in prop::collection::vec(0usize..3, 1..4),
        times in prop::collection::vec(0usize..3, 1..4),
        params in prop::collection::vec(0usize..2, 1..3),
        level in prop::option::of(0usize..3),
        seed in 0u64..1000,
    ) {
        let s = spec(2, 3, 2, 3);
        let values: Vec<f64> = (0..3 * 3 * s.field_len()).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        let smp = sample_of(&s, 3, &values);
        let x = channel_pack(&smp, &members, &times, &params, &[], level).unwrap();
        let depth = if level.is_some() { 1 } else { 3 };
        let slab = depth * 6;
        prop_assert_eq!(x.shape(), &[members.len() * times.len() * params.len(), depth, 2, 3]);
        let mut k = 0;
        for &m in &members {
            for &t in &times {
                for &p in &params {
                    let want = smp.members[m][t].slab(p, level).unwrap();
                    prop_assert_eq!(&x.data()[k * slab..(k + 1) * slab], want.data());
                    k += 1;
                }
            }
        }
    }
}
